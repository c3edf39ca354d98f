use std::f64::consts::PI;

use super::{SampleFrame, SignalConfig, SignalError};

/// First-order IIR section `y[n] = b0 x[n] + b1 x[n-1] - a1 y[n-1]`.
///
/// Both designs come from the bilinear transform with the cutoff prewarped,
/// so the digital response is exactly -3 dB at the cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrderSection {
    pub b0: f64,
    pub b1: f64,
    pub a1: f64,
}

impl FirstOrderSection {
    pub fn lowpass(sample_rate_hz: f64, cutoff_hz: f64) -> Self {
        let k = (PI * cutoff_hz / sample_rate_hz).tan();
        Self {
            b0: k / (1.0 + k),
            b1: k / (1.0 + k),
            a1: (k - 1.0) / (1.0 + k),
        }
    }

    pub fn highpass(sample_rate_hz: f64, cutoff_hz: f64) -> Self {
        let k = (PI * cutoff_hz / sample_rate_hz).tan();
        Self {
            b0: 1.0 / (1.0 + k),
            b1: -1.0 / (1.0 + k),
            a1: (k - 1.0) / (1.0 + k),
        }
    }

    /// |H(e^{jω})| of this section at `freq_hz`.
    pub fn magnitude(&self, sample_rate_hz: f64, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / sample_rate_hz;
        let (num_re, num_im) = (self.b0 + self.b1 * w.cos(), -self.b1 * w.sin());
        let (den_re, den_im) = (1.0 + self.a1 * w.cos(), -self.a1 * w.sin());
        (num_re.hypot(num_im)) / (den_re.hypot(den_im))
    }

    #[inline]
    fn step(&self, x: f64, mem: &mut [f64; 2]) -> f64 {
        let y = self.b0 * x + self.b1 * mem[0] - self.a1 * mem[1];
        *mem = [x, y];
        y
    }
}

/// Per-channel high-pass cascaded with low-pass, applied causally.
#[derive(Debug, Clone)]
pub struct BandFilter {
    highpass: FirstOrderSection,
    lowpass: FirstOrderSection,
    // [hp x1, hp y1] and [lp x1, lp y1] per channel
    memory: Vec<[[f64; 2]; 2]>,
}

impl BandFilter {
    pub fn new(cfg: &SignalConfig) -> Result<Self, SignalError> {
        cfg.validate()?;
        Ok(Self {
            highpass: FirstOrderSection::highpass(cfg.sample_rate_hz, cfg.highpass_hz),
            lowpass: FirstOrderSection::lowpass(cfg.sample_rate_hz, cfg.lowpass_hz),
            memory: vec![[[0.0; 2]; 2]; cfg.n_channels],
        })
    }

    pub fn n_channels(&self) -> usize {
        self.memory.len()
    }

    pub fn reset(&mut self) {
        self.memory.iter_mut().for_each(|m| *m = [[0.0; 2]; 2]);
    }

    /// Advances the filter by one frame and returns the filtered frame.
    ///
    /// The memory is left untouched when the frame is rejected.
    pub fn step(&mut self, frame: &SampleFrame) -> Result<SampleFrame, SignalError> {
        frame.check(self.n_channels()).map_err(|e| match e {
            SignalError::ChannelMismatch { expected, got } => SignalError::Config(format!(
                "filter configured for {expected} channels, frame has {got}"
            )),
            other => other,
        })?;
        let voltages = frame
            .voltages
            .iter()
            .zip(self.memory.iter_mut())
            .map(|(&x, [hp, lp])| {
                let y = self.highpass.step(x, hp);
                self.lowpass.step(y, lp)
            })
            .collect();
        Ok(SampleFrame::new(frame.t, voltages))
    }

    /// Magnitude response of the cascade at `freq_hz`.
    pub fn magnitude(&self, sample_rate_hz: f64, freq_hz: f64) -> f64 {
        self.highpass.magnitude(sample_rate_hz, freq_hz)
            * self.lowpass.magnitude(sample_rate_hz, freq_hz)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_channel() -> (SignalConfig, BandFilter) {
        let cfg = SignalConfig { n_channels: 1, ..Default::default() };
        let filter = BandFilter::new(&cfg).unwrap();
        (cfg, filter)
    }

    /// Drives a unit sinusoid through a fresh filter and fits the steady-state
    /// amplitude over the final whole periods by projecting onto sin/cos.
    fn measured_gain(freq_hz: f64) -> f64 {
        let (cfg, mut filter) = single_channel();
        let fs = cfg.sample_rate_hz;
        let period = fs / freq_hz;
        let settle = (40.0 * fs) as usize;
        let periods = (20.0 * fs / period).ceil().max(4.0);
        let span = (periods * period).round() as usize;
        let (mut s, mut c) = (0.0, 0.0);
        for n in 0..settle + span {
            let phase = 2.0 * PI * freq_hz * n as f64 / fs;
            let y = filter.step(&SampleFrame::new(n as u64, vec![phase.sin()])).unwrap().voltages[0];
            if n >= settle {
                s += y * phase.sin();
                c += y * phase.cos();
            }
        }
        2.0 * s.hypot(c) / span as f64
    }

    fn analog_first_order_product(freq_hz: f64, hp: f64, lp: f64) -> f64 {
        let r = freq_hz / hp;
        (r / (1.0 + r * r).sqrt()) / (1.0 + (freq_hz / lp).powi(2)).sqrt()
    }

    fn db(x: f64) -> f64 {
        20.0 * x.log10()
    }

    #[test]
    fn constant_input_is_rejected() {
        let (cfg, mut filter) = single_channel();
        let mut y = 1.0;
        for t in 0..(20.0 * cfg.sample_rate_hz) as u64 {
            y = filter.step(&SampleFrame::new(t, vec![3.0])).unwrap().voltages[0];
        }
        assert!(db(y.abs() / 3.0) < -40.0, "residual {y}");
    }

    #[test]
    fn cutoff_gain_is_half_power() {
        let g = measured_gain(0.16);
        assert!((db(g) - db(std::f64::consts::FRAC_1_SQRT_2)).abs() <= 0.5, "gain {g}");
    }

    #[test]
    fn passband_gain_at_five_hz() {
        let g = measured_gain(5.0);
        assert!((0.9..=1.0).contains(&g), "gain {g}");
    }

    #[test]
    fn response_tracks_analog_prototype() {
        let (cfg, filter) = single_channel();
        for i in 0..10 {
            let f = 0.05 * (30.0f64 / 0.05).powf(i as f64 / 9.0);
            let expected = analog_first_order_product(f, cfg.highpass_hz, cfg.lowpass_hz);
            let measured = measured_gain(f);
            assert!((db(measured) - db(expected)).abs() <= 0.5, "f={f} measured={measured} expected={expected}");
            // the closed form for the digital sections agrees with simulation
            assert!((filter.magnitude(cfg.sample_rate_hz, f) - measured).abs() < 1e-3);
        }
    }

    #[test]
    fn channel_mismatch_is_a_config_error() {
        let (_, mut filter) = single_channel();
        let err = filter.step(&SampleFrame::new(0, vec![1.0, 2.0])).unwrap_err();
        assert!(matches!(err, SignalError::Config(_)));
    }

    #[test]
    fn non_finite_input_names_channel_and_time() {
        let cfg = SignalConfig { n_channels: 3, ..Default::default() };
        let mut filter = BandFilter::new(&cfg).unwrap();
        let err = filter.step(&SampleFrame::new(9, vec![0.0, 0.0, f64::INFINITY])).unwrap_err();
        assert!(matches!(err, SignalError::NonFinite { channel: 2, t: 9 }));
    }

    proptest! {
        #[test]
        fn filter_is_linear(
            xs in prop::collection::vec(-100.0f64..100.0, 64),
            ys in prop::collection::vec(-100.0f64..100.0, 64),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let (_, mut fx) = single_channel();
            let (mut fy, mut fz) = (fx.clone(), fx.clone());
            for (t, (x, y)) in xs.iter().zip(&ys).enumerate() {
                let t = t as u64;
                let ox = fx.step(&SampleFrame::new(t, vec![*x])).unwrap().voltages[0];
                let oy = fy.step(&SampleFrame::new(t, vec![*y])).unwrap().voltages[0];
                let oz = fz.step(&SampleFrame::new(t, vec![a * x + b * y])).unwrap().voltages[0];
                prop_assert!((oz - (a * ox + b * oy)).abs() <= 1e-9);
            }
        }
    }
}
