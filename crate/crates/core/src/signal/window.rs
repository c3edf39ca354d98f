use std::collections::VecDeque;

use super::{SampleFrame, SignalConfig, SignalError};

/// FIFO of the most recent `K * stride + 1` frames.
#[derive(Debug, Clone)]
pub struct LagWindow {
    frames: VecDeque<SampleFrame>,
    capacity: usize,
}

impl LagWindow {
    pub fn new(cfg: &SignalConfig) -> Self {
        let capacity = cfg.window_len();
        Self { frames: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_warm(&self) -> bool {
        self.frames.len() == self.capacity
    }

    pub fn newest_t(&self) -> Option<u64> {
        self.frames.back().map(|f| f.t)
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn frames(&self) -> impl Iterator<Item = &SampleFrame> {
        self.frames.iter()
    }

    /// Appends a frame, evicting the oldest once full.
    ///
    /// Rejects any frame whose index is not exactly one past the newest; the
    /// window is left unchanged so the caller can clear and resynchronize.
    pub fn push(&mut self, frame: SampleFrame) -> Result<(), SignalError> {
        if let Some(newest) = self.newest_t() {
            if frame.t != newest + 1 {
                return Err(SignalError::Sequencing { newest, got: frame.t });
            }
        }
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
        Ok(())
    }

    /// Lag-embedded features of the newest frame.
    ///
    /// Layout: element 0 is the constant 1; element `1 + n*(K+1) + k` is
    /// channel `n` at `t - k*stride`.
    pub fn feature_vector(&self, cfg: &SignalConfig) -> Result<Vec<f64>, SignalError> {
        let mut out = vec![0.0; cfg.feature_len()];
        self.write_features(cfg, &mut out)?;
        Ok(out)
    }

    pub fn write_features(&self, cfg: &SignalConfig, out: &mut [f64]) -> Result<(), SignalError> {
        if !self.is_warm() || self.capacity != cfg.window_len() {
            return Err(SignalError::NotReady { have: self.frames.len(), need: cfg.window_len() });
        }
        if out.len() != cfg.feature_len() {
            return Err(SignalError::Config(format!(
                "feature buffer has {} slots, expected {}",
                out.len(),
                cfg.feature_len()
            )));
        }
        let newest = self.frames.len() - 1;
        let taps = cfg.lag_count + 1;
        out[0] = 1.0;
        for k in 0..taps {
            let frame = &self.frames[newest - k * cfg.lag_stride];
            if frame.voltages.len() != cfg.n_channels {
                return Err(SignalError::ChannelMismatch {
                    expected: cfg.n_channels,
                    got: frame.voltages.len(),
                });
            }
            for (n, v) in frame.voltages.iter().enumerate() {
                out[1 + n * taps + k] = *v;
            }
        }
        Ok(())
    }
}

/// Writes features for the frame at `end - 1` from a contiguous slice of
/// (already filtered) frames; used when embedding whole recordings offline.
pub(crate) fn embed_at(frames: &[SampleFrame], end: usize, cfg: &SignalConfig, out: &mut [f64]) {
    let taps = cfg.lag_count + 1;
    out[0] = 1.0;
    for k in 0..taps {
        let frame = &frames[end - 1 - k * cfg.lag_stride];
        for (n, v) in frame.voltages.iter().enumerate() {
            out[1 + n * taps + k] = *v;
        }
    }
}
