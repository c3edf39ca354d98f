//! Streaming multichannel signal representation.
//!
//! A [`SampleFrame`] is one tick of the sample clock carrying one voltage per
//! channel. Frames flow through an optional [`BandFilter`] into a
//! [`LagWindow`], which produces the lag-embedded feature vector consumed by
//! the decoder.

mod file;
mod filter;
pub(crate) mod window;

pub use file::{SignalReader, SignalWriter};
pub use filter::{BandFilter, FirstOrderSection};
pub use window::LagWindow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("invalid signal configuration: {0}")]
    Config(String),
    #[error("frame has {got} channels, expected {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("non-finite voltage on channel {channel} at t={t}")]
    NonFinite { channel: usize, t: u64 },
    #[error("frame t={got} does not follow t={newest}; resynchronize the stream")]
    Sequencing { newest: u64, got: u64 },
    #[error("lag window is cold ({have} of {need} frames)")]
    NotReady { have: usize, need: usize },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Acquisition and embedding parameters shared by every stage that touches
/// the signal stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalConfig {
    pub n_channels: usize,
    pub sample_rate_hz: f64,
    pub highpass_hz: f64,
    pub lowpass_hz: f64,
    /// Number of past taps `K`; the window holds taps `0..=K`.
    pub lag_count: usize,
    /// Spacing between taps, in samples.
    pub lag_stride: usize,
    /// Run the band filter in software before embedding. Sources that
    /// already deliver band-limited frames (the headset output) leave this off.
    pub front_end_filter: bool,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            n_channels: 14,
            sample_rate_hz: 128.0,
            highpass_hz: 0.16,
            lowpass_hz: 30.0,
            lag_count: 5,
            lag_stride: 1,
            front_end_filter: false,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<(), SignalError> {
        let fail = |msg: String| Err(SignalError::Config(msg));
        if self.n_channels == 0 {
            return fail("n_channels must be positive".into());
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return fail(format!("sample_rate_hz must be positive, got {}", self.sample_rate_hz));
        }
        if !(self.highpass_hz > 0.0
            && self.highpass_hz < self.lowpass_hz
            && self.lowpass_hz < self.sample_rate_hz / 2.0)
        {
            return fail(format!(
                "need 0 < highpass_hz < lowpass_hz < sample_rate_hz/2, got {} / {} / {}",
                self.highpass_hz, self.lowpass_hz, self.sample_rate_hz
            ));
        }
        if self.lag_stride == 0 {
            return fail("lag_stride must be at least 1".into());
        }
        if (self.lag_count * self.lag_stride) as f64 >= self.sample_rate_hz {
            return fail(format!(
                "lag window of {} samples must be shorter than one second",
                self.lag_count * self.lag_stride
            ));
        }
        Ok(())
    }

    /// Length of the feature vector: intercept slot plus `N * (K + 1)` taps.
    pub fn feature_len(&self) -> usize {
        self.n_channels * (self.lag_count + 1) + 1
    }

    /// Number of consecutive frames the lag window spans.
    pub fn window_len(&self) -> usize {
        self.lag_count * self.lag_stride + 1
    }

    pub fn sample_period_s(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }
}

/// One time-stamped vector of channel voltages.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFrame {
    /// Sample index in ticks of the sample clock.
    pub t: u64,
    pub voltages: Vec<f64>,
}

impl SampleFrame {
    pub fn new(t: u64, voltages: Vec<f64>) -> Self {
        Self { t, voltages }
    }

    /// Checks channel count and finiteness against `n_channels`.
    pub fn check(&self, n_channels: usize) -> Result<(), SignalError> {
        if self.voltages.len() != n_channels {
            return Err(SignalError::ChannelMismatch {
                expected: n_channels,
                got: self.voltages.len(),
            });
        }
        match self.voltages.iter().position(|v| !v.is_finite()) {
            Some(channel) => Err(SignalError::NonFinite { channel, t: self.t }),
            None => Ok(()),
        }
    }
}
