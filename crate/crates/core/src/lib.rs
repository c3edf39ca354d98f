//! Closed-loop EEG kinematics decoding with robot neurofeedback.
//!
//! Frames from a [`subject::SignalSource`] are lag-embedded by [`signal`],
//! mapped to cursor velocity by a linear [`decoder`], drive the
//! target-acquisition [`task`], and gate gestures sent over the [`robot`]
//! link. [`session`] runs the whole loop and [`recording`] persists it.

pub mod decoder;
pub mod recording;
pub mod report;
pub mod robot;
pub mod session;
pub mod signal;
pub mod subject;
pub mod task;

pub use decoder::{DecoderModel, FitReport};
pub use recording::SessionRecording;
pub use session::{run_session, SessionConfig, SessionIo, SessionResult};
pub use signal::{SampleFrame, SignalConfig};
