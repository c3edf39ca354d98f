//! On-disk session recordings.
//!
//! One directory per session:
//!
//! ```text
//! format_version   "1"
//! config.json      session configuration
//! status.json      {"complete": bool, "reason": string|null}
//! signals.csv      raw frames (signal file format)
//! reference.csv    t,x,y,u,v   reference cursor per sample of each training trial
//! events.jsonl     protocol events
//! decoded.csv      t_s,u,v     decoder output per test tick
//! cursor.csv       t_s,trial,x,y,active
//! commands.jsonl   robot commands as sent
//! model.json       decoder fitted at calibration (absent if calibration failed)
//! timing.json      loop latency statistics (realtime sessions only)
//! ```
//!
//! Everything but `timing.json` is a pure function of configuration, seeds
//! and the inbound intent timeline.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{DecoderError, DecoderModel};
use crate::robot::GestureCommand;
use crate::session::SessionConfig;
use crate::signal::{SampleFrame, SignalConfig, SignalError, SignalReader, SignalWriter};
use crate::task::{Direction, ProtocolPhase, TrialOutcome};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordingError {
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("unsupported recording format version {0}")]
    Version(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t_s: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialEndOutcome {
    Hit,
    Timeout,
    /// Training trial ran its full duration.
    Completed,
    /// Block ended early (operator `next_mode` or abort).
    Skipped,
}

impl From<TrialOutcome> for TrialEndOutcome {
    fn from(o: TrialOutcome) -> Self {
        match o {
            TrialOutcome::Hit => TrialEndOutcome::Hit,
            TrialOutcome::Timeout => TrialEndOutcome::Timeout,
        }
    }
}

/// Event payloads. Serialized with a `type` tag; unknown types fail to parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    PhaseStart {
        phase: ProtocolPhase,
    },
    TrialStart {
        trial: u32,
        phase: ProtocolPhase,
        run: usize,
    },
    TargetShown {
        trial: u32,
        direction: Direction,
        center: [f64; 2],
        radius: f64,
    },
    Hit {
        trial: u32,
        direction: Direction,
        time_to_target: f64,
    },
    Timeout {
        trial: u32,
        direction: Direction,
        elapsed: f64,
    },
    TrialEnd {
        trial: u32,
        outcome: TrialEndOutcome,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wrong_direction_time: Option<f64>,
    },
    Fault {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        trial: Option<u32>,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub t: u64,
    pub x: f64,
    pub y: f64,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodedRow {
    pub t_s: f64,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CursorRow {
    pub t_s: f64,
    pub trial: u32,
    pub x: f64,
    pub y: f64,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandRow {
    pub t_s: f64,
    #[serde(flatten)]
    pub command: GestureCommand,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RecordingStatus {
    pub complete: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingStats {
    pub ticks: usize,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone)]
pub struct SessionRecording {
    pub config: Option<SessionConfig>,
    pub signal_config: SignalConfig,
    pub status: RecordingStatus,
    pub frames: Vec<SampleFrame>,
    pub reference: Vec<ReferenceRow>,
    pub events: Vec<Event>,
    pub decoded: Vec<DecodedRow>,
    pub cursor: Vec<CursorRow>,
    pub commands: Vec<CommandRow>,
    pub model: Option<DecoderModel>,
    pub timing: Option<TimingStats>,
}

impl SessionRecording {
    pub fn new(signal_config: SignalConfig) -> Self {
        Self {
            config: None,
            signal_config,
            status: RecordingStatus::default(),
            frames: Vec::new(),
            reference: Vec::new(),
            events: Vec::new(),
            decoded: Vec::new(),
            cursor: Vec::new(),
            commands: Vec::new(),
            model: None,
            timing: None,
        }
    }

    pub fn push_event(&mut self, t_s: f64, kind: EventKind) {
        self.events.push(Event { t_s, kind });
    }

    pub fn save(&self, dir: &Path) -> Result<(), RecordingError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("format_version"), format!("{FORMAT_VERSION}\n"))?;
        if let Some(cfg) = &self.config {
            write_json(&dir.join("config.json"), cfg)?;
        }
        write_json(&dir.join("status.json"), &self.status)?;

        let mut signals = SignalWriter::create(&dir.join("signals.csv"), &self.signal_config)?;
        for f in &self.frames {
            signals.write_frame(f)?;
        }
        signals.finish()?;

        write_csv(&dir.join("reference.csv"), &self.reference)?;
        write_csv(&dir.join("decoded.csv"), &self.decoded)?;
        write_csv(&dir.join("cursor.csv"), &self.cursor)?;
        write_jsonl(&dir.join("events.jsonl"), &self.events)?;
        write_jsonl(&dir.join("commands.jsonl"), &self.commands)?;

        let model_path = dir.join("model.json");
        match &self.model {
            Some(m) => m.save(&model_path)?,
            None if model_path.exists() => fs::remove_file(&model_path)?,
            None => {}
        }
        let timing_path = dir.join("timing.json");
        match &self.timing {
            Some(t) => write_json(&timing_path, t)?,
            None if timing_path.exists() => fs::remove_file(&timing_path)?,
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RecordingError> {
        let version_path = dir.join("format_version");
        let version = fs::read_to_string(&version_path).map_err(|e| RecordingError::Format {
            path: version_path.display().to_string(),
            message: format!("not a session recording: {e}"),
        })?;
        if version.trim() != FORMAT_VERSION.to_string() {
            return Err(RecordingError::Version(version.trim().to_string()));
        }
        let config_path = dir.join("config.json");
        let config = if config_path.exists() { Some(read_json(&config_path)?) } else { None };
        let status = read_json(&dir.join("status.json"))?;
        let (signal_config, frames) = SignalReader::open(&dir.join("signals.csv"))?.read_all()?;
        let model_path = dir.join("model.json");
        let model = if model_path.exists() { Some(DecoderModel::load(&model_path)?) } else { None };
        let timing_path = dir.join("timing.json");
        let timing = if timing_path.exists() { Some(read_json(&timing_path)?) } else { None };
        Ok(Self {
            config,
            signal_config,
            status,
            frames,
            reference: read_csv(&dir.join("reference.csv"))?,
            events: read_jsonl(&dir.join("events.jsonl"))?,
            decoded: read_csv(&dir.join("decoded.csv"))?,
            cursor: read_csv(&dir.join("cursor.csv"))?,
            commands: read_jsonl(&dir.join("commands.jsonl"))?,
            model,
            timing,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RecordingError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| format_error(path, e))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RecordingError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_error(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RecordingError> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| format_error(path, e))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RecordingError> {
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| RecordingError::Format {
            path: path.display().to_string(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RecordingError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RecordingError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn format_error(path: &Path, e: impl std::fmt::Display) -> RecordingError {
    RecordingError::Format { path: path.display().to_string(), message: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{Axis, TestMode};

    #[test]
    fn event_wire_format() {
        let e = Event {
            t_s: 2.5,
            kind: EventKind::TrialStart { trial: 3, phase: ProtocolPhase::Test(TestMode::Horizontal1D), run: 0 },
        };
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(json, r#"{"t_s":2.5,"type":"trial_start","trial":3,"phase":"test_horizontal1D","run":0}"#);
        assert_eq!(serde_json::from_str::<Event>(&json).unwrap(), e);
    }

    #[test]
    fn unknown_event_type_is_rejected() {
        assert!(serde_json::from_str::<Event>(r#"{"t_s":0,"type":"teleport"}"#).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SignalConfig { n_channels: 2, ..Default::default() };
        let mut rec = SessionRecording::new(cfg);
        rec.frames = (0..5).map(|t| SampleFrame::new(t, vec![t as f64 * 0.1, -1.0 / 3.0])).collect();
        rec.reference.push(ReferenceRow { t: 0, x: 0.0, y: 0.0, u: 0.25, v: 0.0 });
        rec.push_event(0.0, EventKind::PhaseStart { phase: ProtocolPhase::Training(Axis::Horizontal) });
        rec.push_event(
            1.0,
            EventKind::TrialEnd { trial: 0, outcome: TrialEndOutcome::Completed, wrong_direction_time: None },
        );
        rec.decoded.push(DecodedRow { t_s: 0.0625, u: 0.1, v: f64::MIN_POSITIVE });
        rec.cursor.push(CursorRow { t_s: 0.0625, trial: 1, x: 0.5, y: 0.0, active: true });
        rec.status = RecordingStatus { complete: false, reason: Some("source exhausted".into()) };
        rec.save(dir.path()).unwrap();

        let back = SessionRecording::load(dir.path()).unwrap();
        assert_eq!(back.frames, rec.frames);
        assert_eq!(back.reference, rec.reference);
        assert_eq!(back.events, rec.events);
        assert_eq!(back.decoded, rec.decoded);
        assert_eq!(back.cursor, rec.cursor);
        assert_eq!(back.status, rec.status);
        assert!(back.model.is_none());
    }

    #[test]
    fn foreign_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(SessionRecording::load(dir.path()), Err(RecordingError::Format { .. })));
        fs::write(dir.path().join("format_version"), "9\n").unwrap();
        assert!(matches!(SessionRecording::load(dir.path()), Err(RecordingError::Version(_))));
    }
}
