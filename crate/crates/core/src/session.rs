//! The closed loop: source → filter → lag window → decoder → task → robot,
//! with everything recorded.
//!
//! Each engine tick consumes `sample_rate / update_hz` frames. Tick `k`
//! covers samples `[k*B, (k+1)*B)` and its outputs are stamped at the end of
//! that span, `(k+1)/update_hz` seconds.

use std::sync::mpsc::Receiver;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{self, DecoderError, DecoderModel, FitReport};
use crate::recording::{
    CommandRow, CursorRow, DecodedRow, EventKind, RecordingStatus, ReferenceRow, SessionRecording, TimingStats,
    TrialEndOutcome,
};
use crate::robot::{self, CommandSender, Gesture, GestureCommand, Rgb, SequenceStamp, BLACK};
use crate::signal::{BandFilter, LagWindow, SampleFrame, SignalConfig, SignalError};
use crate::subject::{
    IntentMailbox, IntentModel, IntentPolicy, SignalSource, SourceError, SubjectConfig, SurrogateSource,
    SyntheticSource, SyntheticSubject, WorldView,
};
use crate::task::{
    self, Axis, Direction, ProtocolFsm, ProtocolPhase, ReferenceConfig, RunSummary, TargetGeometry, TaskError,
    TaskEvent, TestBlock, TestBlockConfig, TestMode,
};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid session configuration: {0}")]
    Config(String),
    #[error("signal source exhausted at sample {at_sample} during {phase}")]
    SourceExhausted { at_sample: u64, phase: String },
    #[error("calibration failed: {0}")]
    Calibration(#[source] DecoderError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("robot link: {0}")]
    Robot(#[from] std::io::Error),
}

impl SessionError {
    /// Whether the error stems from configuration rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(self, SessionError::Config(_) | SessionError::Task(TaskError::Invalid(_)))
            || matches!(self, SessionError::Source(SourceError::Config(_)))
            || matches!(self, SessionError::Signal(SignalError::Config(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Realtime,
    #[default]
    MaxSpeed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    #[default]
    Synthetic,
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestBlockSpec {
    pub mode: TestMode,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub training_trials_per_axis: usize,
    pub training_duration_s: f64,
    pub reference: ReferenceConfig,
    pub update_hz: f64,
    pub iti_s: f64,
    pub timeout_s: f64,
    pub target_radius: f64,
    pub target_distance: f64,
    pub gain: f64,
    pub dead_zone: f64,
    pub run_length: usize,
    pub ridge_lambda: f64,
    pub test_blocks: Vec<TestBlockSpec>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            training_trials_per_axis: 5,
            training_duration_s: 60.0,
            reference: ReferenceConfig::default(),
            update_hz: 16.0,
            iti_s: 2.0,
            timeout_s: 15.0,
            target_radius: 0.15,
            target_distance: 0.85,
            gain: 1.0,
            dead_zone: 0.02,
            run_length: 6,
            ridge_lambda: 0.0,
            test_blocks: vec![
                TestBlockSpec { mode: TestMode::Horizontal1D, trials: 24 },
                TestBlockSpec { mode: TestMode::Vertical1D, trials: 30 },
                TestBlockSpec { mode: TestMode::Full2D, trials: 12 },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub subject: u64,
    pub policy: u64,
    pub reference: u64,
    pub targets: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_master(0)
    }
}

impl Seeds {
    /// Independent stream seeds derived from one number.
    pub fn from_master(seed: u64) -> Self {
        let mix = |k: u64| {
            // splitmix64 finalizer
            let mut z = seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        Self { subject: mix(1), policy: mix(2), reference: mix(3), targets: mix(4) }
    }
}

/// A complete, reproducible experiment description (the scenario file).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub signal_config: SignalConfig,
    pub subject: SubjectConfig,
    pub policy: IntentPolicy,
    pub protocol: ProtocolConfig,
    pub seeds: Seeds,
    pub clock: ClockMode,
    pub source: SourceKind,
    /// UDP address of the robot actuator; no datagrams are sent when absent.
    pub robot: Option<String>,
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        self.signal_config.validate()?;
        self.subject.validate(self.signal_config.n_channels)?;
        self.policy.validate()?;
        let p = &self.protocol;
        let block = self.signal_config.sample_rate_hz / p.update_hz;
        if !(p.update_hz > 0.0 && block >= 1.0 && block.fract() == 0.0) {
            return Err(SessionError::Config(format!(
                "update rate {} Hz must divide the sample rate {} Hz",
                p.update_hz, self.signal_config.sample_rate_hz
            )));
        }
        if !(p.training_duration_s > 0.0 && p.iti_s >= 0.0 && p.timeout_s > 0.0 && p.gain > 0.0) {
            return Err(SessionError::Config("durations and gain must be positive".into()));
        }
        if !(p.dead_zone >= 0.0 && p.ridge_lambda >= 0.0 && p.run_length > 0) {
            return Err(SessionError::Config("dead_zone, ridge_lambda and run_length out of range".into()));
        }
        if !(p.target_radius > 0.0 && p.target_radius < 0.5 && p.target_distance > 0.0 && p.target_distance <= 1.0) {
            return Err(SessionError::Config(format!(
                "target radius {} must be in (0, 0.5) and distance {} in (0, 1]",
                p.target_radius, p.target_distance
            )));
        }
        if self.clock == ClockMode::MaxSpeed && self.source == SourceKind::Surrogate {
            return Err(SessionError::Config("a human-driven surrogate source requires the realtime clock".into()));
        }
        Ok(())
    }

    pub fn samples_per_tick(&self) -> usize {
        (self.signal_config.sample_rate_hz / self.protocol.update_hz).round() as usize
    }

    /// Keeps only the test blocks of one mode.
    pub fn restrict_to_mode(&mut self, mode: TestMode) {
        self.protocol.test_blocks.retain(|b| b.mode == mode);
        if self.protocol.test_blocks.is_empty() {
            let trials = if mode == TestMode::Full2D { 12 } else { 24 };
            self.protocol.test_blocks.push(TestBlockSpec { mode, trials });
        }
    }

    /// Builds the signal source the configuration names.
    pub fn build_source(&self, mailbox: Option<IntentMailbox>) -> Result<Box<dyn SignalSource>, SessionError> {
        let subject = SyntheticSubject::new(&self.subject, &self.signal_config, self.seeds.subject)?;
        Ok(match self.source {
            SourceKind::Synthetic => Box::new(SyntheticSource::new(subject, self.signal_config)),
            SourceKind::Surrogate => {
                Box::new(SurrogateSource::new(subject, self.signal_config, mailbox.unwrap_or_default()))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Start,
    Abort,
    NextMode,
}

// ---------------------------------------------------------------------------
// Outbound messages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetView {
    pub direction: Direction,
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotView {
    pub gesture: Gesture,
    pub eye_rgb: Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialView {
    pub id: u32,
    pub run: usize,
    pub elapsed_s: f64,
    pub hits: usize,
    pub completed: usize,
    pub active: bool,
}

/// Per-tick snapshot streamed to observers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    #[serde(rename = "type")]
    pub kind: String,
    pub t_s: f64,
    pub phase: ProtocolPhase,
    pub cursor: [f64; 2],
    pub target: Option<TargetView>,
    pub decoded: [f64; 2],
    pub robot: RobotView,
    pub trial: Option<TrialView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub mode: TestMode,
    pub trials_planned: usize,
    pub summary: Option<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub complete: bool,
    pub reason: Option<String>,
    pub fit_report: Option<FitReport>,
    pub blocks: Vec<BlockSummary>,
}

/// Completion message sent to observers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMessage {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(flatten)]
    pub summary: SessionSummary,
}

impl SummaryMessage {
    pub fn new(summary: SessionSummary) -> Self {
        Self { kind: "summary".into(), summary }
    }
}

#[derive(Debug)]
pub struct SessionResult {
    pub recording: SessionRecording,
    pub summary: SessionSummary,
}

/// A session that stopped on an error; the recording is flagged partial.
#[derive(Debug)]
pub struct SessionFailure {
    pub error: SessionError,
    pub recording: Option<Box<SessionRecording>>,
}

impl std::fmt::Display for SessionFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for SessionFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<SessionError> for SessionFailure {
    fn from(error: SessionError) -> Self {
        Self { error, recording: None }
    }
}

/// Optional collaborators for [`run_session`].
#[derive(Default)]
pub struct SessionIo<'a> {
    /// Replaces the configured source (e.g. a replay).
    pub source: Option<Box<dyn SignalSource>>,
    /// Skips fitting and decodes with this model.
    pub model: Option<DecoderModel>,
    pub control: Option<Receiver<ControlAction>>,
    pub observer: Option<&'a mut dyn FnMut(&StateMessage)>,
    pub mailbox: Option<IntentMailbox>,
    /// Session time zero for realtime pacing and intent stamps.
    pub origin: Option<Instant>,
}

pub fn run_session(cfg: &SessionConfig, io: SessionIo<'_>) -> Result<SessionResult, SessionFailure> {
    cfg.validate()?;
    let mut loop_ = Loop::new(cfg, io)?;
    let outcome = loop_.run();
    loop_.finish(outcome)
}

enum Stop {
    Aborted,
}

struct Loop<'c, 'a> {
    cfg: &'c SessionConfig,
    source: Box<dyn SignalSource>,
    intent: IntentModel,
    filter: Option<BandFilter>,
    window: LagWindow,
    features: Vec<f64>,
    model: Option<DecoderModel>,
    model_fixed: bool,
    recording: SessionRecording,
    fsm: ProtocolFsm,
    sender: Option<CommandSender>,
    stamp: SequenceStamp,
    robot: RobotView,
    control: Option<Receiver<ControlAction>>,
    observer: Option<&'a mut dyn FnMut(&StateMessage)>,
    origin: Instant,
    latencies: Vec<Duration>,
    sample: u64,
    tick: u64,
    block_size: usize,
    next_trial: u32,
    blocks: Vec<BlockSummary>,
}

impl<'c, 'a> Loop<'c, 'a> {
    fn new(cfg: &'c SessionConfig, io: SessionIo<'a>) -> Result<Self, SessionError> {
        let source = match io.source {
            Some(s) => s,
            None => cfg.build_source(io.mailbox)?,
        };
        let sig = cfg.signal_config;
        if source.signal_config().n_channels != sig.n_channels {
            return Err(SessionError::Config("source channel count differs from the session".into()));
        }
        if let Some(m) = &io.model {
            m.check_config(&sig)?;
        }
        let sender = match &cfg.robot {
            Some(addr) => Some(CommandSender::connect(addr)?),
            None => None,
        };
        let mut recording = SessionRecording::new(sig);
        recording.config = Some(cfg.clone());
        Ok(Self {
            cfg,
            source,
            intent: IntentModel::new(cfg.policy, cfg.protocol.update_hz, cfg.seeds.policy)?,
            filter: sig.front_end_filter.then(|| BandFilter::new(&sig)).transpose()?,
            window: LagWindow::new(&sig),
            features: vec![0.0; sig.feature_len()],
            model_fixed: io.model.is_some(),
            model: io.model,
            recording,
            fsm: ProtocolFsm::default(),
            sender,
            stamp: SequenceStamp::default(),
            robot: RobotView { gesture: Gesture::Idle, eye_rgb: BLACK },
            control: io.control,
            observer: io.observer,
            origin: io.origin.unwrap_or_else(Instant::now),
            latencies: Vec::new(),
            sample: 0,
            tick: 0,
            block_size: cfg.samples_per_tick(),
            next_trial: 0,
            blocks: Vec::new(),
        })
    }

    fn tick_s(&self) -> f64 {
        1.0 / self.cfg.protocol.update_hz
    }

    fn sample_time(&self, sample: u64) -> f64 {
        sample as f64 / self.cfg.signal_config.sample_rate_hz
    }

    fn enter(&mut self, phase: ProtocolPhase) -> Result<(), SessionError> {
        self.fsm.enter(phase)?;
        let t = self.sample_time(self.sample);
        self.recording.push_event(t, EventKind::PhaseStart { phase });
        Ok(())
    }

    fn run(&mut self) -> Result<Option<Stop>, SessionError> {
        for axis in [Axis::Horizontal, Axis::Vertical] {
            self.enter(ProtocolPhase::Training(axis))?;
            for i in 0..self.cfg.protocol.training_trials_per_axis {
                if let Some(stop) = self.training_trial(axis, i)? {
                    return Ok(Some(stop));
                }
            }
        }
        self.enter(ProtocolPhase::Calibration)?;
        self.calibrate()?;
        for (index, spec) in self.cfg.protocol.test_blocks.clone().into_iter().enumerate() {
            self.enter(ProtocolPhase::Test(spec.mode))?;
            if let Some(stop) = self.test_block(index, spec)? {
                return Ok(Some(stop));
            }
        }
        Ok(None)
    }

    fn finish(mut self, outcome: Result<Option<Stop>, SessionError>) -> Result<SessionResult, SessionFailure> {
        if self.cfg.clock == ClockMode::Realtime && !self.latencies.is_empty() {
            self.recording.timing = Some(timing_stats(&mut self.latencies));
        }
        self.recording.model = self.model.clone();
        match outcome {
            Ok(stop) => {
                self.recording.status = match stop {
                    None => RecordingStatus { complete: true, reason: None },
                    Some(Stop::Aborted) => RecordingStatus { complete: false, reason: Some("aborted by operator".into()) },
                };
                let summary = SessionSummary {
                    complete: self.recording.status.complete,
                    reason: self.recording.status.reason.clone(),
                    fit_report: self.model.as_ref().map(|m| m.fit_report.clone()),
                    blocks: self.blocks,
                };
                Ok(SessionResult { recording: self.recording, summary })
            }
            Err(error) => {
                let t = self.sample_time(self.sample);
                self.recording.push_event(t, EventKind::Fault { trial: None, message: error.to_string() });
                self.recording.status = RecordingStatus { complete: false, reason: Some(error.to_string()) };
                Err(SessionFailure { error, recording: Some(Box::new(self.recording)) })
            }
        }
    }

    /// Pulls one tick of frames through the front end. `on_frame` sees each
    /// raw frame before it is recorded.
    fn acquire(&mut self, intent: [f64; 2], mut on_frame: impl FnMut(&SampleFrame)) -> Result<Instant, SessionError> {
        if self.cfg.clock == ClockMode::Realtime {
            let due = self.origin + Duration::from_secs_f64((self.tick + 1) as f64 * self.tick_s());
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        for _ in 0..self.block_size {
            let now_s = self.sample_time(self.sample);
            let phase = self.fsm.current().map(|p| p.name()).unwrap_or_default();
            let frame = self
                .source
                .next_frame(intent, now_s)?
                .ok_or(SessionError::SourceExhausted { at_sample: self.sample, phase })?;
            if frame.t != self.sample {
                return Err(SessionError::Signal(SignalError::Sequencing { newest: self.sample.wrapping_sub(1), got: frame.t }));
            }
            frame.check(self.cfg.signal_config.n_channels)?;
            let conditioned = match &mut self.filter {
                Some(f) => f.step(&frame)?,
                None => frame.clone(),
            };
            self.window.push(conditioned)?;
            on_frame(&frame);
            self.recording.frames.push(frame);
            self.sample += 1;
        }
        Ok(Instant::now())
    }

    fn decode(&mut self) -> Result<[f64; 2], SessionError> {
        let model = self.model.as_ref().ok_or_else(|| SessionError::Config("no decoder model".into()))?;
        if !self.window.is_warm() {
            return Ok([0.0; 2]);
        }
        self.window.write_features(&self.cfg.signal_config, &mut self.features)?;
        let (u, v) = model.predict(&self.features)?;
        Ok([u, v])
    }

    fn poll_control(&mut self) -> Option<ControlAction> {
        let rx = self.control.as_ref()?;
        let mut chosen = None;
        while let Ok(action) = rx.try_recv() {
            match action {
                ControlAction::Abort => return Some(ControlAction::Abort),
                ControlAction::NextMode => chosen = Some(ControlAction::NextMode),
                ControlAction::Start => {}
            }
        }
        chosen
    }

    fn emit(&mut self, msg: StateMessage) {
        if let Some(obs) = self.observer.as_mut() {
            obs(&msg);
        }
    }

    fn rest(&mut self, ticks: u64, phase: ProtocolPhase) -> Result<Option<Stop>, SessionError> {
        for _ in 0..ticks {
            if self.poll_control() == Some(ControlAction::Abort) {
                return Ok(Some(Stop::Aborted));
            }
            let world = WorldView { phase, reference_velocity: [0.0; 2], cursor: [0.0; 2], target: None, target_elapsed: 0.0 };
            let intent = self.intent.intent(&world);
            self.acquire(intent, |_| {})?;
            self.tick += 1;
            let msg = self.state_message(phase, [0.0; 2], None, [0.0; 2], None);
            self.emit(msg);
        }
        Ok(None)
    }

    fn training_trial(&mut self, axis: Axis, index: usize) -> Result<Option<Stop>, SessionError> {
        let p = &self.cfg.protocol;
        let phase = ProtocolPhase::Training(axis);
        let rest_ticks = (p.iti_s * p.update_hz).round() as u64;
        if let Some(stop) = self.rest(rest_ticks, phase)? {
            return Ok(Some(stop));
        }
        let seed = self.cfg.seeds.reference ^ ((axis.index() as u64) << 32 | index as u64);
        let reference = task::training_reference(axis, p.training_duration_s, p.update_hz, seed, &p.reference)?;
        let trial = self.next_trial;
        self.next_trial += 1;
        let start = self.sample_time(self.sample);
        self.recording.push_event(start, EventKind::TrialStart { trial, phase, run: index });
        let fs = self.cfg.signal_config.sample_rate_hz;
        for (j, point) in reference.iter().enumerate() {
            if self.poll_control() == Some(ControlAction::Abort) {
                return Ok(Some(Stop::Aborted));
            }
            let world = WorldView {
                phase,
                reference_velocity: point.velocity,
                cursor: point.position,
                target: None,
                target_elapsed: 0.0,
            };
            let intent = self.intent.intent(&world);
            let first = self.sample;
            let mut rows = Vec::with_capacity(self.block_size);
            self.acquire(intent, |f| {
                let dt = (f.t - first) as f64 / fs;
                rows.push(ReferenceRow {
                    t: f.t,
                    x: point.position[0] + point.velocity[0] * dt,
                    y: point.position[1] + point.velocity[1] * dt,
                    u: point.velocity[0],
                    v: point.velocity[1],
                });
            })?;
            self.recording.reference.extend(rows);
            self.tick += 1;
            let trial_view = TrialView {
                id: trial,
                run: index,
                elapsed_s: (j + 1) as f64 / p.update_hz,
                hits: 0,
                completed: index,
                active: false,
            };
            let cursor = reference.get(j + 1).map(|q| q.position).unwrap_or(point.position);
            let msg = self.state_message(phase, cursor, None, [0.0; 2], Some(trial_view));
            self.emit(msg);
        }
        let end = self.sample_time(self.sample);
        self.recording.push_event(
            end,
            EventKind::TrialEnd { trial, outcome: TrialEndOutcome::Completed, wrong_direction_time: None },
        );
        Ok(None)
    }

    fn calibrate(&mut self) -> Result<(), SessionError> {
        if self.model_fixed {
            return Ok(());
        }
        let sig = self.cfg.signal_config;
        let fitted = decoder::assemble_training_set(&self.recording, &sig)
            .and_then(|ts| decoder::fit(&ts, self.cfg.protocol.ridge_lambda, &sig))
            .map_err(SessionError::Calibration)?;
        log::info!(
            "decoder fitted on {} rows: r = ({:?}, {:?})",
            fitted.fit_report.n_rows,
            fitted.fit_report.pearson_r_x,
            fitted.fit_report.pearson_r_y
        );
        self.model = Some(fitted);
        Ok(())
    }

    fn test_block(&mut self, index: usize, spec: TestBlockSpec) -> Result<Option<Stop>, SessionError> {
        let p = &self.cfg.protocol;
        let phase = ProtocolPhase::Test(spec.mode);
        let block_cfg = TestBlockConfig {
            mode: spec.mode,
            trials: spec.trials,
            run_length: p.run_length,
            timeout_s: p.timeout_s,
            geometry: TargetGeometry { distance: p.target_distance, radius: p.target_radius },
            gain: p.gain,
            iti_s: p.iti_s,
            update_hz: p.update_hz,
        };
        let dead_zone = p.dead_zone;
        let seed = self.cfg.seeds.targets ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut block = TestBlock::new(block_cfg, self.next_trial, seed)?;
        let mut stop = None;
        while !block.is_done() {
            match self.poll_control() {
                Some(ControlAction::Abort) => {
                    self.skip_open_trial(&block);
                    stop = Some(Stop::Aborted);
                    break;
                }
                Some(ControlAction::NextMode) => {
                    self.skip_open_trial(&block);
                    block.finish();
                    break;
                }
                _ => {}
            }
            let target = block.target().copied();
            let world = WorldView {
                phase,
                reference_velocity: [0.0; 2],
                cursor: block.cursor().position,
                target,
                target_elapsed: block.target_elapsed().unwrap_or(0.0),
            };
            let intent = self.intent.intent(&world);
            self.acquire(intent, |_| {})?;
            let frame_in = Instant::now();
            let decoded = self.decode()?;
            self.tick += 1;
            let now = self.tick as f64 * self.tick_s();
            let trial_id = block.current_trial();
            let run = block.current_run();
            let events = block.advance(now, decoded);
            self.recording.decoded.push(DecodedRow { t_s: now, u: decoded[0], v: decoded[1] });

            let mut active = false;
            let command = match target {
                Some(t) => {
                    active = decoded.iter().all(|d| d.is_finite()) && robot::activation_gate(decoded, &t, dead_zone);
                    let cursor = block.cursor().position;
                    // the block recentres the cursor once a trial ends
                    let pos = events
                        .iter()
                        .find_map(|e| match e {
                            TaskEvent::TrialEnd { position, .. } => Some(*position),
                            _ => None,
                        })
                        .unwrap_or(cursor);
                    self.recording.cursor.push(CursorRow {
                        t_s: now,
                        trial: trial_id.unwrap_or(0),
                        x: pos[0],
                        y: pos[1],
                        active,
                    });
                    robot::map_online(&t, active, self.robot.eye_rgb)
                }
                None => GestureCommand::new(Gesture::Idle, self.robot.eye_rgb),
            };
            self.send(now, command);
            self.latencies.push(frame_in.elapsed());

            for event in &events {
                self.record_task_event(now, phase, event);
            }
            let summary_so_far = block.runs().iter().flatten().fold((0, 0), |(h, n), r| {
                (h + (r.outcome == task::TrialOutcome::Hit) as usize, n + 1)
            });
            let trial_view = trial_id.map(|id| TrialView {
                id,
                run,
                elapsed_s: block.target_elapsed().unwrap_or(0.0),
                hits: summary_so_far.0,
                completed: summary_so_far.1,
                active,
            });
            let target_view = block.target().map(|t| TargetView { direction: t.direction, center: t.center, radius: t.radius });
            let msg = self.state_message(phase, block.cursor().position, target_view, decoded, trial_view);
            self.emit(msg);
        }
        self.next_trial = block.next_trial_id();
        let summary = task::summarize(block.runs()).ok();
        self.blocks.push(BlockSummary { mode: spec.mode, trials_planned: spec.trials, summary });
        Ok(stop)
    }

    fn skip_open_trial(&mut self, block: &TestBlock) {
        if let Some(trial) = block.current_trial() {
            let t = self.tick as f64 * self.tick_s();
            self.recording.push_event(t, EventKind::TrialEnd { trial, outcome: TrialEndOutcome::Skipped, wrong_direction_time: None });
        }
    }

    fn send(&mut self, now: f64, command: GestureCommand) {
        let stamped = match &mut self.sender {
            Some(sender) => {
                let (stamped, result) = sender.send(command);
                if let Err(e) = result {
                    log::warn!("robot datagram to {} failed: {e}", sender.target());
                }
                stamped
            }
            None => self.stamp.stamp(command),
        };
        self.robot = RobotView { gesture: stamped.gesture, eye_rgb: stamped.eye_rgb };
        self.recording.commands.push(CommandRow { t_s: now, command: stamped });
    }

    fn record_task_event(&mut self, now: f64, phase: ProtocolPhase, event: &TaskEvent) {
        let kind = match event {
            TaskEvent::TrialStart { trial, run } => EventKind::TrialStart { trial: *trial, phase, run: *run },
            TaskEvent::TargetShown { trial, target } => EventKind::TargetShown {
                trial: *trial,
                direction: target.direction,
                center: target.center,
                radius: target.radius,
            },
            TaskEvent::Hit { trial, direction, time_to_target } => {
                EventKind::Hit { trial: *trial, direction: *direction, time_to_target: *time_to_target }
            }
            TaskEvent::Timeout { trial, direction, elapsed } => {
                EventKind::Timeout { trial: *trial, direction: *direction, elapsed: *elapsed }
            }
            TaskEvent::TrialEnd { trial, result, .. } => EventKind::TrialEnd {
                trial: *trial,
                outcome: result.outcome.into(),
                wrong_direction_time: Some(result.wrong_direction_time),
            },
            TaskEvent::Fault { trial, fault } => EventKind::Fault { trial: Some(*trial), message: fault.to_string() },
        };
        self.recording.push_event(now, kind);
    }

    fn state_message(
        &self,
        phase: ProtocolPhase,
        cursor: [f64; 2],
        target: Option<TargetView>,
        decoded: [f64; 2],
        trial: Option<TrialView>,
    ) -> StateMessage {
        StateMessage {
            kind: "state".into(),
            t_s: self.tick as f64 * self.tick_s(),
            phase,
            cursor,
            target,
            decoded,
            robot: self.robot.clone(),
            trial,
        }
    }
}

fn timing_stats(latencies: &mut [Duration]) -> TimingStats {
    latencies.sort();
    let pick = |q: f64| {
        let idx = ((latencies.len() as f64 * q).ceil() as usize).clamp(1, latencies.len()) - 1;
        latencies[idx].as_secs_f64() * 1e3
    };
    TimingStats {
        ticks: latencies.len(),
        p50_ms: pick(0.5),
        p99_ms: pick(0.99),
        max_ms: latencies.last().map(|d| d.as_secs_f64() * 1e3).unwrap_or(0.0),
    }
}

/// Re-runs a recorded session from its own signals and model.
pub fn replay_recording(
    recording: &SessionRecording,
    model: Option<DecoderModel>,
) -> Result<SessionResult, SessionFailure> {
    let mut cfg = recording
        .config
        .clone()
        .ok_or_else(|| SessionError::Config("recording has no config.json".into()))?;
    cfg.clock = ClockMode::MaxSpeed;
    cfg.source = SourceKind::Synthetic;
    cfg.robot = None;
    let source = crate::subject::ReplaySource::from_frames(recording.signal_config, recording.frames.clone(), &cfg.signal_config)
        .map_err(SessionError::from)?;
    let io = SessionIo { source: Some(Box::new(source)), model: model.or_else(|| recording.model.clone()), ..Default::default() };
    run_session(&cfg, io)
}
