//! Experiment protocol: phases, reference trajectories, cursor dynamics,
//! targets, trial timing and success statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("invalid task parameter: {0}")]
    Invalid(String),
    #[error("illegal phase transition {from} -> {to}")]
    Transition { from: String, to: String },
    #[error("cannot summarize an empty set of trials")]
    EmptySummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Horizontal,
    Vertical,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::Horizontal => 0,
            Axis::Vertical => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestMode {
    #[serde(rename = "horizontal1D")]
    Horizontal1D,
    #[serde(rename = "vertical1D")]
    Vertical1D,
    #[serde(rename = "full2D")]
    Full2D,
}

impl TestMode {
    pub const ALL: [TestMode; 3] = [TestMode::Horizontal1D, TestMode::Vertical1D, TestMode::Full2D];

    pub fn as_str(self) -> &'static str {
        match self {
            TestMode::Horizontal1D => "horizontal1D",
            TestMode::Vertical1D => "vertical1D",
            TestMode::Full2D => "full2D",
        }
    }

    pub fn directions(self) -> &'static [Direction] {
        match self {
            TestMode::Horizontal1D => &[Direction::Right, Direction::Left],
            TestMode::Vertical1D => &[Direction::Top, Direction::Bottom],
            TestMode::Full2D => &[Direction::Right, Direction::Left, Direction::Top, Direction::Bottom],
        }
    }

    /// The only axis the cursor may move along, if restricted.
    pub fn locked_axis(self) -> Option<Axis> {
        match self {
            TestMode::Horizontal1D => Some(Axis::Horizontal),
            TestMode::Vertical1D => Some(Axis::Vertical),
            TestMode::Full2D => None,
        }
    }
}

impl fmt::Display for TestMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestMode {
    type Err = TaskError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TestMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| TaskError::Invalid(format!("unknown test mode '{s}' (horizontal1D, vertical1D, full2D)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ProtocolPhase {
    Training(Axis),
    Calibration,
    Test(TestMode),
}

impl ProtocolPhase {
    pub fn name(&self) -> String {
        match self {
            ProtocolPhase::Training(Axis::Horizontal) => "training_horizontal".into(),
            ProtocolPhase::Training(Axis::Vertical) => "training_vertical".into(),
            ProtocolPhase::Calibration => "calibration".into(),
            ProtocolPhase::Test(m) => format!("test_{m}"),
        }
    }

    /// `None` is the session before its first phase.
    pub fn can_follow(self, previous: Option<ProtocolPhase>) -> bool {
        use ProtocolPhase::*;
        matches!(
            (previous, self),
            (None, Training(Axis::Horizontal))
                | (Some(Training(Axis::Horizontal)), Training(Axis::Vertical))
                | (Some(Training(Axis::Vertical)), Calibration)
                | (Some(Calibration), Test(_))
                | (Some(Test(_)), Test(_))
        )
    }
}

impl fmt::Display for ProtocolPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl From<ProtocolPhase> for String {
    fn from(p: ProtocolPhase) -> Self {
        p.name()
    }
}

impl TryFrom<String> for ProtocolPhase {
    type Error = TaskError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for ProtocolPhase {
    type Err = TaskError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "training_horizontal" => Ok(ProtocolPhase::Training(Axis::Horizontal)),
            "training_vertical" => Ok(ProtocolPhase::Training(Axis::Vertical)),
            "calibration" => Ok(ProtocolPhase::Calibration),
            other => other
                .strip_prefix("test_")
                .ok_or_else(|| TaskError::Invalid(format!("unknown phase '{s}'")))?
                .parse()
                .map(ProtocolPhase::Test),
        }
    }
}

/// Tracks the current phase and rejects out-of-order transitions.
#[derive(Debug, Clone, Default)]
pub struct ProtocolFsm {
    current: Option<ProtocolPhase>,
}

impl ProtocolFsm {
    pub fn current(&self) -> Option<ProtocolPhase> {
        self.current
    }

    pub fn enter(&mut self, next: ProtocolPhase) -> Result<(), TaskError> {
        if !next.can_follow(self.current) {
            return Err(TaskError::Transition {
                from: self.current.map(|p| p.name()).unwrap_or_else(|| "start".into()),
                to: next.name(),
            });
        }
        self.current = Some(next);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "RT")]
    Right,
    #[serde(rename = "LT")]
    Left,
    #[serde(rename = "TT")]
    Top,
    #[serde(rename = "BT")]
    Bottom,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Top, Direction::Bottom];

    pub fn code(self) -> &'static str {
        match self {
            Direction::Right => "RT",
            Direction::Left => "LT",
            Direction::Top => "TT",
            Direction::Bottom => "BT",
        }
    }

    pub fn axis(self) -> Axis {
        match self {
            Direction::Right | Direction::Left => Axis::Horizontal,
            Direction::Top | Direction::Bottom => Axis::Vertical,
        }
    }

    /// +1 for right/top, -1 for left/bottom.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Right | Direction::Top => 1.0,
            Direction::Left | Direction::Bottom => -1.0,
        }
    }

    pub fn unit(self) -> [f64; 2] {
        let mut v = [0.0; 2];
        v[self.axis().index()] = self.sign();
        v
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub direction: Direction,
    pub center: [f64; 2],
    pub radius: f64,
    pub shown_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CursorState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Hit,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub direction: Direction,
    pub outcome: TrialOutcome,
    pub time_to_target: Option<f64>,
    pub wrong_direction_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionStats {
    pub n_trials: usize,
    pub n_hits: usize,
    pub success_rate: f64,
    /// Sample standard deviation of per-run success rates; 0 with fewer than two runs.
    pub success_sd: f64,
    pub mean_time_to_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_runs: usize,
    pub overall: DirectionStats,
    pub per_direction: BTreeMap<Direction, DirectionStats>,
}

// ---------------------------------------------------------------------------
// Reference trajectories

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub bandwidth_hz: f64,
    /// Standard deviation of the stationary velocity process, screen units/s.
    pub speed_sd: f64,
    pub bound: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { bandwidth_hz: 0.5, speed_sd: 0.35, bound: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

/// Experimenter-driven cursor for the training phase.
///
/// Velocity is unit Gaussian noise through a one-pole low-pass at
/// `bandwidth_hz`, scaled by `speed_sd`. A step that would leave
/// `[-bound, bound]` flips the velocity process instead, so the position
/// always stays inside. Sample `i` holds the velocity applied from `i` to `i+1`.
pub fn training_reference(
    axis: Axis,
    duration_s: f64,
    update_hz: f64,
    seed: u64,
    cfg: &ReferenceConfig,
) -> Result<Vec<ReferencePoint>, TaskError> {
    if !(duration_s > 0.0 && update_hz > 0.0) {
        return Err(TaskError::Invalid(format!("duration {duration_s} s at {update_hz} Hz")));
    }
    if !(cfg.bandwidth_hz > 0.0 && cfg.speed_sd > 0.0 && cfg.bound > 0.0) {
        return Err(TaskError::Invalid(format!("reference parameters {cfg:?}")));
    }
    let dt = 1.0 / update_hz;
    let n = (duration_s * update_hz).round() as usize;
    let pole = (-2.0 * std::f64::consts::PI * cfg.bandwidth_hz * dt).exp();
    let drive = (1.0 - pole * pole).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state: f64 = StandardNormal.sample(&mut rng);
    let mut pos = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w: f64 = StandardNormal.sample(&mut rng);
        state = pole * state + drive * w;
        let mut vel = cfg.speed_sd * state;
        if (pos + vel * dt).abs() > cfg.bound {
            state = -state;
            vel = -vel;
        }
        // a reflected step can only overshoot if |vel·dt| exceeds the span
        let next = (pos + vel * dt).clamp(-cfg.bound, cfg.bound);
        vel = (next - pos) / dt;
        let mut point = ReferencePoint { position: [0.0; 2], velocity: [0.0; 2] };
        point.position[axis.index()] = pos;
        point.velocity[axis.index()] = vel;
        out.push(point);
        pos = next;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cursor, targets, trials

#[derive(Debug, Clone, PartialEq, Error)]
#[error("non-finite decoded velocity ({u}, {v}); cursor held")]
pub struct ControlFault {
    pub u: f64,
    pub v: f64,
}

/// Euler step of the cursor, clamped to the screen and masked to the mode's axis.
pub fn step_cursor(
    state: &CursorState,
    decoded: [f64; 2],
    dt: f64,
    gain: f64,
    mode: TestMode,
) -> Result<CursorState, ControlFault> {
    if !decoded.iter().all(|d| d.is_finite()) {
        return Err(ControlFault { u: decoded[0], v: decoded[1] });
    }
    let mut velocity = decoded;
    if let Some(axis) = mode.locked_axis() {
        velocity[1 - axis.index()] = 0.0;
    }
    let mut position = state.position;
    for i in 0..2 {
        position[i] = (position[i] + gain * velocity[i] * dt).clamp(-1.0, 1.0);
    }
    if let Some(axis) = mode.locked_axis() {
        position[1 - axis.index()] = 0.0;
    }
    Ok(CursorState { position, velocity })
}

/// Target geometry shared by every trial of a block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetGeometry {
    pub distance: f64,
    pub radius: f64,
}

impl Default for TargetGeometry {
    fn default() -> Self {
        Self { distance: 0.85, radius: 0.15 }
    }
}

pub fn spawn_target<R: Rng + ?Sized>(mode: TestMode, geometry: TargetGeometry, shown_at: f64, rng: &mut R) -> Target {
    let choices = mode.directions();
    let direction = choices[rng.random_range(0..choices.len())];
    let u = direction.unit();
    Target {
        direction,
        center: [u[0] * geometry.distance, u[1] * geometry.distance],
        radius: geometry.radius,
        shown_at,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrialStatus {
    Ongoing,
    Hit { time_to_target: f64 },
    Timeout,
}

/// A hit on the same tick as the deadline still counts as a hit.
pub fn check_trial(state: &CursorState, target: &Target, elapsed: f64, timeout: f64) -> TrialStatus {
    let dx = state.position[0] - target.center[0];
    let dy = state.position[1] - target.center[1];
    if dx.hypot(dy) <= target.radius {
        TrialStatus::Hit { time_to_target: elapsed }
    } else if elapsed >= timeout {
        TrialStatus::Timeout
    } else {
        TrialStatus::Ongoing
    }
}

pub fn summarize(runs: &[Vec<TrialResult>]) -> Result<RunSummary, TaskError> {
    let all: Vec<&TrialResult> = runs.iter().flatten().collect();
    if all.is_empty() {
        return Err(TaskError::EmptySummary);
    }
    let stats = |filter: &dyn Fn(&TrialResult) -> bool| -> DirectionStats {
        let picked: Vec<&&TrialResult> = all.iter().filter(|r| filter(r)).collect();
        let n_trials = picked.len();
        let times: Vec<f64> = picked.iter().filter_map(|r| r.time_to_target).collect();
        let n_hits = picked.iter().filter(|r| r.outcome == TrialOutcome::Hit).count();
        let run_rates: Vec<f64> = runs
            .iter()
            .filter_map(|run| {
                let n = run.iter().filter(|r| filter(r)).count();
                let h = run.iter().filter(|r| filter(r) && r.outcome == TrialOutcome::Hit).count();
                (n > 0).then(|| h as f64 / n as f64)
            })
            .collect();
        DirectionStats {
            n_trials,
            n_hits,
            success_rate: if n_trials > 0 { n_hits as f64 / n_trials as f64 } else { 0.0 },
            success_sd: sample_sd(&run_rates),
            mean_time_to_target: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
        }
    };
    let mut per_direction = BTreeMap::new();
    for d in Direction::ALL {
        if all.iter().any(|r| r.direction == d) {
            per_direction.insert(d, stats(&|r: &TrialResult| r.direction == d));
        }
    }
    Ok(RunSummary {
        n_runs: runs.iter().filter(|r| !r.is_empty()).count(),
        overall: stats(&|_| true),
        per_direction,
    })
}

fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Test block state machine

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestBlockConfig {
    pub mode: TestMode,
    pub trials: usize,
    pub run_length: usize,
    pub timeout_s: f64,
    pub geometry: TargetGeometry,
    pub gain: f64,
    pub iti_s: f64,
    pub update_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskEvent {
    TrialStart { trial: u32, run: usize },
    TargetShown { trial: u32, target: Target },
    Hit { trial: u32, direction: Direction, time_to_target: f64 },
    Timeout { trial: u32, direction: Direction, elapsed: f64 },
    /// `position` is where the cursor was when the trial ended.
    TrialEnd { trial: u32, result: TrialResult, position: [f64; 2] },
    Fault { trial: u32, fault: ControlFault },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stage {
    Idle,
    Rest { remaining: u64 },
    Active { target: Target, shown_tick: u64, wrong_ticks: u64 },
    Done,
}

/// One block of target-acquisition trials, advanced once per engine tick.
///
/// Each trial is a rest period with the cursor centred, then a target that
/// stays up until hit or timeout.
#[derive(Debug, Clone)]
pub struct TestBlock {
    cfg: TestBlockConfig,
    rng: ChaCha8Rng,
    cursor: CursorState,
    stage: Stage,
    tick: u64,
    trial_in_block: usize,
    next_trial_id: u32,
    runs: Vec<Vec<TrialResult>>,
}

impl TestBlock {
    pub fn new(cfg: TestBlockConfig, first_trial_id: u32, seed: u64) -> Result<Self, TaskError> {
        if !(cfg.timeout_s > 0.0 && cfg.gain > 0.0 && cfg.iti_s >= 0.0 && cfg.update_hz > 0.0 && cfg.run_length > 0) {
            return Err(TaskError::Invalid(format!("test block parameters {cfg:?}")));
        }
        if !(cfg.geometry.radius > 0.0 && cfg.geometry.radius < 0.5 && cfg.geometry.distance.abs() <= 1.0) {
            return Err(TaskError::Invalid(format!("target geometry {:?}", cfg.geometry)));
        }
        Ok(Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: CursorState::default(),
            stage: if cfg.trials == 0 { Stage::Done } else { Stage::Idle },
            tick: 0,
            trial_in_block: 0,
            next_trial_id: first_trial_id,
            runs: Vec::new(),
        })
    }

    pub fn config(&self) -> &TestBlockConfig {
        &self.cfg
    }

    pub fn cursor(&self) -> &CursorState {
        &self.cursor
    }

    pub fn target(&self) -> Option<&Target> {
        match &self.stage {
            Stage::Active { target, .. } => Some(target),
            _ => None,
        }
    }

    /// Seconds since the current target appeared.
    pub fn target_elapsed(&self) -> Option<f64> {
        match self.stage {
            // the next tick starts when the showing tick ends
            Stage::Active { shown_tick, .. } => Some((self.tick - shown_tick - 1) as f64 / self.cfg.update_hz),
            _ => None,
        }
    }

    pub fn current_trial(&self) -> Option<u32> {
        matches!(self.stage, Stage::Rest { .. } | Stage::Active { .. }).then(|| self.next_trial_id - 1)
    }

    pub fn current_run(&self) -> usize {
        self.trial_in_block.saturating_sub(1) / self.cfg.run_length
    }

    pub fn is_done(&self) -> bool {
        self.stage == Stage::Done
    }

    pub fn next_trial_id(&self) -> u32 {
        self.next_trial_id
    }

    pub fn runs(&self) -> &[Vec<TrialResult>] {
        &self.runs
    }

    /// Abandons the block; an unfinished trial produces no result.
    pub fn finish(&mut self) {
        self.stage = Stage::Done;
    }

    /// Advances one tick. `now_s` is the session time of this tick and
    /// `decoded` the velocity decoded from the signal up to it.
    pub fn advance(&mut self, now_s: f64, decoded: [f64; 2]) -> Vec<TaskEvent> {
        let mut events = Vec::new();
        let rest_ticks = (self.cfg.iti_s * self.cfg.update_hz).round() as u64;
        match self.stage {
            Stage::Done => return events,
            Stage::Idle => self.begin_trial(rest_ticks, &mut events),
            Stage::Rest { remaining: 0 } => {
                let target = spawn_target(self.cfg.mode, self.cfg.geometry, now_s, &mut self.rng);
                events.push(TaskEvent::TargetShown { trial: self.next_trial_id - 1, target });
                self.stage = Stage::Active { target, shown_tick: self.tick, wrong_ticks: 0 };
            }
            Stage::Rest { remaining } => self.stage = Stage::Rest { remaining: remaining - 1 },
            Stage::Active { target, shown_tick, mut wrong_ticks } => {
                let trial = self.next_trial_id - 1;
                let elapsed = (self.tick - shown_tick) as f64 / self.cfg.update_hz;
                match step_cursor(&self.cursor, decoded, 1.0 / self.cfg.update_hz, self.cfg.gain, self.cfg.mode) {
                    Ok(next) => {
                        let along = decoded[target.direction.axis().index()] * target.direction.sign();
                        if along < 0.0 {
                            wrong_ticks += 1;
                        }
                        self.cursor = next;
                    }
                    Err(fault) => events.push(TaskEvent::Fault { trial, fault }),
                }
                let wrong_direction_time = wrong_ticks as f64 / self.cfg.update_hz;
                let status = check_trial(&self.cursor, &target, elapsed, self.cfg.timeout_s);
                let result = match status {
                    TrialStatus::Ongoing => None,
                    TrialStatus::Hit { time_to_target } => {
                        events.push(TaskEvent::Hit { trial, direction: target.direction, time_to_target });
                        Some(TrialResult {
                            direction: target.direction,
                            outcome: TrialOutcome::Hit,
                            time_to_target: Some(time_to_target),
                            wrong_direction_time,
                        })
                    }
                    TrialStatus::Timeout => {
                        events.push(TaskEvent::Timeout { trial, direction: target.direction, elapsed });
                        Some(TrialResult {
                            direction: target.direction,
                            outcome: TrialOutcome::Timeout,
                            time_to_target: None,
                            wrong_direction_time,
                        })
                    }
                };
                match result {
                    Some(result) => {
                        events.push(TaskEvent::TrialEnd { trial, result, position: self.cursor.position });
                        let run = self.current_run();
                        if self.runs.len() <= run {
                            self.runs.resize(run + 1, Vec::new());
                        }
                        self.runs[run].push(result);
                        self.cursor = CursorState::default();
                        self.stage = if self.trial_in_block >= self.cfg.trials { Stage::Done } else { Stage::Idle };
                    }
                    None => self.stage = Stage::Active { target, shown_tick, wrong_ticks },
                }
            }
        }
        self.tick += 1;
        events
    }

    fn begin_trial(&mut self, rest_ticks: u64, events: &mut Vec<TaskEvent>) {
        let trial = self.next_trial_id;
        self.next_trial_id += 1;
        self.trial_in_block += 1;
        self.cursor = CursorState::default();
        events.push(TaskEvent::TrialStart { trial, run: self.current_run() });
        self.stage = Stage::Rest { remaining: rest_ticks.saturating_sub(1) };
    }
}
