//! Signal sources standing in for the human subject.
//!
//! [`SyntheticSubject`] linearly encodes an intended velocity into channel
//! voltages; [`IntentModel`] decides what the subject intends given the task
//! state. [`ReplaySource`] streams a recorded file and [`SurrogateSource`]
//! encodes intent posted by an operator console.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{SampleFrame, SignalConfig, SignalError, SignalReader};
use crate::task::{ProtocolPhase, Target};

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("invalid subject: {0}")]
    Config(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjectConfig {
    /// Explicit `N x 2` loadings; generated from `mixing_seed` when absent.
    pub mixing: Option<Vec<[f64; 2]>>,
    pub mixing_seed: u64,
    /// White noise standard deviation per channel. Generated mixings have
    /// unit per-channel power, so this is relative to the signal.
    pub noise_sigma: f64,
    /// Pure delay between intent and its appearance in the signal, samples.
    pub intent_lag: usize,
    /// Vertical intent is encoded this many times weaker than horizontal,
    /// i.e. the same noise is this much larger relative to it.
    pub asymmetry: f64,
    /// Coloured background amplitude relative to the mixing power.
    pub background_level: f64,
    pub background_corner_hz: f64,
}

impl Default for SubjectConfig {
    fn default() -> Self {
        Self {
            mixing: None,
            mixing_seed: 1,
            noise_sigma: 0.05,
            intent_lag: 0,
            asymmetry: 1.5,
            background_level: 0.6,
            background_corner_hz: 8.0,
        }
    }
}

impl SubjectConfig {
    pub fn noiseless() -> Self {
        Self { noise_sigma: 0.0, background_level: 0.0, asymmetry: 1.0, ..Default::default() }
    }

    pub fn validate(&self, n_channels: usize) -> Result<(), SourceError> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SourceError::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.asymmetry > 0.0 && self.asymmetry.is_finite()) {
            return Err(SourceError::Config(format!("asymmetry must be positive, got {}", self.asymmetry)));
        }
        if !(self.background_level >= 0.0 && self.background_corner_hz > 0.0) {
            return Err(SourceError::Config("background parameters must be nonnegative".into()));
        }
        if let Some(m) = &self.mixing {
            if m.len() != n_channels {
                return Err(SourceError::Config(format!("mixing has {} rows, expected {n_channels}", m.len())));
            }
        }
        Ok(())
    }

    /// The loadings this configuration encodes with.
    pub fn resolve_mixing(&self, n_channels: usize) -> Vec<[f64; 2]> {
        if let Some(m) = &self.mixing {
            return m.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.mixing_seed);
        let mut m: Vec<[f64; 2]> = (0..n_channels)
            .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        for col in 0..2 {
            let power = m.iter().map(|r| r[col] * r[col]).sum::<f64>() / n_channels as f64;
            let scale = power.sqrt().recip();
            m.iter_mut().for_each(|r| r[col] *= scale);
        }
        m
    }
}

/// Mean per-channel power of one unit of intent on one axis.
pub fn mixing_power(mixing: &[[f64; 2]]) -> f64 {
    mixing.iter().map(|r| r[0] * r[0] + r[1] * r[1]).sum::<f64>() / (2 * mixing.len()) as f64
}

pub struct SyntheticSubject {
    n_channels: usize,
    mixing: Vec<[f64; 2]>,
    noise_sigma: f64,
    asymmetry: f64,
    bg_amplitude: f64,
    bg_pole: f64,
    bg_drive: f64,
    bg_state: Vec<f64>,
    pending: VecDeque<[f64; 2]>,
    intent_lag: usize,
    rng: ChaCha8Rng,
    t: u64,
}

impl SyntheticSubject {
    pub fn new(cfg: &SubjectConfig, signal: &SignalConfig, seed: u64) -> Result<Self, SourceError> {
        signal.validate()?;
        cfg.validate(signal.n_channels)?;
        let mixing = cfg.resolve_mixing(signal.n_channels);
        check_rank_two(&mixing)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bg_pole = (-2.0 * std::f64::consts::PI * cfg.background_corner_hz / signal.sample_rate_hz).exp();
        let bg_state = (0..signal.n_channels).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self {
            n_channels: signal.n_channels,
            noise_sigma: cfg.noise_sigma,
            asymmetry: cfg.asymmetry,
            bg_amplitude: cfg.background_level * mixing_power(&mixing).sqrt(),
            bg_pole,
            bg_drive: (1.0 - bg_pole * bg_pole).sqrt(),
            bg_state,
            pending: VecDeque::from(vec![[0.0; 2]; cfg.intent_lag]),
            intent_lag: cfg.intent_lag,
            mixing,
            rng,
            t: 0,
        })
    }

    pub fn mixing(&self) -> &[[f64; 2]] {
        &self.mixing
    }

    pub fn intent_lag(&self) -> usize {
        self.intent_lag
    }

    /// Voltages for the next sample given the current intent.
    pub fn gen_frame(&mut self, intent: [f64; 2]) -> SampleFrame {
        self.pending.push_back(intent);
        let [u, v] = self.pending.pop_front().unwrap_or(intent);
        let v = v / self.asymmetry;
        let mut voltages = Vec::with_capacity(self.n_channels);
        for ch in 0..self.n_channels {
            let [mu, mv] = self.mixing[ch];
            let mut x = mu * u + mv * v;
            if self.bg_amplitude > 0.0 {
                let w: f64 = StandardNormal.sample(&mut self.rng);
                self.bg_state[ch] = self.bg_pole * self.bg_state[ch] + self.bg_drive * w;
                x += self.bg_amplitude * self.bg_state[ch];
            }
            if self.noise_sigma > 0.0 {
                let w: f64 = StandardNormal.sample(&mut self.rng);
                x += self.noise_sigma * w;
            }
            voltages.push(x);
        }
        let frame = SampleFrame::new(self.t, voltages);
        self.t += 1;
        frame
    }
}

fn check_rank_two(m: &[[f64; 2]]) -> Result<(), SourceError> {
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for r in m {
        a += r[0] * r[0];
        b += r[0] * r[1];
        c += r[1] * r[1];
    }
    let det = a * c - b * b;
    if !(det.is_finite() && det > 1e-12 * (a + c).powi(2)) {
        return Err(SourceError::Config("mixing matrix must have rank 2".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Intent

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentMode {
    TrackReference,
    SeekTarget,
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntentPolicy {
    /// Intended speed while seeking a target, screen units/s.
    pub effort: f64,
    pub reaction_delay_s: f64,
    /// Chance that a decision interval is spent pushing the wrong way.
    pub wrong_direction_prob: f64,
    pub decision_interval_s: f64,
}

impl Default for IntentPolicy {
    fn default() -> Self {
        Self { effort: 0.4, reaction_delay_s: 0.3, wrong_direction_prob: 0.1, decision_interval_s: 0.5 }
    }
}

impl IntentPolicy {
    pub fn validate(&self) -> Result<(), SourceError> {
        if !(self.effort > 0.0 && self.effort.is_finite()) {
            return Err(SourceError::Config(format!("effort must be positive, got {}", self.effort)));
        }
        if !(self.reaction_delay_s >= 0.0 && self.decision_interval_s > 0.0) {
            return Err(SourceError::Config("reaction delay and decision interval must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.wrong_direction_prob) {
            return Err(SourceError::Config(format!(
                "wrong_direction_prob must be in [0, 1), got {}",
                self.wrong_direction_prob
            )));
        }
        Ok(())
    }
}

/// What the subject can see at one engine tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldView {
    pub phase: ProtocolPhase,
    pub reference_velocity: [f64; 2],
    pub cursor: [f64; 2],
    pub target: Option<Target>,
    /// Seconds since the target appeared.
    pub target_elapsed: f64,
}

pub fn mode_for(phase: ProtocolPhase, has_target: bool) -> IntentMode {
    match phase {
        ProtocolPhase::Training(_) => IntentMode::TrackReference,
        ProtocolPhase::Test(_) if has_target => IntentMode::SeekTarget,
        _ => IntentMode::Idle,
    }
}

/// Stateful intent generator evaluated once per engine tick.
pub struct IntentModel {
    policy: IntentPolicy,
    tick_s: f64,
    rng: ChaCha8Rng,
    reference_delay: VecDeque<[f64; 2]>,
    delay_ticks: usize,
    current_target: Option<(f64, [f64; 2])>,
    interval_index: i64,
    flipped: bool,
}

impl IntentModel {
    pub fn new(policy: IntentPolicy, update_hz: f64, seed: u64) -> Result<Self, SourceError> {
        policy.validate()?;
        let delay_ticks = (policy.reaction_delay_s * update_hz).round() as usize;
        Ok(Self {
            policy,
            tick_s: 1.0 / update_hz,
            rng: ChaCha8Rng::seed_from_u64(seed),
            reference_delay: VecDeque::from(vec![[0.0; 2]; delay_ticks]),
            delay_ticks,
            current_target: None,
            interval_index: -1,
            flipped: false,
        })
    }

    pub fn policy(&self) -> &IntentPolicy {
        &self.policy
    }

    /// Draws whether the coming decision interval is spent going the wrong way.
    pub fn decide_flip(&mut self) -> bool {
        self.policy.wrong_direction_prob > 0.0 && self.rng.random_bool(self.policy.wrong_direction_prob)
    }

    pub fn intent(&mut self, world: &WorldView) -> [f64; 2] {
        let mode = mode_for(world.phase, world.target.is_some());
        if mode != IntentMode::TrackReference && self.delay_ticks > 0 {
            self.reference_delay.iter_mut().for_each(|r| *r = [0.0; 2]);
        }
        match mode {
            IntentMode::TrackReference => {
                self.reference_delay.push_back(world.reference_velocity);
                self.reference_delay.pop_front().unwrap_or([0.0; 2])
            }
            IntentMode::Idle => {
                self.current_target = None;
                [0.0; 2]
            }
            IntentMode::SeekTarget => {
                let target = world.target.expect("seek mode implies a target");
                if self.current_target != Some((target.shown_at, target.center)) {
                    self.current_target = Some((target.shown_at, target.center));
                    self.interval_index = -1;
                    self.flipped = false;
                }
                // small slack so a delay that is a whole number of ticks is honoured exactly
                let acting = world.target_elapsed - self.policy.reaction_delay_s;
                if acting < -1e-9 {
                    return [0.0; 2];
                }
                let interval = (acting.max(0.0) / self.policy.decision_interval_s + 1e-9).floor() as i64;
                while self.interval_index < interval {
                    self.flipped = self.decide_flip();
                    self.interval_index += 1;
                }
                let dx = target.center[0] - world.cursor[0];
                let dy = target.center[1] - world.cursor[1];
                let dist = dx.hypot(dy);
                if dist == 0.0 {
                    return [0.0; 2];
                }
                let sign = if self.flipped { -1.0 } else { 1.0 };
                let scale = sign * self.policy.effort / dist;
                [dx * scale, dy * scale]
            }
        }
    }

    pub fn tick_s(&self) -> f64 {
        self.tick_s
    }
}

// ---------------------------------------------------------------------------
// Sources

/// Produces consecutive frames at the sample clock.
///
/// `intent` is the synthetic subject's intent for this frame and `now_s` the
/// frame's session time; each source uses whichever it needs.
pub trait SignalSource: Send {
    fn next_frame(&mut self, intent: [f64; 2], now_s: f64) -> Result<Option<SampleFrame>, SourceError>;
    fn signal_config(&self) -> &SignalConfig;
    fn describe(&self) -> &'static str;
}

pub struct SyntheticSource {
    subject: SyntheticSubject,
    cfg: SignalConfig,
}

impl SyntheticSource {
    pub fn new(subject: SyntheticSubject, cfg: SignalConfig) -> Self {
        Self { subject, cfg }
    }
}

impl SignalSource for SyntheticSource {
    fn next_frame(&mut self, intent: [f64; 2], _now_s: f64) -> Result<Option<SampleFrame>, SourceError> {
        Ok(Some(self.subject.gen_frame(intent)))
    }

    fn signal_config(&self) -> &SignalConfig {
        &self.cfg
    }

    fn describe(&self) -> &'static str {
        "synthetic"
    }
}

/// Streams frames from a recorded signal file or an in-memory list.
pub struct ReplaySource {
    cfg: SignalConfig,
    frames: std::vec::IntoIter<SampleFrame>,
}

impl ReplaySource {
    pub fn open(path: &Path, expected: &SignalConfig) -> Result<Self, SourceError> {
        let (cfg, frames) = SignalReader::open(path)?.read_all()?;
        Self::from_frames(cfg, frames, expected)
    }

    pub fn from_frames(cfg: SignalConfig, frames: Vec<SampleFrame>, expected: &SignalConfig) -> Result<Self, SourceError> {
        if cfg.n_channels != expected.n_channels || cfg.sample_rate_hz != expected.sample_rate_hz {
            return Err(SourceError::Signal(SignalError::Config(format!(
                "recording has {} channels at {} Hz, session expects {} at {} Hz",
                cfg.n_channels, cfg.sample_rate_hz, expected.n_channels, expected.sample_rate_hz
            ))));
        }
        Ok(Self { cfg: *expected, frames: frames.into_iter() })
    }
}

impl SignalSource for ReplaySource {
    fn next_frame(&mut self, _intent: [f64; 2], _now_s: f64) -> Result<Option<SampleFrame>, SourceError> {
        Ok(self.frames.next())
    }

    fn signal_config(&self) -> &SignalConfig {
        &self.cfg
    }

    fn describe(&self) -> &'static str {
        "replay"
    }
}

type StampedIntent = (f64, [f64; 2]);

/// Last-value-wins slot for operator intent, stamped in session seconds.
#[derive(Debug, Clone, Default)]
pub struct IntentMailbox {
    slot: Arc<Mutex<Option<StampedIntent>>>,
}

pub const INTENT_STALE_S: f64 = 0.5;

impl IntentMailbox {
    pub fn post(&self, t_s: f64, intent: [f64; 2]) {
        *self.slot.lock().unwrap_or_else(|e| e.into_inner()) = Some((t_s, intent));
    }

    pub fn latest(&self) -> Option<(f64, [f64; 2])> {
        *self.slot.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Intent in force at `now_s`: the latest message, or idle once it is
    /// older than [`INTENT_STALE_S`].
    pub fn intent_at(&self, now_s: f64) -> [f64; 2] {
        match self.latest() {
            Some((t, intent)) if now_s - t <= INTENT_STALE_S => intent,
            _ => [0.0; 2],
        }
    }
}

/// Encodes operator intent through a synthetic subject.
pub struct SurrogateSource {
    subject: SyntheticSubject,
    cfg: SignalConfig,
    mailbox: IntentMailbox,
    stale: bool,
}

impl SurrogateSource {
    pub fn new(subject: SyntheticSubject, cfg: SignalConfig, mailbox: IntentMailbox) -> Self {
        Self { subject, cfg, mailbox, stale: true }
    }

    pub fn mailbox(&self) -> &IntentMailbox {
        &self.mailbox
    }

    pub fn surrogate_frame(&mut self, now_s: f64) -> SampleFrame {
        let fresh = matches!(self.mailbox.latest(), Some((t, _)) if now_s - t <= INTENT_STALE_S);
        if fresh == self.stale {
            self.stale = !fresh;
            if self.stale {
                log::info!("operator intent stale at {now_s:.3} s; holding idle");
            }
        }
        self.subject.gen_frame(self.mailbox.intent_at(now_s))
    }
}

impl SignalSource for SurrogateSource {
    fn next_frame(&mut self, _intent: [f64; 2], now_s: f64) -> Result<Option<SampleFrame>, SourceError> {
        Ok(Some(self.surrogate_frame(now_s)))
    }

    fn signal_config(&self) -> &SignalConfig {
        &self.cfg
    }

    fn describe(&self) -> &'static str {
        "surrogate"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{Axis, Direction, TestMode};

    fn unit_mixing(n: usize) -> Vec<[f64; 2]> {
        let mut m = vec![[0.0; 2]; n];
        m[0] = [1.0, 0.0];
        m[1] = [0.0, 1.0];
        m
    }

    fn quiet(mixing: Vec<[f64; 2]>) -> SubjectConfig {
        SubjectConfig { mixing: Some(mixing), ..SubjectConfig::noiseless() }
    }

    fn seek_world(cursor: [f64; 2], center: [f64; 2], elapsed: f64) -> WorldView {
        WorldView {
            phase: ProtocolPhase::Test(TestMode::Horizontal1D),
            reference_velocity: [0.0; 2],
            cursor,
            target: Some(Target { direction: Direction::Right, center, radius: 0.15, shown_at: 0.0 }),
            target_elapsed: elapsed,
        }
    }

    #[test]
    fn pure_mixing_without_noise() {
        let cfg = SignalConfig::default();
        let mut s = SyntheticSubject::new(&quiet(unit_mixing(14)), &cfg, 0).unwrap();
        let f = s.gen_frame([2.0, 0.0]);
        assert_eq!(f.voltages[0], 2.0);
        assert!(f.voltages[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn intent_lag_delays_encoding() {
        let cfg = SignalConfig::default();
        let sub = SubjectConfig { intent_lag: 3, ..quiet(unit_mixing(14)) };
        let mut s = SyntheticSubject::new(&sub, &cfg, 0).unwrap();
        let out: Vec<f64> = (0..5).map(|_| s.gen_frame([2.0, 0.0]).voltages[0]).collect();
        assert_eq!(out, vec![0.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn frames_are_consecutive_and_seeded() {
        let cfg = SignalConfig::default();
        let sub = SubjectConfig { background_level: 0.5, ..Default::default() };
        let run = |seed| {
            let mut s = SyntheticSubject::new(&sub, &cfg, seed).unwrap();
            (0..50).map(|i| s.gen_frame([(i as f64).sin(), 0.2])).collect::<Vec<_>>()
        };
        let a = run(5);
        assert_eq!(a, run(5));
        assert_ne!(a, run(6));
        assert!(a.windows(2).all(|w| w[1].t == w[0].t + 1));
    }

    #[test]
    fn rank_one_mixing_is_rejected() {
        let cfg = SignalConfig { n_channels: 3, ..Default::default() };
        let sub = quiet(vec![[1.0, 2.0], [2.0, 4.0], [-1.0, -2.0]]);
        assert!(matches!(SyntheticSubject::new(&sub, &cfg, 0), Err(SourceError::Config(_))));
    }

    #[test]
    fn generated_mixing_has_unit_column_power() {
        let m = SubjectConfig::default().resolve_mixing(14);
        for col in 0..2 {
            let p = m.iter().map(|r| r[col] * r[col]).sum::<f64>() / 14.0;
            assert!((p - 1.0).abs() < 1e-12);
        }
        assert!((mixing_power(&m) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn measured_snr_matches_prediction() {
        let cfg = SignalConfig { n_channels: 2, ..Default::default() };
        let n = (60.0 * cfg.sample_rate_hz) as usize;
        // unit-power intent: a full-scale square wave
        let intent: Vec<f64> = (0..n).map(|i| if (i / 64) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        for sigma in [0.01, 0.1, 1.0, 10.0] {
            let mixing = vec![[1.0, 0.0], [0.0, 1.0]];
            let noisy = SubjectConfig { mixing: Some(mixing.clone()), noise_sigma: sigma, asymmetry: 1.0, ..SubjectConfig::noiseless() };
            let mut s = SyntheticSubject::new(&noisy, &cfg, 11).unwrap();
            let noise: Vec<f64> = intent.iter().map(|&u| s.gen_frame([u, 0.0]).voltages[0] - u).collect();
            let noise_power = noise.iter().map(|e| e * e).sum::<f64>() / n as f64;
            let signal_power = intent.iter().map(|u| u * u).sum::<f64>() / n as f64;
            let measured_db = 10.0 * (signal_power / noise_power).log10();
            let predicted_db = 10.0 * (1.0 / (sigma * sigma)).log10();
            assert!((measured_db - predicted_db).abs() <= 1.0, "sigma {sigma}: {measured_db} vs {predicted_db}");
        }
    }

    #[test]
    fn vertical_asymmetry_weakens_vertical_encoding() {
        let cfg = SignalConfig { n_channels: 2, ..Default::default() };
        let sub = SubjectConfig { mixing: Some(vec![[1.0, 0.0], [0.0, 1.0]]), asymmetry: 1.5, ..SubjectConfig::noiseless() };
        let mut s = SyntheticSubject::new(&sub, &cfg, 0).unwrap();
        let f = s.gen_frame([0.3, 0.3]);
        assert_eq!(f.voltages[0], 0.3);
        assert!((f.voltages[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn seek_points_at_target() {
        let policy = IntentPolicy { wrong_direction_prob: 0.0, reaction_delay_s: 0.0, ..Default::default() };
        let mut m = IntentModel::new(policy, 16.0, 0).unwrap();
        assert_eq!(m.intent(&seek_world([0.0, 0.0], [0.85, 0.0], 0.0)), [0.4, 0.0]);
    }

    #[test]
    fn reaction_delay_holds_still() {
        let policy = IntentPolicy { wrong_direction_prob: 0.0, reaction_delay_s: 0.3, ..Default::default() };
        let mut m = IntentModel::new(policy, 16.0, 0).unwrap();
        assert_eq!(m.intent(&seek_world([0.0; 2], [0.85, 0.0], 0.25)), [0.0; 2]);
        assert_eq!(m.intent(&seek_world([0.0; 2], [0.85, 0.0], 0.3125)), [0.4, 0.0]);
    }

    #[test]
    fn idle_intent_is_zero() {
        let mut m = IntentModel::new(IntentPolicy::default(), 16.0, 0).unwrap();
        let world = WorldView {
            phase: ProtocolPhase::Calibration,
            reference_velocity: [1.0, 1.0],
            cursor: [0.0; 2],
            target: None,
            target_elapsed: 0.0,
        };
        assert_eq!(m.intent(&world), [0.0; 2]);
    }

    #[test]
    fn tracking_follows_reference_after_delay() {
        let policy = IntentPolicy { reaction_delay_s: 0.125, ..Default::default() };
        let mut m = IntentModel::new(policy, 16.0, 0).unwrap();
        let world = |u| WorldView {
            phase: ProtocolPhase::Training(Axis::Horizontal),
            reference_velocity: [u, 0.0],
            cursor: [0.0; 2],
            target: None,
            target_elapsed: 0.0,
        };
        let out: Vec<f64> = [0.1, 0.2, 0.3, 0.4].iter().map(|&u| m.intent(&world(u))[0]).collect();
        assert_eq!(out, vec![0.0, 0.0, 0.1, 0.2]);
    }

    #[test]
    fn flip_frequency_matches_probability() {
        let policy = IntentPolicy { wrong_direction_prob: 0.3, ..Default::default() };
        let mut m = IntentModel::new(policy, 16.0, 99).unwrap();
        let flips = (0..10_000).filter(|_| m.decide_flip()).count();
        let freq = flips as f64 / 10_000.0;
        assert!((0.28..=0.32).contains(&freq), "{freq}");
    }

    #[test]
    fn flips_hold_for_a_decision_interval() {
        let policy = IntentPolicy { wrong_direction_prob: 0.5, reaction_delay_s: 0.0, ..Default::default() };
        let mut m = IntentModel::new(policy, 16.0, 3).unwrap();
        let signs: Vec<f64> = (0..64)
            .map(|i| m.intent(&seek_world([0.0; 2], [0.85, 0.0], i as f64 / 16.0))[0].signum())
            .collect();
        for chunk in signs.chunks(8) {
            assert!(chunk.iter().all(|&s| s == chunk[0]));
        }
        assert!(signs.contains(&-1.0) && signs.contains(&1.0));
    }

    #[test]
    fn policy_validation() {
        assert!(IntentPolicy { effort: 0.0, ..Default::default() }.validate().is_err());
        assert!(IntentPolicy { wrong_direction_prob: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn replay_rejects_other_channel_counts() {
        let cfg = SignalConfig { n_channels: 2, ..Default::default() };
        let err = ReplaySource::from_frames(cfg, vec![], &SignalConfig::default()).err().unwrap();
        assert!(matches!(err, SourceError::Signal(SignalError::Config(_))));
    }

    #[test]
    fn replay_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("signals.csv");
        let cfg = SignalConfig::default();
        let sub = SubjectConfig { background_level: 0.7, noise_sigma: 0.3, ..Default::default() };
        let mut s = SyntheticSubject::new(&sub, &cfg, 21).unwrap();
        let frames: Vec<SampleFrame> = (0..1000).map(|i| s.gen_frame([(i as f64 * 0.01).sin(), 0.1])).collect();
        let mut w = crate::signal::SignalWriter::create(&path, &cfg).unwrap();
        frames.iter().for_each(|f| w.write_frame(f).unwrap());
        w.finish().unwrap();
        let mut replay = ReplaySource::open(&path, &cfg).unwrap();
        for f in &frames {
            let got = replay.next_frame([0.0; 2], 0.0).unwrap().unwrap();
            assert!(got.voltages.iter().zip(&f.voltages).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(replay.next_frame([0.0; 2], 0.0).unwrap().is_none());
    }

    #[test]
    fn surrogate_matches_direct_generation() {
        let cfg = SignalConfig::default();
        let sub = SubjectConfig { noise_sigma: 0.2, ..Default::default() };
        let mailbox = IntentMailbox::default();
        let mut sur = SurrogateSource::new(SyntheticSubject::new(&sub, &cfg, 4).unwrap(), cfg, mailbox.clone());
        let mut direct = SyntheticSubject::new(&sub, &cfg, 4).unwrap();
        mailbox.post(0.0, [0.5, 0.0]);
        for i in 0..32 {
            let now = i as f64 / 128.0;
            assert_eq!(sur.surrogate_frame(now), direct.gen_frame([0.5, 0.0]));
        }
    }

    #[test]
    fn surrogate_decays_to_idle() {
        let mailbox = IntentMailbox::default();
        assert_eq!(mailbox.intent_at(0.0), [0.0; 2]);
        mailbox.post(1.0, [0.5, 0.0]);
        assert_eq!(mailbox.intent_at(1.4), [0.5, 0.0]);
        assert_eq!(mailbox.intent_at(2.0), [0.0; 2]);
    }

    #[test]
    fn sixty_hertz_script_on_sample_clock() {
        let cfg = SignalConfig::default();
        let mailbox = IntentMailbox::default();
        let mut sur = SurrogateSource::new(
            SyntheticSubject::new(&quiet(unit_mixing(14)), &cfg, 0).unwrap(),
            cfg,
            mailbox.clone(),
        );
        // message m at m/60 s carries u = m
        let script: Vec<(f64, f64)> = (0..120).map(|m| (m as f64 / 60.0, m as f64)).collect();
        let mut next = 0;
        for i in 0..256u64 {
            let now = i as f64 / 128.0;
            while next < script.len() && script[next].0 <= now {
                mailbox.post(script[next].0, [script[next].1, 0.0]);
                next += 1;
            }
            let frame = sur.surrogate_frame(now);
            let expected = script.iter().rfind(|(t, _)| *t <= now).unwrap().1;
            assert_eq!(frame.voltages[0], expected, "frame {i}");
        }
    }
}
