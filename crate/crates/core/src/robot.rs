//! Robot neurofeedback: gesture mapping, the activation gate, the UDP command
//! codec and a virtual actuator.
//!
//! Datagram layout (8 bytes, big-endian sequence):
//!
//! ```text
//! 0xA5 0x01 gesture r g b seq_hi seq_lo
//! ```

use std::fmt;
use std::io::{self, Write};
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::{Axis, Direction, Target, TestMode};

pub const MAGIC: u8 = 0xA5;
pub const VERSION: u8 = 0x01;
pub const DATAGRAM_LEN: usize = 8;
pub const STALE_WINDOW: u16 = 32;
pub const DEFAULT_ACTUATOR_ADDR: &str = "127.0.0.1:9750";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Gesture {
    Idle,
    RightHand,
    LeftHand,
    BothHands,
    HeadShake,
}

impl Gesture {
    pub const ALL: [Gesture; 5] = [Gesture::Idle, Gesture::RightHand, Gesture::LeftHand, Gesture::BothHands, Gesture::HeadShake];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Gesture::Idle => "IDLE",
            Gesture::RightHand => "RIGHT_HAND",
            Gesture::LeftHand => "LEFT_HAND",
            Gesture::BothHands => "BOTH_HANDS",
            Gesture::HeadShake => "HEAD_SHAKE",
        }
    }
}

impl fmt::Display for Gesture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type Rgb = [u8; 3];

pub const GREEN: Rgb = [0, 255, 0];
pub const BLUE: Rgb = [0, 0, 255];
pub const CYAN: Rgb = [0, 255, 255];
pub const RED: Rgb = [255, 0, 0];
pub const BLACK: Rgb = [0, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GestureCommand {
    pub gesture: Gesture,
    pub eye_rgb: Rgb,
    pub seq: u16,
}

impl GestureCommand {
    pub fn new(gesture: Gesture, eye_rgb: Rgb) -> Self {
        Self { gesture, eye_rgb, seq: 0 }
    }
}

/// Gesture and eye colour shown for a correctly steered target direction.
pub fn canonical(direction: Direction) -> (Gesture, Rgb) {
    match direction {
        Direction::Right => (Gesture::RightHand, GREEN),
        Direction::Left => (Gesture::LeftHand, BLUE),
        Direction::Top => (Gesture::BothHands, CYAN),
        Direction::Bottom => (Gesture::HeadShake, RED),
    }
}

/// Offline mapping from cursor position sign. Inside the dead zone the robot
/// idles and keeps `last_eyes`. In the 2D mode the dominant axis decides.
pub fn map_offline(position: [f64; 2], mode: TestMode, dead_zone: f64, last_eyes: Rgb) -> GestureCommand {
    let axis = mode.locked_axis().unwrap_or(if position[1].abs() > position[0].abs() {
        Axis::Vertical
    } else {
        Axis::Horizontal
    });
    let value = position[axis.index()];
    if value.abs() <= dead_zone || !value.is_finite() {
        return GestureCommand::new(Gesture::Idle, last_eyes);
    }
    let direction = match (axis, value > 0.0) {
        (Axis::Horizontal, true) => Direction::Right,
        (Axis::Horizontal, false) => Direction::Left,
        (Axis::Vertical, true) => Direction::Top,
        (Axis::Vertical, false) => Direction::Bottom,
    };
    let (gesture, eyes) = canonical(direction);
    GestureCommand::new(gesture, eyes)
}

/// True while decoded velocity points toward the target along its axis.
pub fn activation_gate(decoded: [f64; 2], target: &Target, dead_zone: f64) -> bool {
    let along = decoded[target.direction.axis().index()] * target.direction.sign();
    along > dead_zone
}

pub fn map_online(target: &Target, active: bool, last_eyes: Rgb) -> GestureCommand {
    if active {
        let (gesture, eyes) = canonical(target.direction);
        GestureCommand::new(gesture, eyes)
    } else {
        GestureCommand::new(Gesture::Idle, last_eyes)
    }
}

// ---------------------------------------------------------------------------
// Codec

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("datagram is {0} bytes, expected 8")]
    Framing(usize),
    #[error("bad header {magic:#04x} {version:#04x}")]
    Protocol { magic: u8, version: u8 },
    #[error("unknown gesture id {0}")]
    UnknownCommand(u8),
}

pub fn encode_command(cmd: &GestureCommand) -> [u8; DATAGRAM_LEN] {
    let [r, g, b] = cmd.eye_rgb;
    let [hi, lo] = cmd.seq.to_be_bytes();
    [MAGIC, VERSION, cmd.gesture.id(), r, g, b, hi, lo]
}

pub fn decode_command(bytes: &[u8]) -> Result<GestureCommand, CodecError> {
    if bytes.len() != DATAGRAM_LEN {
        return Err(CodecError::Framing(bytes.len()));
    }
    if bytes[0] != MAGIC || bytes[1] != VERSION {
        return Err(CodecError::Protocol { magic: bytes[0], version: bytes[1] });
    }
    let gesture = Gesture::from_id(bytes[2]).ok_or(CodecError::UnknownCommand(bytes[2]))?;
    Ok(GestureCommand {
        gesture,
        eye_rgb: [bytes[3], bytes[4], bytes[5]],
        seq: u16::from_be_bytes([bytes[6], bytes[7]]),
    })
}

// ---------------------------------------------------------------------------
// Robot state

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub gesture: Gesture,
    pub eye_rgb: Rgb,
    pub last_seq: Option<u16>,
    pub last_update: f64,
    pub moving: bool,
}

impl Default for RobotState {
    fn default() -> Self {
        Self { gesture: Gesture::Idle, eye_rgb: BLACK, last_seq: None, last_update: 0.0, moving: false }
    }
}

/// Visible state change, as written to the actuator log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateChange {
    pub t_s: f64,
    pub gesture: Gesture,
    pub eye_rgb: Rgb,
    pub seq: u16,
}

/// Whether `seq` is a duplicate of, or up to 31 behind, `last` (mod 2^16).
pub fn is_stale(last: Option<u16>, seq: u16) -> bool {
    last.is_some_and(|last| last.wrapping_sub(seq) < STALE_WINDOW)
}

impl RobotState {
    /// Folds one command into the state. Returns the new visible state when
    /// gesture or eyes changed.
    pub fn apply_command(&mut self, cmd: &GestureCommand, now: f64) -> Option<StateChange> {
        if is_stale(self.last_seq, cmd.seq) {
            return None;
        }
        let changed = self.gesture != cmd.gesture || self.eye_rgb != cmd.eye_rgb || self.last_seq.is_none();
        self.gesture = cmd.gesture;
        self.eye_rgb = cmd.eye_rgb;
        self.last_seq = Some(cmd.seq);
        self.last_update = now;
        self.moving = cmd.gesture != Gesture::Idle;
        changed.then_some(StateChange { t_s: now, gesture: cmd.gesture, eye_rgb: cmd.eye_rgb, seq: cmd.seq })
    }
}

/// Servo targets (degrees) for bridging gestures to a 12-servo humanoid.
/// Order: head yaw, waist yaw, R shoulder, R arm, R hand, L shoulder, L arm,
/// L hand, R thigh, R foot, L thigh, L foot. Head shake oscillates around
/// the listed yaw by ±30°.
pub fn servo_pose(gesture: Gesture) -> [u8; 12] {
    const REST: [u8; 12] = [90, 90, 0, 90, 90, 180, 90, 90, 90, 90, 90, 90];
    let mut pose = REST;
    match gesture {
        Gesture::Idle | Gesture::HeadShake => {}
        Gesture::RightHand => pose[2] = 150,
        Gesture::LeftHand => pose[5] = 30,
        Gesture::BothHands => {
            pose[2] = 150;
            pose[5] = 30;
        }
    }
    pose
}

// ---------------------------------------------------------------------------
// Activation timeline

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationSegment {
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTimeline {
    pub segments: Vec<ActivationSegment>,
    /// Inactive stretches between two active segments.
    pub gaps: usize,
    pub duty_cycle: f64,
}

/// Groups per-tick activation flags into contiguous active segments. Each
/// tick covers `[t, t + tick_s)`.
pub fn activation_timeline(ticks: &[(f64, bool)], tick_s: f64) -> ActivationTimeline {
    let mut segments: Vec<ActivationSegment> = Vec::new();
    let mut open: Option<f64> = None;
    let mut last_t = 0.0;
    for &(t, active) in ticks {
        match (active, open) {
            (true, None) => open = Some(t),
            (false, Some(start)) => {
                segments.push(ActivationSegment { start_s: start, end_s: t });
                open = None;
            }
            _ => {}
        }
        last_t = t;
    }
    if let Some(start) = open {
        segments.push(ActivationSegment { start_s: start, end_s: last_t + tick_s });
    }
    let active = ticks.iter().filter(|(_, a)| *a).count();
    ActivationTimeline {
        gaps: segments.len().saturating_sub(1),
        duty_cycle: if ticks.is_empty() { 0.0 } else { active as f64 / ticks.len() as f64 },
        segments,
    }
}

// ---------------------------------------------------------------------------
// Transport

/// Fire-and-forget UDP sender that stamps consecutive sequence numbers.
pub struct CommandSender {
    socket: UdpSocket,
    target: SocketAddr,
    next_seq: u16,
}

impl CommandSender {
    pub fn connect(target: &str) -> io::Result<Self> {
        let target = target
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("cannot resolve {target}")))?;
        let bind: SocketAddr = if target.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().expect("literal");
        Ok(Self { socket: UdpSocket::bind(bind)?, target, next_seq: 0 })
    }

    pub fn target(&self) -> SocketAddr {
        self.target
    }

    /// Stamps and sends; the returned command carries the sequence used.
    /// Send failures are reported but leave the sequence advanced.
    pub fn send(&mut self, cmd: GestureCommand) -> (GestureCommand, io::Result<()>) {
        let stamped = GestureCommand { seq: self.next_seq, ..cmd };
        self.next_seq = self.next_seq.wrapping_add(1);
        let result = self.socket.send_to(&encode_command(&stamped), self.target).map(|_| ());
        (stamped, result)
    }
}

/// Stamps sequence numbers without a socket, for sessions with no robot.
#[derive(Debug, Default)]
pub struct SequenceStamp {
    next_seq: u16,
}

impl SequenceStamp {
    pub fn stamp(&mut self, cmd: GestureCommand) -> GestureCommand {
        let stamped = GestureCommand { seq: self.next_seq, ..cmd };
        self.next_seq = self.next_seq.wrapping_add(1);
        stamped
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActuatorStats {
    pub received: u64,
    pub applied: u64,
    pub stale: u64,
    pub framing_errors: u64,
    pub protocol_errors: u64,
    pub unknown_commands: u64,
}

/// Joins to the final state, counters and state-change log of a spawned actuator.
pub type ActuatorHandle = std::thread::JoinHandle<io::Result<(RobotState, ActuatorStats, Vec<u8>)>>;

/// Software robot listening for command datagrams.
pub struct VirtualActuator {
    socket: UdpSocket,
    state: RobotState,
    stats: ActuatorStats,
    started: Instant,
}

impl VirtualActuator {
    pub fn bind(addr: &str) -> io::Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(Duration::from_millis(50)))?;
        Ok(Self { socket, state: RobotState::default(), stats: ActuatorStats::default(), started: Instant::now() })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn stats(&self) -> &ActuatorStats {
        &self.stats
    }

    /// Handles one datagram; malformed input is counted, never fatal.
    pub fn handle(&mut self, bytes: &[u8], now: f64) -> Option<StateChange> {
        self.stats.received += 1;
        match decode_command(bytes) {
            Ok(cmd) => {
                if is_stale(self.state.last_seq, cmd.seq) {
                    self.stats.stale += 1;
                    return None;
                }
                self.stats.applied += 1;
                self.state.apply_command(&cmd, now)
            }
            Err(e) => {
                match e {
                    CodecError::Framing(_) => self.stats.framing_errors += 1,
                    CodecError::Protocol { .. } => self.stats.protocol_errors += 1,
                    CodecError::UnknownCommand(_) => self.stats.unknown_commands += 1,
                }
                log::debug!("dropped datagram: {e}");
                None
            }
        }
    }

    /// Serves until `stop` is set, appending state changes to `log` as JSON lines.
    pub fn run<W: Write>(&mut self, stop: &AtomicBool, log: &mut W) -> io::Result<()> {
        let mut buf = [0u8; 64];
        while !stop.load(Ordering::Relaxed) {
            match self.socket.recv_from(&mut buf) {
                Ok((n, _)) => {
                    let now = self.started.elapsed().as_secs_f64();
                    if let Some(change) = self.handle(&buf[..n], now) {
                        serde_json::to_writer(&mut *log, &change)?;
                        log.write_all(b"\n")?;
                        log.flush()?;
                    }
                }
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Runs on a background thread; returns the stop flag and a handle
    /// yielding the final state and the state-change log.
    pub fn spawn(mut self) -> (Arc<AtomicBool>, ActuatorHandle) {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            let mut log = Vec::new();
            self.run(&flag, &mut log)?;
            Ok((self.state, self.stats, log))
        });
        (stop, handle)
    }
}
