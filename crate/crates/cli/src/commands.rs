use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use cortexloop_core::decoder::{self, DecoderError, DecoderModel};
use cortexloop_core::recording::{RecordingError, SessionRecording};
use cortexloop_core::report::generate_report;
use cortexloop_core::robot::VirtualActuator;
use cortexloop_core::session::{
    self, run_session, ClockMode, SessionConfig, SessionFailure, SessionIo, SessionSummary, Seeds, SourceKind,
};
use cortexloop_core::task::TestMode;
use cortexloop_service::{LobbyOutcome, Service};
use serde::Serialize;

use crate::args::{ActuatorArgs, CalibrateArgs, Command, ReplayArgs, ReportArgs, ServeArgs, SimulateArgs};
use crate::settings::{load_scenario, Settings};
use crate::CliError;

pub fn dispatch(command: Command, s: &Settings) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => simulate(a, s),
        Command::Calibrate(a) => calibrate(a, s),
        Command::Replay(a) => replay(a, s),
        Command::Report(a) => report(a, s),
        Command::Serve(a) => serve(a, s),
        Command::RobotActuator(a) => robot_actuator(a, s),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        // a closed pipe (`| head`) is the reader's choice, not a fault
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => other.map_err(|e| CliError::Runtime(format!("stdout: {e}"))),
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_recording(dir: &Path) -> Result<SessionRecording, CliError> {
    SessionRecording::load(dir).map_err(|e: RecordingError| CliError::Validation(format!("{}: {e}", dir.display())))
}

fn save_recording(rec: &SessionRecording, dir: &Path) -> Result<(), CliError> {
    rec.save(dir).map_err(|e| CliError::Runtime(format!("cannot save recording to {}: {e}", dir.display())))
}

/// Prints a summary for a session that stopped early, saves what was
/// recorded, and maps the error to an exit status.
fn report_failure(failure: SessionFailure, out: Option<&Path>) -> Result<(), CliError> {
    if failure.error.is_validation() {
        return Err(validation(failure.error));
    }
    if let (Some(rec), Some(dir)) = (failure.recording.as_deref(), out) {
        save_recording(rec, dir)?;
    }
    let summary = SessionSummary {
        complete: false,
        reason: Some(failure.error.to_string()),
        fit_report: failure.recording.as_ref().and_then(|r| r.model.as_ref()).map(|m| m.fit_report.clone()),
        blocks: Vec::new(),
    };
    print_json(&summary)?;
    Err(runtime(failure.error))
}

fn simulate(a: SimulateArgs, s: &Settings) -> Result<(), CliError> {
    let scenario = s.path("SCENARIO", a.scenario)?;
    let mode: Option<TestMode> = s.value("MODE", a.mode)?;
    let out = s.required_path("OUT", a.out)?;
    let max_speed = s.switch("MAX_SPEED", a.max_speed)?;
    let seed: Option<u64> = s.value("SEED", a.seed)?;

    let mut cfg = load_scenario(scenario.as_deref())?;
    if let Some(seed) = seed {
        cfg.seeds = Seeds::from_master(seed);
    }
    if let Some(mode) = mode {
        cfg.restrict_to_mode(mode);
    }
    if max_speed {
        cfg.clock = ClockMode::MaxSpeed;
    }
    if cfg.source != SourceKind::Synthetic {
        return Err(validation("simulate drives the synthetic subject; use serve for a surrogate source"));
    }
    cfg.validate().map_err(validation)?;

    match run_session(&cfg, SessionIo::default()) {
        Ok(result) => {
            save_recording(&result.recording, &out)?;
            print_json(&result.summary)
        }
        Err(failure) => report_failure(failure, Some(&out)),
    }
}

fn calibrate(a: CalibrateArgs, s: &Settings) -> Result<(), CliError> {
    let dir = s.required_path("RECORDING", a.recording)?;
    let out = s.required_path("OUT", a.out)?;
    let ridge: Option<f64> = s.value("RIDGE", a.ridge)?;
    let rec = load_recording(&dir)?;
    let ridge = ridge.or(rec.config.as_ref().map(|c| c.protocol.ridge_lambda)).unwrap_or(0.0);
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(validation(format!("ridge must be a nonnegative number, got {ridge}")));
    }
    let cfg = rec.signal_config;
    let ts = decoder::assemble_training_set(&rec, &cfg).map_err(decoder_error)?;
    let model = decoder::fit(&ts, ridge, &cfg).map_err(decoder_error)?;
    model.save(&out).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", out.display())))?;
    print_json(&model.fit_report)
}

fn decoder_error(e: DecoderError) -> CliError {
    match e {
        DecoderError::Config(_) | DecoderError::EmptyTraining => validation(e),
        _ => runtime(e),
    }
}

#[derive(Serialize)]
struct ReplayOutput {
    summary: SessionSummary,
    decoded_rows: usize,
    /// Largest |Δu|, |Δv| against the recorded decoded stream; absent when
    /// the streams differ in length.
    max_decoded_difference: Option<f64>,
    events_identical: bool,
}

fn replay(a: ReplayArgs, s: &Settings) -> Result<(), CliError> {
    let dir = s.required_path("RECORDING", a.recording)?;
    let model_path = s.path("MODEL", a.model)?;
    let out = s.path("OUT", a.out)?;
    let rec = load_recording(&dir)?;
    let model = match model_path {
        Some(p) => Some(DecoderModel::load(&p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?),
        None => None,
    };
    if model.is_none() && rec.model.is_none() {
        log::warn!("{} has no model.json; the replay refits from its training phase", dir.display());
    }
    let result = match session::replay_recording(&rec, model) {
        Ok(result) => result,
        Err(failure) => return report_failure(failure, out.as_deref()),
    };
    if let Some(out) = &out {
        save_recording(&result.recording, out)?;
    }
    let (old, new) = (&rec.decoded, &result.recording.decoded);
    let max_decoded_difference = (old.len() == new.len()).then(|| {
        old.iter()
            .zip(new)
            .map(|(a, b)| (a.u - b.u).abs().max((a.v - b.v).abs()))
            .fold(0.0, f64::max)
    });
    print_json(&ReplayOutput {
        decoded_rows: new.len(),
        max_decoded_difference,
        events_identical: rec.events == result.recording.events,
        summary: result.summary,
    })
}

fn report(a: ReportArgs, s: &Settings) -> Result<(), CliError> {
    let dir = s.required_path("RECORDING", a.recording)?;
    let out = s.required_path("OUT", a.out)?;
    let rec = load_recording(&dir)?;
    let bundle = generate_report(&rec);
    bundle
        .write(&out)
        .map_err(|e| CliError::Runtime(format!("cannot write report to {}: {e}", out.display())))?;
    print_json(&bundle.report)
}

fn serve(a: ServeArgs, s: &Settings) -> Result<(), CliError> {
    let scenario = s.path("SCENARIO", a.scenario)?;
    let listen: String = s.value("LISTEN", Some(a.listen))?.unwrap_or_default();
    let robot: Option<String> = s.value("ROBOT", a.robot)?;
    let out = s.path("OUT", a.out)?;
    let seed: Option<u64> = s.value("SEED", a.seed)?;

    let mut cfg: SessionConfig = load_scenario(scenario.as_deref())?;
    if let Some(seed) = seed {
        cfg.seeds = Seeds::from_master(seed);
    }
    cfg.clock = ClockMode::Realtime;
    if let Some(robot) = robot {
        cfg.robot = Some(robot);
    }
    cfg.validate().map_err(validation)?;

    let actuator = match cfg.robot {
        Some(_) => None,
        None => {
            let actuator = VirtualActuator::bind("127.0.0.1:0").map_err(runtime)?;
            cfg.robot = Some(actuator.local_addr().map_err(runtime)?.to_string());
            Some(actuator.spawn())
        }
    };
    let result = serve_session(&cfg, &listen, out.as_deref());
    if let Some((stop, handle)) = actuator {
        stop.store(true, Ordering::Relaxed);
        if let Ok(Ok((state, stats, _))) = handle.join() {
            log::info!("virtual robot finished in {:?} after {} datagrams", state.gesture, stats.received);
        }
    }
    result
}

fn serve_session(cfg: &SessionConfig, listen: &str, out: Option<&Path>) -> Result<(), CliError> {
    let mut service = Service::bind(listen).map_err(|e| CliError::Runtime(format!("cannot listen on {listen}: {e}")))?;
    eprintln!("console: ws://{}", service.local_addr());
    if cfg.source == SourceKind::Surrogate {
        eprintln!("waiting for a start command");
        if service.wait_for_start(None) != LobbyOutcome::Start {
            let summary = SessionSummary {
                complete: false,
                reason: Some("aborted before start".into()),
                fit_report: None,
                blocks: Vec::new(),
            };
            return print_json(&summary);
        }
    }
    let outcome = service.run(cfg);
    service.shutdown();
    match outcome {
        Ok(result) => {
            if let Some(dir) = out {
                save_recording(&result.recording, dir)?;
            }
            print_json(&result.summary)
        }
        Err(failure) => report_failure(failure, out),
    }
}

fn robot_actuator(a: ActuatorArgs, s: &Settings) -> Result<(), CliError> {
    let listen: String = s.value("LISTEN", Some(a.listen))?.unwrap_or_default();
    let duration: Option<f64> = s.value("DURATION", a.duration)?;
    if let Some(d) = duration {
        if !(d > 0.0 && d.is_finite()) {
            return Err(validation(format!("duration must be positive, got {d}")));
        }
    }
    let mut actuator =
        VirtualActuator::bind(&listen).map_err(|e| CliError::Runtime(format!("cannot bind {listen}: {e}")))?;
    eprintln!("robot actuator: udp://{}", actuator.local_addr().map_err(runtime)?);
    let stop = Arc::new(AtomicBool::new(false));
    if let Some(d) = duration {
        let stop = stop.clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_secs_f64(d));
            stop.store(true, Ordering::Relaxed);
        });
    }
    let mut stdout = std::io::stdout().lock();
    actuator.run(&stop, &mut stdout).map_err(runtime)?;
    let stats = serde_json::to_string(actuator.stats()).map_err(runtime)?;
    eprintln!("{stats}");
    Ok(())
}
