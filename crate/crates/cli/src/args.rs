use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use cortexloop_core::task::TestMode;

const AFTER_HELP: &str = "\
Settings are merged as: built-in defaults < scenario file < flags < CORTEXLOOP_* environment variables.
Exit status: 0 success, 2 invalid input or configuration, 3 runtime fault.";

#[derive(Debug, Parser)]
#[command(name = "cortexloop", version, about = "Closed-loop EEG cursor control with robot neurofeedback")]
#[command(after_help = AFTER_HELP, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a session against the synthetic subject and save the recording
    Simulate(SimulateArgs),
    /// Fit a decoder to the training phase of a recording
    Calibrate(CalibrateArgs),
    /// Re-run a recording's signals through a decoder
    Replay(ReplayArgs),
    /// Write the success table, position traces and activation timelines
    Report(ReportArgs),
    /// Run a live session with the WebSocket console attached
    Serve(ServeArgs),
    /// Run a standalone virtual robot that logs state changes as JSON lines
    RobotActuator(ActuatorArgs),
}

#[derive(Debug, Args)]
#[command(after_help = AFTER_HELP)]
pub struct SimulateArgs {
    /// Scenario file (JSON session configuration) [env: CORTEXLOOP_SCENARIO]
    #[arg(long, value_name = "FILE")]
    pub scenario: Option<PathBuf>,
    /// Run only the test blocks of this mode: horizontal1D, vertical1D or full2D [env: CORTEXLOOP_MODE]
    #[arg(long, value_name = "MODE")]
    pub mode: Option<TestMode>,
    /// Recording directory to create [env: CORTEXLOOP_OUT]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Use the logical clock instead of wall time [env: CORTEXLOOP_MAX_SPEED]
    #[arg(long)]
    pub max_speed: bool,
    /// Master seed for every random stream [env: CORTEXLOOP_SEED]
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
#[command(after_help = AFTER_HELP)]
pub struct CalibrateArgs {
    /// Recording directory with a training phase [env: CORTEXLOOP_RECORDING]
    #[arg(long, value_name = "DIR")]
    pub recording: Option<PathBuf>,
    /// Ridge penalty; defaults to the recording's configured value [env: CORTEXLOOP_RIDGE]
    #[arg(long, value_name = "L")]
    pub ridge: Option<f64>,
    /// Model file to write [env: CORTEXLOOP_OUT]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(after_help = AFTER_HELP)]
pub struct ReplayArgs {
    /// Recording directory to replay [env: CORTEXLOOP_RECORDING]
    #[arg(long, value_name = "DIR")]
    pub recording: Option<PathBuf>,
    /// Decoder model; defaults to the recording's own model.json [env: CORTEXLOOP_MODEL]
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Also save the replayed session as a recording here [env: CORTEXLOOP_OUT]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(after_help = AFTER_HELP)]
pub struct ReportArgs {
    /// Recording directory to summarize [env: CORTEXLOOP_RECORDING]
    #[arg(long, value_name = "DIR")]
    pub recording: Option<PathBuf>,
    /// Directory for report.json and the CSV tables [env: CORTEXLOOP_OUT]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(after_help = AFTER_HELP)]
pub struct ServeArgs {
    /// Scenario file (JSON session configuration) [env: CORTEXLOOP_SCENARIO]
    #[arg(long, value_name = "FILE")]
    pub scenario: Option<PathBuf>,
    /// WebSocket address for console clients [env: CORTEXLOOP_LISTEN]
    #[arg(long, value_name = "HOST:PORT", default_value = "127.0.0.1:8765")]
    pub listen: String,
    /// Robot actuator address; an in-process virtual robot is started when absent [env: CORTEXLOOP_ROBOT]
    #[arg(long, value_name = "HOST:PORT")]
    pub robot: Option<String>,
    /// Save the session recording here [env: CORTEXLOOP_OUT]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Master seed for every random stream [env: CORTEXLOOP_SEED]
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
#[command(after_help = AFTER_HELP)]
pub struct ActuatorArgs {
    /// UDP address to receive command datagrams on [env: CORTEXLOOP_LISTEN]
    #[arg(long, value_name = "HOST:PORT", default_value = "127.0.0.1:9750")]
    pub listen: String,
    /// Stop after this many seconds instead of running until killed [env: CORTEXLOOP_DURATION]
    #[arg(long, value_name = "SECS")]
    pub duration: Option<f64>,
}
