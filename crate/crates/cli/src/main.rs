mod args;
mod commands;
mod settings;

use std::process::ExitCode;

use clap::Parser;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CORTEXLOOP_LOG", "warn"))
        .format_timestamp_millis()
        .init();
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap exits 2 on usage errors and 0 for --help/--version
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let env = |key: &str| std::env::var(key).ok();
    match commands::dispatch(cli.command, &settings::Settings::new(&env)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cortexloop: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
