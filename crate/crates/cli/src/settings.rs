//! Scenario loading and the flag/environment merge.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cortexloop_core::session::SessionConfig;

use crate::CliError;

pub const ENV_PREFIX: &str = "CORTEXLOOP_";

/// Environment lookup, injectable so tests need not touch the process env.
pub type EnvLookup<'a> = &'a dyn Fn(&str) -> Option<String>;

pub struct Settings<'a> {
    env: EnvLookup<'a>,
}

impl<'a> Settings<'a> {
    pub fn new(env: EnvLookup<'a>) -> Self {
        Self { env }
    }

    fn var(&self, name: &str) -> Option<(String, String)> {
        let key = format!("{ENV_PREFIX}{name}");
        (self.env)(&key).filter(|v| !v.is_empty()).map(|v| (key, v))
    }

    /// The environment value when set, else the flag.
    pub fn value<T>(&self, name: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.var(name) {
            Some((key, raw)) => raw
                .parse()
                .map(Some)
                .map_err(|e| CliError::Validation(format!("{key}={raw}: {e}"))),
            None => Ok(flag),
        }
    }

    pub fn path(&self, name: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        Ok(self.var(name).map(|(_, v)| PathBuf::from(v)).or(flag))
    }

    pub fn required_path(&self, name: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        let flag_name = name.to_ascii_lowercase().replace('_', "-");
        self.path(name, flag)?
            .ok_or_else(|| CliError::Validation(format!("--{flag_name} (or {ENV_PREFIX}{name}) is required")))
    }

    pub fn switch(&self, name: &str, flag: bool) -> Result<bool, CliError> {
        match self.var(name) {
            None => Ok(flag),
            Some((key, raw)) => match raw.to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" | "on" => Ok(true),
                "0" | "false" | "no" | "off" => Ok(false),
                _ => Err(CliError::Validation(format!("{key}={raw}: expected true or false"))),
            },
        }
    }
}

/// Built-in defaults overlaid with the scenario file, if any.
pub fn load_scenario(path: Option<&Path>) -> Result<SessionConfig, CliError> {
    let Some(path) = path else {
        return Ok(SessionConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read scenario {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("scenario {}: {e}", path.display())))
}
