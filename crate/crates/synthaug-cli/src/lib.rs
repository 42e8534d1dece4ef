//! Experiment runner: subcommands that drive the `synthaug` library and
//! write versioned CSV and JSON outputs.

pub mod commands;
pub mod compare;
pub mod output;

use std::path::Path;

use serde::de::DeserializeOwned;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

/// Parse a JSON config, replacing its `seed` when one is given.
pub fn parse_config<T: DeserializeOwned>(text: &str, seed: Option<u64>) -> Result<T, CliError> {
    let mut v: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        match v.as_object_mut() {
            Some(obj) => {
                obj.insert("seed".into(), s.into());
            }
            None => return Err(CliError::Config("config must be a JSON object".into())),
        }
    }
    serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
}

/// Read a config file; a missing path means an empty object.
pub fn load_config<T: DeserializeOwned>(path: Option<&Path>, seed: Option<u64>) -> Result<T, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    parse_config(&text, seed)
}
