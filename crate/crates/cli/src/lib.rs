//! Library half of the CLI: config files, persistence formats, and the
//! command implementations. The binary in `main.rs` only parses arguments
//! and maps errors to exit codes.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvout;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unusable configuration or arguments (exit code 2).
    #[error("config error: {0}")]
    Config(String),
    /// Failure while running (exit code 1).
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl From<fedema_core::Error> for CliError {
    fn from(e: fedema_core::Error) -> Self {
        match e {
            fedema_core::Error::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
