//! Command implementations behind the `qcd` binary.
//!
//! Each command takes a parsed [`RunConfig`] and writes its results under an
//! output path. Errors carry the process exit code.

pub mod commands;
pub mod config;

pub use commands::{cmd_calibrate, cmd_oc_sweep, cmd_simulate, cmd_verify, VerifyOptions};
pub use config::{Calibration, Resolved, RunConfig};

use qcd_core::QcdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{0}")]
    Horizon(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Horizon(_) => 4,
        }
    }
}

impl From<QcdError> for CliError {
    fn from(e: QcdError) -> Self {
        match e {
            QcdError::InsufficientHorizon { .. } => CliError::Horizon(e.to_string()),
            QcdError::NonFinite(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
