//! Config loading, scenario orchestration, certificate reports and file output.

pub mod commands;
pub mod config;
pub mod output;
pub mod report;

use std::path::PathBuf;

use elphgo::gain_design::DesignError;
use elphgo::simulator::SimError;
use thiserror::Error;

pub use commands::*;
pub use config::*;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_CERTIFICATE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("certificate failure: {0}")]
    Certificate(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Certificate(_) => EXIT_CERTIFICATE,
            _ => EXIT_CONFIG,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

/// Input problems map to exit 1; everything else means no certificate exists.
pub(crate) fn classify_design_error(e: DesignError) -> CliError {
    match e {
        DesignError::Invalid(msg) => CliError::Config(msg),
        other => CliError::Certificate(other.to_string()),
    }
}
