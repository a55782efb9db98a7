use std::path::PathBuf;

use modit_core::synth::DatasetError;
use modit_core::ModitError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("cannot read config {path}: {source}")]
    ConfigRead { path: PathBuf, source: std::io::Error },
    #[error("dataset {path}: {source}")]
    Dataset { path: PathBuf, source: DatasetError },
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(ModitError),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl From<ModitError> for CliError {
    fn from(e: ModitError) -> Self {
        Self::Numeric(e)
    }
}

fn is_numeric(e: &ModitError) -> bool {
    match e {
        ModitError::NonFinite(_) | ModitError::Diverged { .. } | ModitError::DegenerateMask { .. } => true,
        ModitError::InRequest { source, .. } => is_numeric(source),
        _ => false,
    }
}

impl CliError {
    /// 2 for configuration problems, 3 for data and file problems, 4 for
    /// numeric aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::ConfigRead { .. } | Self::Usage(_) => EXIT_CONFIG,
            Self::Checkpoint(CheckpointError::Config(_)) => EXIT_CONFIG,
            Self::Numeric(e) if is_numeric(e) => EXIT_NUMERIC,
            Self::Numeric(ModitError::InvalidArgument(_)) => EXIT_CONFIG,
            Self::GradCheck(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
