use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("grid denominator {0} is not supported here")]
    InvalidDenominator(u32),

    #[error("archive {path}: {msg}")]
    ArchiveCorrupt { path: String, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Model(#[from] recipcrystal_model::ModelError),

    #[error(transparent)]
    Core(#[from] recipcrystal_core::Error),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for bad data.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::InvalidDenominator(_)
            | CliError::Config(_)
            | CliError::CheckpointMismatch(_)
            | CliError::Usage(_) => 1,
            CliError::Model(recipcrystal_model::ModelError::InvalidConfig(_)) => 1,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}
