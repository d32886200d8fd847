use std::path::PathBuf;

use coop_numerics::NumericsError;

use crate::model::checkpoint::CheckpointError;

#[derive(Debug, thiserror::Error)]
pub enum CoopError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("checkpoint mismatch: expected base {expected}, found {found}")]
    BaseMismatch { expected: String, found: String },
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, position: usize, vocab: usize },
    #[error("numerical divergence at step {step} (last good step {last_good}): {detail}")]
    Divergence { step: u64, last_good: u64, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl CoopError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoopError::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        CoopError::Json { path: path.into(), source }
    }

    /// Process exit code: 1 validation, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoopError::Divergence { .. } => 3,
            CoopError::Numerics(NumericsError::NonFiniteGradient(_)) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoopError>;
