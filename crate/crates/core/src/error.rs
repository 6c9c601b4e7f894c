use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the streaming laboratory.
#[derive(Debug, Error)]
pub enum AbrError {
    /// A trace value violates a physical constraint (e.g. non-positive throughput).
    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    /// Malformed input row.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    /// Parsed data that breaks a domain invariant.
    #[error("validation failed: {0}")]
    Validation(String),

    /// Inconsistent configuration (plans, fractions, schedules).
    #[error("config error: {0}")]
    Config(String),

    /// Network shapes or tabular MDP specs that do not fit together.
    #[error("spec error: {0}")]
    Spec(String),

    /// Training produced a non-finite objective.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl AbrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AbrError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = AbrError> = std::result::Result<T, E>;
