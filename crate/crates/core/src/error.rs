use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the lab. Variants map onto the CLI exit codes
/// (config → 2, numerical → 3, io → 4).
#[derive(Debug, Error)]
pub enum FocalError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FocalError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FocalError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            FocalError::Numerical(_) => 3,
            FocalError::Io { .. } => 4,
            _ => 2,
        }
    }
}

pub type Result<T, E = FocalError> = std::result::Result<T, E>;
