use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FloodError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FloodError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} is outside the schedule range [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("no corpus atoms match control track {0:?}")]
    UnknownCondition(Vec<u32>),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("corpus validation failed: {0}")]
    Validation(String),

    #[error("control provider failed for frame {frame}: {msg}")]
    ControlProvider { frame: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FloodError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FloodError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FloodError::InvalidArgument(msg.into())
    }
}
