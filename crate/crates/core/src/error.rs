use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TanError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("query error: {0}")]
    Query(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("training error in parameter `{param}`: {reason}")]
    Training { param: String, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl TanError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TanError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        TanError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            TanError::Config(_) | TanError::Query(_) | TanError::Dimension(_) => 2,
            TanError::Data(_)
            | TanError::Format { .. }
            | TanError::Io { .. }
            | TanError::Annotation(_)
            | TanError::Eval(_)
            | TanError::Checkpoint(_) => 3,
            TanError::Training { .. } | TanError::Numerical(_) | TanError::Internal(_) => 4,
        }
    }
}
