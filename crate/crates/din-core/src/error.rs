use std::path::PathBuf;

use thiserror::Error;

/// Error type shared across the library.
///
/// Variants are grouped so the CLI can map them onto its exit-code
/// contract: 2 usage/config, 3 data, 4 numerical.
#[derive(Debug, Error)]
pub enum DinError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl DinError {
    pub fn config(msg: impl Into<String>) -> Self {
        DinError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        DinError::Data(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        DinError::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        DinError::Numerical(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DinError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        DinError::Format { path: path.into(), reason: reason.into() }
    }

    /// Process exit code for the CLI: 2 usage, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            DinError::Config(_) => 2,
            DinError::Data(_) | DinError::Io { .. } | DinError::Format { .. } => 3,
            DinError::Shape(_) | DinError::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, DinError>;
