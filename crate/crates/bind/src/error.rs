use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failures of the experiment runner, grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum BindError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T, E = BindError> = std::result::Result<T, E>;

impl BindError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BindError::Config(_) => 2,
            BindError::Numeric(_) => 3,
            BindError::Io { .. } => 4,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        BindError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }
}

impl From<bind_core::Error> for BindError {
    fn from(e: bind_core::Error) -> Self {
        use bind_core::Error as E;
        match e {
            E::NonFinite(_) | E::Divergence { .. } | E::Separability(_) => {
                BindError::Numeric(e.to_string())
            }
            _ => BindError::Config(e.to_string()),
        }
    }
}
