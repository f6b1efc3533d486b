//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: config
//! problems exit 1, data problems exit 2, runtime failures exit 3.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("runtime error: {0}")]
    Runtime(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code for this error: 1 usage/config, 2 data, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Json(_) => 2,
            Error::Io { .. } | Error::Diverged { .. } | Error::Runtime(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
