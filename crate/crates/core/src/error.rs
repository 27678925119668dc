use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("user {user} has no candidate negative items")]
    NoCandidate { user: u32 },
    #[error("evaluation protocol error: {0}")]
    Protocol(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad input files or configuration, as
    /// opposed to failures during training.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Parse { .. } | Error::EmptyDataset(_) | Error::Config(_)
        )
    }
}
