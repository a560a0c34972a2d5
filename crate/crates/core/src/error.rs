use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the counting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        found: (u32, u32),
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("malformed RLE: runs sum to {found}, expected {expected}")]
    MalformedRle { expected: u64, found: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    /// Transport-level failure talking to a model provider. Retryable.
    #[error("provider transport failure: {0}")]
    Transport(String),

    /// The provider answered with something that violates the protocol. Fatal.
    #[error("provider protocol violation: {0}")]
    Protocol(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }

    pub fn is_provider(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::Protocol(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
