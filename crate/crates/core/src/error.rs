//! Error types shared across the library.

use thiserror::Error;

/// Unified error type for all public operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an API precondition (shape mismatch, invalid flag, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite value produced during computation; carries the first
    /// offending tape node when known.
    #[error("numeric error at node {node}: {message}")]
    Numeric { node: usize, message: String },

    /// Dempster combination with conflict mass at (or numerically at) 1.
    #[error("total conflict between opinions (pair index {pair_index}): conflict mass {conflict}")]
    TotalConflict { pair_index: usize, conflict: f64 },

    /// Dataset ingestion failure; names the file and 1-based line where known.
    #[error("data error in {file} (line {line}): {message}")]
    Load {
        file: String,
        line: usize,
        message: String,
    },

    /// Generic dataset/shape failure not tied to a file location.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Training diverged or produced non-finite losses.
    #[error("training error at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    /// Filesystem failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Serialization/deserialization failure.
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
