//! Error taxonomy shared across the engine.
//!
//! The CLI maps these onto process exit codes: config errors → 2, IO/format
//! errors → 3, numeric failures → 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement in a math op.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration or arguments, detected before any work.
    #[error("config error: {0}")]
    Config(String),

    /// File IO failure, with the path that failed.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Binary file does not match its declared format.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    /// Numeric contract violation (non-finite loss, degenerate geometry, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    /// Exit code the CLI reports for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Dimension(_) | Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
