use std::io;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated an operation's domain (shape, range, emptiness).
    #[error("domain error: {0}")]
    Domain(String),
    /// Incompatible or malformed configuration / checkpoint.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    /// Loss or parameters became non-finite during training.
    #[error("numeric divergence: {0}")]
    Divergence(String),
    /// A training example could not be built (silent clip); callers resample.
    #[error("example skipped: {0}")]
    SkipExample(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit status used by the command-line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_) | Error::Config(_) | Error::SkipExample(_) => 3,
            Error::Io(_) => 4,
            Error::Divergence(_) => 5,
        }
    }
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        match e {
            hound::Error::IoError(io) => Error::Io(io),
            other => Error::Io(io::Error::new(io::ErrorKind::InvalidData, other.to_string())),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(format!("json: {e}"))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
