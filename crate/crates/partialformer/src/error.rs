//! Crate-wide error type for user-facing failures (configuration, file IO,
//! malformed documents, training runtime). Programmer errors such as shape
//! mismatches inside the numeric kernels panic instead.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// Invalid configuration; the message names the offending field(s).
    Config(String),
    /// Filesystem failure with the path that produced it.
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed external document (config JSON, report, checkpoint, override).
    Format(String),
    /// Runtime training failure (e.g. divergence).
    Train(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Format(msg) => write!(f, "malformed input: {msg}"),
            Error::Train(msg) => write!(f, "training failed: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
