use std::fmt;
use std::path::PathBuf;

use crate::segmenter::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Where in an input file a parse error was detected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Byte(u64),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(line) => write!(f, "line {line}"),
            Location::Byte(offset) => write!(f, "byte offset {offset}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: Location, message: String },

    #[error("scene format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("trace error: {0}")]
    Trace(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn arg(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
