use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the liveness pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing track directory {0}")]
    MissingDirectory(PathBuf),

    #[error("too few frames in {path}: found {found}, need at least 2")]
    TooFewFrames { path: PathBuf, found: usize },

    #[error("inconsistent dimensions in {path}: expected {expected:?}, got {got:?}")]
    InconsistentDimensions {
        path: PathBuf,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{0} must contain both labels")]
    SingleLabel(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("backward called before a recorded forward pass")]
    BackwardBeforeForward,

    #[error("bad file format: {0}")]
    Format(String),

    #[error("track {id}: {source}")]
    Track {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the id of the track it came from.
    pub fn in_track(self, id: &str) -> Self {
        Error::Track {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}
