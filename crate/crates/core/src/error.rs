use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::ImageId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {id}: {reason}")]
    Decode { id: ImageId, reason: String },

    #[error("degenerate image buffer ({width}x{height})")]
    DegenerateImage { width: u32, height: u32 },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("no face detected")]
    NoFace,

    #[error("alignment failed: {0}")]
    Alignment(&'static str),

    #[error("no candidate subject with usable reference images")]
    NoCandidate,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("inconsistent data: {0}")]
    Inconsistent(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Maps the error onto the process exit code used by the command line.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. }
            | Error::Decode { .. }
            | Error::Parse { .. }
            | Error::DimensionMismatch { .. }
            | Error::Inconsistent(_)
            | Error::InvalidInput(_) => 3,
            _ => 4,
        }
    }
}
