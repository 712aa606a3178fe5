use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("unsupported PNG format in {path}: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("corrupt PNG stream in {path}: {detail}")]
    CorruptStream { path: PathBuf, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid severity {0}, expected 1, 2 or 3")]
    InvalidSeverity(u8),

    #[error("empty mask")]
    EmptyMask,

    #[error("mask has {0} connected components, expected exactly one")]
    MultipleComponents(usize),

    #[error("empty region")]
    EmptyRegion,

    #[error("target area fraction {target:.4} unreachable (best {best:.4})")]
    UnreachableArea { target: f64, best: f64 },

    #[error("degenerate inter-ocular distance")]
    DegenerateNormalizer,

    #[error("oracle failed at iteration {iteration}: {message}")]
    Oracle { iteration: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: (usize, usize), actual: (usize, usize)) -> Self {
        Error::DimensionMismatch {
            expected: format!("{}x{}", expected.0, expected.1),
            actual: format!("{}x{}", actual.0, actual.1),
        }
    }
}
