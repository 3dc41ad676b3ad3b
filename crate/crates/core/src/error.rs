use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the volume engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid affine: {0}")]
    Affine(String),

    #[error("index {index:?} out of bounds for spatial dims {dims:?}")]
    IndexOutOfBounds { index: Vec<i64>, dims: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported data type code {0}")]
    UnsupportedDtype(i32),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("compressed NIfTI unsupported: {0} is gzip-compressed; decompress it first (e.g. `gunzip -k`)")]
    CompressedNifti(PathBuf),

    #[error("format error: {0}")]
    Format(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing dictionary key '{0}'")]
    MissingKey(String),

    #[error("step '{step}' failed: {source}")]
    Step {
        step: String,
        #[source]
        source: Box<Error>,
    },

    #[error("transform '{0}' is not invertible")]
    NotInvertible(String),

    #[error("unknown transform '{0}'")]
    UnknownTransform(String),

    #[error("trace stack is empty")]
    EmptyTrace,

    #[error("predictor error: {0}")]
    Predictor(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_step(self, step: &str) -> Self {
        Error::Step {
            step: step.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping step attribution wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            e => e,
        }
    }
}
