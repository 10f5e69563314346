//! Crate-wide error type and the process exit-code contract.

use std::path::Path;

/// Every fallible operation in the crate returns this error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: shape {shape:?} does not hold {len} elements")]
    ShapeLen {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("label row {row} is not one-hot")]
    NotOneHot { row: usize },

    #[error("key of length {got} does not match lock input length {expected}")]
    KeyLength { expected: usize, got: usize },

    #[error("model contains a key-lock layer: key required")]
    KeyRequired,

    #[error("ambiguous label: {negatives} strictly negative entries in the output-bias gradient")]
    AmbiguousLabel { negatives: usize },

    #[error("no active row: every bias-gradient entry is below threshold")]
    NoActiveRow,

    #[error("registry mismatch: {msg}")]
    RegistryMismatch { msg: String },

    #[error("config error: {msg}")]
    Config { msg: String },

    #[error("{path}: format error: {msg}")]
    Format { path: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("internal invariant breach: {msg}")]
    Invariant { msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config { msg: msg.into() }
    }

    pub fn format(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Exit-code contract: 0 success, 2 config error, 3 I/O error,
    /// 4 internal invariant breach.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            _ => 4,
        }
    }
}
