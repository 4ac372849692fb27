use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("rank {0} exceeds the supported maximum of 5")]
    Rank(usize),

    #[error("patch grid n={n} does not divide feature size {h}x{w}")]
    Divisibility { n: usize, h: usize, w: usize },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("query row {0} has an empty key set")]
    EmptyKeySet(usize),

    #[error("sequence too short: {0}")]
    TooShort(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite loss at iteration {iter}")]
    Diverged { iter: usize },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("dimension mismatch in {path}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        path: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
