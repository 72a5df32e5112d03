use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty matrix")]
    EmptyMatrix,

    #[error("zero-norm feature (column {column})")]
    ZeroNorm { column: usize },

    #[error("unnormalized feature (column {column} has norm {norm})")]
    Unnormalized { column: usize, norm: f64 },

    #[error("degenerate embedding (column {column} maps to the zero vector)")]
    DegenerateEmbedding { column: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("log-domain violation: entry ({row}, {col}) = {value} is not strictly positive")]
    LogDomain { row: usize, col: usize, value: f64 },

    #[error("oracle scale exceeded: K={negatives}, N={columns}")]
    OracleScale { negatives: usize, columns: usize },

    #[error("batch exceeds bank: {batch} keys for a bank of {capacity}")]
    BatchExceedsBank { batch: usize, capacity: usize },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
