//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A key column contains the same identifier more than once.
    #[error("duplicate identifier {id:?} in {table} table")]
    DuplicateKey { table: String, id: String },

    /// Input data does not conform to the declared schema.
    #[error("schema violation: {0}")]
    SchemaViolation(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    ConfigError(String),

    /// An index is outside the valid range.
    #[error("index out of range: {what} = {index}, valid range 0..{bound}")]
    IndexError {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// Tensor operands have incompatible shapes.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeError {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    /// A gradient became NaN or infinite during training.
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    /// A metric has no defined value on this input (e.g. single-class AUROC).
    #[error("metric {0} is undefined on this input")]
    UndefinedMetric(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn csv(path: impl AsRef<std::path::Path>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
