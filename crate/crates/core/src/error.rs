use std::path::PathBuf;

use crate::numerics::ParamVector;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure at coordinate {coord}: {detail}")]
    NumericFailure { coord: usize, detail: String },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("schema error at row {row}: expected {expected} columns, found {found}")]
    Schema {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("insufficient trace: {0}")]
    InsufficientTrace(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence {
        step: usize,
        reason: String,
        weights: Box<ParamVector>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
