use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("non-finite activation in block {block}: {source}")]
    BlockActivation {
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing parameters: {}", .0.join(", "))]
    MissingParams(Vec<String>),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error originates from a NaN/Inf somewhere in a computation.
    pub fn is_non_finite(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => true,
            Error::BlockActivation { source, .. } => source.is_non_finite(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
