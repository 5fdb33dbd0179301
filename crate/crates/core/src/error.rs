use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint header at byte offset {offset}: {message}")]
    HeaderParse { offset: u64, message: String },

    #[error("structural error in checkpoint: {0}")]
    Structural(String),

    #[error("unsupported dtype {0:?} (expected \"F32\" or \"F64\")")]
    UnsupportedDtype(String),

    #[error("invalid tensor {name:?}: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("incompatible checkpoints: {}", .names.join(", "))]
    Incompatible { names: Vec<String> },

    #[error("{what} {value} out of range {range}")]
    OutOfRange {
        what: &'static str,
        value: u64,
        range: String,
    },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("non-finite values in layer {layer}")]
    NonFinite { layer: String },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a location (file path, epoch, iteration).
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, stripping any `Context` layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
