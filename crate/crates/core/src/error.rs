use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("label {label:?} in {split} split is not in the training vocabulary")]
    OutOfVocabulary { label: String, split: String },

    #[error("index {index} out of range for {what} (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("all {0} grid points failed")]
    AllRunsFailed(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category, used for the CLI's one-line error output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Empty(_) => "empty-input",
            Error::OutOfVocabulary { .. } => "oov",
            Error::IndexOutOfRange { .. } => "index",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Training { source, .. } => source.category(),
            Error::AllRunsFailed(_) => "gridsearch",
        }
    }
}
