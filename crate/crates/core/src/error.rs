use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("document '{doc}': {message}")]
    InvalidDocument { doc: String, message: String },

    #[error("duplicate id '{id}' on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },

    #[error("unknown label id '{0}'")]
    UnknownLabel(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("empty span")]
    EmptySpan,

    #[error("no negatives supplied")]
    NoNegatives,

    #[error("allowed label set is empty")]
    EmptyAllowedSet,

    #[error("cannot chunk document '{doc}': {message}")]
    Chunking { doc: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("malformed binary file: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad user input rather than an
    /// environment or internal failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Format(_))
    }
}
