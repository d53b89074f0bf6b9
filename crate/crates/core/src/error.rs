use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid tape handle: node {0}")]
    InvalidHandle(usize),
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    Vocabulary { token: usize, vocab: usize },
    #[error("sequence of length {len} exceeds limit {max}")]
    Sequence { len: usize, max: usize },
    #[error("checkpoint corrupted: {0}")]
    Corruption(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("kind error: expected {expected}, found {found}")]
    Kind { expected: String, found: String },
    #[error("label error: {0}")]
    Label(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from a numeric failure (used for CLI exit codes).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Training { .. })
    }
}
