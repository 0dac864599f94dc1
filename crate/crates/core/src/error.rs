use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("empty table: {0}")]
    EmptyTable(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {term}")]
    NonFinite { term: String },
    #[error("format error: {0}")]
    Format(String),
}

impl From<radiogan_tensor::TensorError> for Error {
    fn from(e: radiogan_tensor::TensorError) -> Self {
        Error::Shape(e.to_string())
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable short tag for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::EmptyTable(_) => "empty_table",
            Error::Dimension { .. } => "dimension",
            Error::Domain(_) => "domain",
            Error::Bounds(_) => "bounds",
            Error::Sampling(_) => "sampling",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non_finite",
            Error::Format(_) => "format",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
