use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Kernel or layer parameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or layer shapes that do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed text input. `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Well-formed input whose values break an invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("truncated weights stream: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("weights stream has {extra} trailing bytes after {expected} expected bytes")]
    TrailingBytes { expected: usize, extra: usize },

    #[error("unsupported image format in {path}: {msg}")]
    UnsupportedFormat { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
