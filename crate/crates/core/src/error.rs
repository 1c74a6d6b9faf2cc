//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("at iteration {iter}: {source}")]
    AtIteration {
        iter: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn at_iteration(iter: usize, source: Error) -> Self {
        Error::AtIteration {
            iter,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
