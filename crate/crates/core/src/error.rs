//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A text input (node/edge file, CSV) could not be parsed.
    #[error("parse error in {path}, line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A graph or schedule violates a structural invariant.
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    /// Matrix or vector dimensions do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A function argument is out of its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Experiment or strategy configuration is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dense Fisher matrices are test-time oracles; refuse large models.
    #[error("parameter dimension {dim} exceeds the dense Fisher guard ({max})")]
    FimSizeGuard { dim: usize, max: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
