//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, reported with both operand shapes.
    #[error("{op}: dimension mismatch {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A numeric precondition failed (non-distribution target, non-scalar loss, ...).
    #[error("invalid value: {0}")]
    Validation(String),

    /// Malformed corpus or vocabulary file content.
    #[error("{path} line {line}: {msg}")]
    Corpus {
        path: String,
        line: usize,
        msg: String,
    },

    /// Bad configuration value or unparsable config file entry.
    #[error("config: {0}")]
    Config(String),

    /// Checkpoint file does not match the expected format or model shape.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
