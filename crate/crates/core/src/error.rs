use thiserror::Error;

use crate::autodiff::AutodiffError;

/// Errors raised while building or running the neural components.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{0}: empty input sequence")]
    EmptySequence(&'static str),
    #[error("{what}: length {got} does not match {expected}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
}
