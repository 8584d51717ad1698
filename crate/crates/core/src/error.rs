use thiserror::Error;

use crate::trace_io::ParseError;

/// Errors raised across the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty input")]
    EmptyInput,

    #[error("missing annotation: {0}")]
    MissingAnnotation(String),

    #[error("state space of {states} exceeds the enumeration cap of {cap}")]
    Resource { states: u64, cap: u64 },

    #[error("training diverged at step {step} (loss = {loss})")]
    Training { step: usize, loss: f64 },

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
