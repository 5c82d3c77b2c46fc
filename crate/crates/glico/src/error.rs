//! Error type shared across the crate.

/// Errors produced by codebook geometry, model evaluation, training,
/// sampling, data handling and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("degenerate pair: {0}")]
    DegeneratePair(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("missing code for index {0}")]
    MissingCode(usize),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("binding error: {0}")]
    Binding(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
