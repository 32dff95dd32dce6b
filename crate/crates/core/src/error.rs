use thiserror::Error;

/// Errors shared across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("gradient oracle failed at coordinate {coordinate}: {message}")]
    OracleFailure { coordinate: usize, message: String },

    #[error("optimizer failure: {0}")]
    OptimizerFailure(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("round {round} failed: {source}")]
    RoundFailed {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
