use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths of the inputs disagree with each other or with the game.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A transition kernel produced something that is not a probability vector.
    #[error("kernel integrity error at (state {state}, action {action}): {reason}")]
    KernelIntegrity {
        state: usize,
        action: usize,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A value became NaN or infinite during optimisation.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A persisted artifact is internally inconsistent (truncated, wrong counts, ...).
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn argument(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
