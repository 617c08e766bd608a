use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("non-finite value in {what}")]
    Numeric { what: String },
    #[error("non-finite value in {what} at step {step}")]
    NumericAtStep { what: String, step: u64 },
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(what: impl Into<String>) -> Self {
        Error::Numeric { what: what.into() }
    }

    /// Attaches a global step index to a numeric error; other variants pass through.
    pub fn at_step(self, step: u64) -> Self {
        match self {
            Error::Numeric { what } => Error::NumericAtStep { what, step },
            other => other,
        }
    }
}
