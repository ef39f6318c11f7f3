//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset loading or validation failure.
    #[error("data error: {0}")]
    Data(String),

    /// Shape or mode mismatch between components that must agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Training produced a non-finite loss and was aborted.
    #[error(
        "numeric abort at step {step}: loss={loss}, tau_b={tau_b}, max |logit|={logit_max:.3e}"
    )]
    NumericAbort {
        step: usize,
        loss: f64,
        tau_b: f64,
        logit_max: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
