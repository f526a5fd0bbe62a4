use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, names or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call made in a state that does not allow it.
    #[error("usage error: {0}")]
    Usage(String),

    /// Numerical failure during optimisation.
    #[error("training error at step {step}: {message}")]
    Training { step: u64, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn usage_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
