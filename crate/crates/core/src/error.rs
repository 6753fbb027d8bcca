//! Error taxonomy for the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by simulation, modeling, training, and experiment code.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates an operation's documented domain
    /// (non-positive lengths, even filter taps, mismatched vector sizes, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two objects that must share a grid disagree (sample rates, lengths,
    /// section counts, ...).
    #[error("mismatched grids: {0}")]
    Mismatch(String),

    /// A configuration file or configuration value is unusable.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    /// A persisted artifact (waveform, realization, checkpoint, record) is
    /// malformed.
    #[error("malformed artifact: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn mismatch(msg: impl Into<String>) -> Self {
        Error::Mismatch(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
