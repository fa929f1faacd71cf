//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),
    /// Two images with different grids were combined.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    /// The standard visible-energy formula left its physical regime.
    #[error("unphysical regime: {0}")]
    Unphysical(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
