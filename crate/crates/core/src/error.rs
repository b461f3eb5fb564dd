use std::io;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state space too large: {0}")]
    Capacity(String),

    /// Every particle reached a zero likelihood at the given temperature index.
    #[error("evidence estimation failed at temperature {temperature}")]
    EstimationFailure { temperature: usize },

    #[error("failure budget exceeded: {failures} failed estimates out of {proposals} proposals")]
    FailureBudget { failures: u64, proposals: u64 },

    /// Too many replicate runs of a study failed.
    #[error("{failed} of {total} runs failed")]
    StudyFailed { failed: usize, total: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

impl Error {
    /// True for problems with the inputs rather than with the computation.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::InvalidArgument(_) | Error::Parse(_) | Error::Json(_))
    }
}
