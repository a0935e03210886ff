use std::io;

use thiserror::Error;

use crate::finetune::LossPoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition or shape contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation is not legal in the session's current workflow state.
    #[error("illegal state: {0}")]
    State(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("finetune aborted at step {step}: {reason}")]
    FinetuneAborted {
        step: usize,
        reason: String,
        partial_curve: Vec<LossPoint>,
    },

    #[error("degenerate projection reference: |e_opt| = {norm:e}")]
    DegenerateReference { norm: f64 },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("captioner unavailable: {0}")]
    CaptionerUnavailable(String),

    #[error("remote backend: {0}")]
    Remote(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    /// True for errors caused by bad caller input rather than the system.
    pub fn is_contract(&self) -> bool {
        matches!(
            self,
            Error::Contract(_) | Error::DegenerateReference { .. } | Error::Config(_)
        )
    }
}
