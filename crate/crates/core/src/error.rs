use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration produced a non-finite state at step {step}")]
    BlowUp { step: usize },

    #[error("dimension {dim} is degenerate (min == max == {value})")]
    DegenerateDimension { dim: usize, value: f64 },

    #[error("index {index} out of range for axis length {axis_len} (dimension {dim})")]
    IndexOutOfRange { dim: usize, index: usize, axis_len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence of length {len} exceeds context length {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },

    #[error("materialization of {entries} entries exceeds the cap of {cap}")]
    TooLarge { entries: usize, cap: usize },

    #[error("non-finite loss {loss}")]
    NonFiniteLoss { loss: f64 },

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },

    #[error("training diverged in stage {stage} at step {step}: loss {loss}")]
    Diverged { stage: usize, step: usize, loss: f64 },

    #[error("insufficient trajectory length: need {needed} steps, have {have}")]
    TooShort { needed: usize, have: usize },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures that come from numerics (blow-up, divergence, NaN gradients)
    /// rather than from bad input or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::BlowUp { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NonFiniteGradient { .. }
                | Error::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
