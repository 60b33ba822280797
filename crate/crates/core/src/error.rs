//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by numerics, models, solvers and evaluation.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A tensor operation received incompatible shapes. `op` names the
    /// offending operation or block, `detail` the dimensions involved.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// An operation produced NaN or Inf. Non-finite values are never
    /// propagated silently.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: String },

    /// The ODE state went non-finite mid-integration; the step index
    /// localizes the divergence.
    #[error("non-finite state after solver step {step}")]
    NonFiniteState { step: usize },

    #[error("unknown parameter '{0}'")]
    UnknownParam(String),

    #[error("duplicate parameter '{0}'")]
    DuplicateParam(String),

    /// An optimizer step was requested while some parameters have no
    /// accumulated gradient.
    #[error("gradients missing for parameters: {}", .0.join(", "))]
    MissingGradients(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Dataset(#[from] crate::synthdata::DatasetError),

    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::ShapeMismatch {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }
}
