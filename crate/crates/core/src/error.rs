use thiserror::Error;

use crate::tape::PrimitiveId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("override for {primitive:?} at order {order} is already registered; use replace()")]
    DuplicateOverride { primitive: PrimitiveId, order: u8 },

    #[error("dense extraction needs {params} parameters but the cap is {cap}")]
    CapExceeded { params: usize, cap: usize },

    #[error("unsupported loss: {0}")]
    UnsupportedLoss(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("run diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
