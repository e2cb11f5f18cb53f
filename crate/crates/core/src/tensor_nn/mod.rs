//! Minimal differentiable-computation substrate: dense tensors, a
//! reverse-mode tape, the layers used by the factor-graph network, and Adam.

mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_ladder, grad_check_sampled, GradCheckReport, GRAD_CHECK_FLOOR};
pub use layers::{
    Activation, BatchNorm, GruCell, LayerNorm, Linear, Mlp, MlpSpec, Mode, BATCH_NORM_EPS,
    BATCH_NORM_MOMENTUM, LAYER_NORM_EPS,
};
pub use params::{
    AdamConfig, Checkpoint, GroupRecord, Gradients, ParamEntry, ParamKey, ParameterGroup, StatUpdate,
    TensorRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use tape::{sigmoid, softplus, Segments, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl NnError {
    /// Prefixes a shape error with the layer it came from.
    pub(crate) fn in_layer(self, layer: &str) -> Self {
        match self {
            NnError::Shape { op, detail } => NnError::Shape { op, detail: format!("{layer}: {detail}") },
            other => other,
        }
    }
}
