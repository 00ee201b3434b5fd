//! Fully connected models, activations and losses.

mod activation;
mod checkpoint;
mod loss;
mod model;
mod problem;

pub use activation::{activation_eval, ActivationKind, ActivationSpec};
pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use loss::{
    batch_grad_z, batch_hess_z_apply, batch_loss, log_sum_exp, loss_eval, softmax, LossEval, LossKind, Target,
};
pub use model::{model_forward, record_forward, Batch, ForwardCache, Model, ModelSpec, ParamSlot, RecordedForward};
pub use problem::{Problem, Recorded};
