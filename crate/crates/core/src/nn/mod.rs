//! Dense numerics: tensors, a reverse-mode tape, MLPs, Adam and checkpoints.

mod adam;
mod check;
mod checkpoint;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamState};
pub use check::{evaluate_with_gradients, finite_diff_check, finite_diff_report, Evaluation, GraphOutputs, TensorCheck};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use mlp::{log_softmax_rows, Activation, Mlp};
pub use params::{ParameterSet, Role};
pub use tape::{Bound, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::squared_distance;
