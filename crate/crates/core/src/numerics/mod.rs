//! Dense tensors, reverse-mode differentiation and the optimizer.
//!
//! Only the operations the policy and trainer use are provided.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, StepOutcome};
pub use gradcheck::grad_check;
pub use tape::{AttentionShape, Gradients, MaskLayout, Tape, Var, UNAVAILABLE_LOGP};
pub use tensor::Tensor;
