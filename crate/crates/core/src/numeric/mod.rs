//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod linear;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use linear::{Linear, LinearVars};
pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{CustomOp, Gradients, RowPlacement, Tape, Var};
pub use tensor::Tensor;
