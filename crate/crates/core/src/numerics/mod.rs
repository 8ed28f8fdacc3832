//! Dense tensors with tape-based reverse-mode differentiation.

mod conv;
pub mod gradcheck;
mod ops;
mod tape;
mod tensor;
mod warp;

#[cfg(test)]
pub(crate) mod testing;

pub use gradcheck::{grad_check, max_relative_error};
pub use ops::concat;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Real, Tensor};
