//! Reverse-mode differentiation over dense tensors and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
