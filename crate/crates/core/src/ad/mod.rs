//! Minimal reverse-mode automatic differentiation over a recorded tape.

mod check;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
