//! Dense tensors and tape-based reverse-mode differentiation.

mod gemm;
pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
