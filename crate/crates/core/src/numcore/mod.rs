//! Dense tensors and a tape-based reverse-mode autodiff engine.

mod scalar;
mod tape;
mod tensor;

pub use scalar::{DType, Scalar};
pub use tape::{sigmoid, softplus, swap_axes, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
