//! Dense tensors and a reverse-mode autodiff tape.

mod tape;
mod tensor;

pub use tape::{Tape, Var, DIV_GUARD, IGNORE_INDEX};
pub(crate) use tape::sigmoid;
pub use tensor::{DType, Float, Tensor};
pub(crate) use tensor::gemm_into;
