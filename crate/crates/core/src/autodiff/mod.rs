//! Reverse-mode differentiation over dense `f64` arrays.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
