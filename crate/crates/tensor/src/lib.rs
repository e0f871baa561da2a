//! Dense `f64` tensors with a tape-based reverse-mode autodiff.
//!
//! Everything is single threaded and evaluation order is fixed, so identical
//! inputs give bitwise-identical values and gradients.

mod gemm;
pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use ops::concat_rows;
pub use tape::{Grads, Tape, Var};
pub use tensor::{ShapeError, Tensor};
