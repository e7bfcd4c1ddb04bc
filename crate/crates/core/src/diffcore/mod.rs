//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Only the primitives needed by the feature extractor, the pooling
//! operators and the risks are provided. Reductions sum left to right in
//! index order, so two evaluations of the same graph are bitwise identical.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, DEFAULT_EPS};
pub use tape::{gelu, sigmoid, Padding, Tape, Var};
pub use tensor::Tensor;
