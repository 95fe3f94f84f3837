//! Tensor arithmetic, reverse-mode differentiation and gradient checking.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{l2_normalize_rows, layer_norm, matmul, relu, sigmoid, softmax_rows, Tensor};
