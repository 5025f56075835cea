//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine.

mod gradcheck;
mod graph;
pub mod scan;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{
    log_softmax_rows, matmul, rms_norm_rows, sigmoid, silu, softmax_rows, softplus, transpose2,
    vecmat, Tensor,
};

/// Epsilon inside the square root of every RMS normalization.
pub const RMS_EPS: f64 = 1e-6;
