//! Dense tensors and a reverse-mode gradient tape.

mod kernels;
mod tape;
mod tensor;

pub use kernels::{gelu, log_sum_exp, sigmoid};
pub use tape::{Gradients, Tape, Var, MASK_PENALTY};
pub use tensor::{Scalar, Tensor};

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("buffer of length {len} does not fill shape {shape:?}")]
    BufferLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("non-finite value at flat index {index} produced by {op}")]
    NonFinite { op: &'static str, index: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

#[cfg(test)]
mod tests;
