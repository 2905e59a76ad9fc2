//! Dense 64-bit arithmetic with reverse-mode differentiation and a
//! finite-difference oracle.

mod grad;
mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use grad::{eval_loss, finite_diff_check, grad, GradientRecord, ParamSet, FD_REL_FLOOR};
pub use kernels::{dot, l2_normalize, lp_pool, masked_softmax, norm2, softmax, softmax_slice, NORM_FLOOR};
pub use tape::{Gradients, Tape, Var, WeightLayout, LOGVAR_ZERO_FLOOR, PROB_FLOOR};
pub use tensor::Tensor;

pub(crate) use tape::{variance_of, variational_kernel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("non-finite value: {context}")]
    NonFinite { context: String },
    #[error("degenerate norm {norm:e} below 1e-12")]
    DegenerateNorm { norm: f64 },
    #[error("pooling exponent must be >= 1, got {0}")]
    InvalidP(f64),
    #[error("pooling input must be nonnegative, got {0}")]
    NegativePoolInput(f64),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    InvalidStep(f64),
}
