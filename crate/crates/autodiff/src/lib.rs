//! Minimal dense tensor library with tape-based reverse-mode automatic
//! differentiation and an Adam optimizer.
//!
//! The op set is deliberately small: matmul (plus a transposed-rhs variant),
//! add, elementwise multiply, scale, concat, slice, row softmax (optionally
//! causal), layer norm, GELU, embedding lookup, row scatter, cross-entropy
//! and sum. Every op validates shapes and rejects non-finite results.

mod adam;
mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport, ScalarFn};
pub use params::{Bindings, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
