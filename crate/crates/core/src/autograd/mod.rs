//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Values are created with
//! [`Tape::leaf`] / [`Tape::constant`], combined through the methods on
//! [`Var`], and differentiated with [`Tape::backward`]:
//!
//! ```
//! use vqbridge::autograd::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
//! let loss = x.mul(x).unwrap().sum_all().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! Each op's analytic backward rule lives next to its forward in `ops.rs`;
//! [`grad_check`] compares them against central finite differences.

mod gradcheck;
mod ops;
mod tape;
mod tensor;


pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::cosine_similarity_values;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: zero-norm row {index} in {operand}")]
    ZeroNorm {
        op: &'static str,
        operand: &'static str,
        index: usize,
    },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}
