//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves created with
//! [`Graph::param`] accumulate gradients; everything derived only from
//! constants is evaluated eagerly and left off the tape.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_discrepancy, GradCheckReport, DISCREPANCY_FLOOR};
pub use graph::{Derivative, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("{0}")]
    InvalidArgument(String),
}
