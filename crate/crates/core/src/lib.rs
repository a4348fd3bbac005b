//! Kronecker-sum Gaussian graphical models for multi-modal tensor data.

// Negated comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod io;
pub mod preprocess;
pub mod sparsify;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
