//! Dense tensor math with reverse-mode differentiation.
//!
//! Training runs in f32; every gradient-check suite runs the same
//! generic kernels in f64, where central finite differences are a
//! trustworthy oracle.

mod adam;
mod error;
mod grad_check;
pub mod op_checks;
pub mod ops;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{NumericsError, Result};
pub use grad_check::{grad_check, GradCheckReport};
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape};
pub use tensor::Tensor;
