//! Desk-scale vision-language models on synthetic grid scenes.
//!
//! The crate swaps vision-encoder pretraining objectives and positional
//! encoding schemes inside a fixed fusion pipeline, then measures 2D
//! spatial reasoning (relations, counting, localization) on
//! deterministic synthetic benchmarks.

pub mod numerics;
pub mod rope;
pub mod scenegen;
pub mod params;
pub mod checkpoint;
pub mod transformer;
pub mod encoders;
pub mod fusion;
pub mod harness;

pub use numerics::{RngStream, Tensor};
