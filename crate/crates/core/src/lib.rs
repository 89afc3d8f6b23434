//! Robustness refinement of trained models with zeroth-order updates.
//!
//! The pipeline aligns a model with first-order SGD, scores each layer by how
//! much its loss moves under weight noise and quantization, and then refines
//! only the most sensitive layers with a two-point zeroth-order gradient
//! estimator. Analytic objectives with known constants make the estimator
//! and convergence behaviour checkable against closed forms.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod params;
pub mod perturb;
pub mod pipeline;
pub mod rng;
pub mod sensitivity;
pub mod trainer;
pub mod verify;
pub mod zo;

pub use error::{Error, Result};
