//! Static + multivariate-temporal attentive fusion transformer for ICU
//! readmission risk, end to end: a reverse-mode autodiff core, the model
//! itself, the cohort preprocessing pipeline, a planted-signal synthetic
//! cohort generator, and the training/evaluation harness.

pub mod error;
mod kernels;
pub mod blocks;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Result, SmtaError};
