//! Two-stage guidance learning for classifiers trained on noisy labels.
//!
//! A teacher network is trained with cross-entropy on all training data. Its
//! temperature-softened predictions on the noisy subset are fused with the
//! noisy labels into guidance targets. A student, initialized from the
//! teacher, then minimizes a KL term on the noisy subset plus cross-entropy
//! on a small clean subset.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which every pipeline and persisted
//! artifact uses.

// Negated comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod nn;
pub mod pipeline;
mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Dataset = data::Dataset<f64>;
pub type Model = nn::ModelParams<f64>;
pub type Model32 = nn::ModelParams<f32>;
pub type Matrix = nn::Matrix<f64>;
pub type ProbVector = nn::ProbVector<f64>;
pub type Gradients = nn::Gradients<f64>;
pub type OptState = nn::OptState<f64>;
pub type GuidanceCache = guidance::GuidanceCache<f64>;
