//! Floating point scalar abstraction.
//!
//! Every numeric routine in the crate is written against [`Scalar`] so the
//! same code runs in `f32` or `f64`. Training, gradient checks and all
//! persisted artifacts use `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::distr::uniform::SampleUniform;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type usable for network parameters and probabilities.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + SampleUniform
    + 'static
{
    /// Absolute tolerance used when checking that a distribution sums to one.
    const PROB_TOLERANCE: f64;

    /// Converts an `f64` literal, panicking only on types that cannot hold it.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const PROB_TOLERANCE: f64 = 1e-5;
}

impl Scalar for f64 {
    const PROB_TOLERANCE: f64 = 1e-9;
}

/// Lower clamp applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
