//! Floating-point scalar abstraction: all numerical code is generic over
//! [`Scalar`], instantiated as `f32` or `f64`. The crate-root aliases pin the
//! default pipeline to `f64`, which the tight Cholesky-path tolerances assume.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type for tensors, kernels and the GP objective.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Conversion from `f64` for constants and parsed input.
    fn of(x: f64) -> Self;

    /// Widening (or identity) conversion to `f64` for reporting and serialization.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}
