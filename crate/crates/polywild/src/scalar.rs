//! Scalar traits shared by the generic algebra.

use num_traits::{Float, FromPrimitive, Num};

/// Exact or inexact field element usable by the chain algebra.
pub trait Field: Num + Copy + PartialOrd + std::fmt::Debug {}

impl<T> Field for T where T: Num + Copy + PartialOrd + std::fmt::Debug {}

/// Floating-point scalar used by the matrix and energy code.
pub trait Real: Float + FromPrimitive + std::fmt::Debug + Send + Sync + 'static {}

impl<T> Real for T where T: Float + FromPrimitive + std::fmt::Debug + Send + Sync + 'static {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("literal representable")
}
