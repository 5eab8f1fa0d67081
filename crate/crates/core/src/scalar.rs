use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type of every tensor, network and loss.
///
/// Implemented for `f32` (training runs) and `f64` (gradient checks and
/// everything with tight tolerances).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Name written into tensor-file headers of the in-memory type.
    const DTYPE: &'static str;

    /// Gauss error function.
    fn erf(self) -> Self;

    /// Lossless widening (f32) or identity (f64).
    fn to_f64_lossless(self) -> f64;

    fn from_f64_lossy(v: f64) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn to_f64_lossless(self) -> f64 {
        self as f64
    }

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn to_f64_lossless(self) -> f64 {
        self
    }

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}

/// Shorthand for converting an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}
