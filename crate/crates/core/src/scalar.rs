use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point element type accepted by every tensor, adapter and model.
///
/// Implemented for `f32` and `f64`. Experiments and gradient checks run in
/// `f64`; `f32` is supported for forward/backward but gradient tolerances in
/// the test suite assume double precision.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Gauss error function.
    fn erf(self) -> Self;

    /// Lossless-or-rounding conversion from `f64`.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Dtype tag written into tensor manifests.
    const DTYPE: &'static str;
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    const DTYPE: &'static str = "f64";
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    const DTYPE: &'static str = "f32";
}

/// Standard-normal CDF, `0.5 * (1 + erf(x / sqrt 2))`.
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
}

/// Standard-normal density.
pub fn normal_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::FRAC_2_SQRT_PI() * T::FRAC_1_SQRT_2() * T::of(0.5);
    inv_sqrt_2pi * (-(x * x) * T::of(0.5)).exp()
}
