//! Floating point abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar used for path values, regressions and kernels: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(value: f64) -> Self {
        Self::from_f64(value).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(value: usize) -> Self {
        Self::from_usize(value).unwrap_or_else(Self::nan)
    }

    /// Reciprocal condition number below which a Gram matrix counts as singular.
    fn singular_threshold() -> Self {
        Self::one() / (Self::lit(100.0) * Self::epsilon())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr<T: Scalar>(values: &[T]) -> (T, T) {
    let n = values.len();
    if n == 0 {
        return (T::nan(), T::nan());
    }
    let nf = T::from_usize_lossy(n);
    let mean = values.iter().copied().sum::<T>() / nf;
    if n < 2 {
        return (mean, T::zero());
    }
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::from_usize_lossy(n - 1);
    (mean, (var / nf).sqrt())
}

/// `sqrt(a^2 + b^2)`, the standard error of the difference of two independent estimates.
#[inline]
pub fn combined_stderr<T: Scalar>(a: T, b: T) -> T {
    (a * a + b * b).sqrt()
}
