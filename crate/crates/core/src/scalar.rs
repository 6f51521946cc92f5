//! Floating-point scalar abstraction.
//!
//! Everything numerical in this crate is generic over [`Scalar`] so the
//! same model, training, and analysis code runs in `f32` or `f64`.  The
//! crate root exports concrete aliases (`Matrix64`, `Dataset32`, ...) for
//! callers that do not care about the genericity; `f64` is the precision
//! used by the CLI and the acceptance runs.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::Neg;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point element type for matrices, models, and training.
///
/// Bundles the `num_traits` capabilities the numeric kernels need with a
/// few conveniences that the generic traits do not offer directly:
/// conversion helpers that cannot fail for IEEE floats, a total ordering
/// (needed when ranking weight magnitudes), and standard-normal sampling.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Neg<Output = Self>
    + Sum<Self>
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy-but-total conversion from `f64` (used for hyperparameters).
    fn from_f64_c(x: f64) -> Self;

    /// Widening conversion to `f64` (used for metrics and reports).
    fn as_f64(self) -> f64;

    /// IEEE total order, so sorting never panics on NaN.
    fn total_order(&self, other: &Self) -> std::cmp::Ordering;

    /// Draw one sample from the standard normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64_c(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn total_order(&self, other: &Self) -> std::cmp::Ordering {
                self.total_cmp(other)
            }

            #[inline]
            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                <StandardNormal as Distribution<$t>>::sample(&StandardNormal, rng)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
