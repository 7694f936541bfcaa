//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Real scalar type a [`crate::Tensor`] can carry.
///
/// Inner products are accumulated in `f64` regardless of the storage type,
/// so the trait exposes explicit widening/narrowing conversions.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Copy + Send + Sync + Debug + Display + Default + 'static
{
    fn to_acc(self) -> f64;
    fn from_acc(v: f64) -> Self;

    /// Little-endian 32-bit encoding used by the checkpoint format.
    fn to_f32(self) -> f32;
    fn from_f32(v: f32) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_acc(v)
    }
}

macro_rules! impl_scalar {
    ($($t:ty)*) => ($(
        impl Scalar for $t {
            #[inline]
            fn to_acc(self) -> f64 {
                self as f64
            }
            #[inline]
            fn from_acc(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }
            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
        }
    )*)
}

impl_scalar!(f32 f64);
