//! Scalar abstraction for tensor elements.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Element type of tensors and kernels.
///
/// All reductions in this crate accumulate through [`Scalar::to_acc`] (f64)
/// in a fixed order, so results are deterministic and f32 storage does not
/// degrade long sums. Gradient checks instantiate the same kernels at f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Default
    + Copy
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    /// Widens to the accumulator type.
    fn to_acc(self) -> f64;

    /// Narrows from the accumulator type.
    fn from_acc(a: f64) -> Self;
}

impl Scalar for f32 {
    #[inline(always)]
    fn to_acc(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_acc(a: f64) -> Self {
        a as f32
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn to_acc(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_acc(a: f64) -> Self {
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<S: Scalar>(x: S) -> S {
        S::from_acc(x.to_acc())
    }

    #[test]
    fn acc_roundtrip_is_exact() {
        assert_eq!(roundtrip(1.25f32), 1.25f32);
        assert_eq!(roundtrip(-3.0e-8f32), -3.0e-8f32);
        assert_eq!(roundtrip(1.25f64), 1.25f64);
        assert_eq!(roundtrip(f64::MIN_POSITIVE), f64::MIN_POSITIVE);
    }
}
