//! Scalar abstraction for everything numeric in this crate.
//!
//! All of the math is generic over [`Real`], which is any IEEE float with
//! the `num_traits` conversions we need. The harness instantiates `f64`
//! (the experiments span many orders of magnitude of target scale and
//! single precision would confound them), but the whole stack also works
//! at `f32`.

use std::fmt::{Debug, Display};

use num_traits::float::FloatConst;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A floating-point scalar usable throughout the crate: `f32` or `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Short name written into checkpoint headers ("f32" / "f64").
    fn scalar_name() -> &'static str;

    /// Raw IEEE bits widened to `u64`, for bit-exact serialization.
    fn to_bits_u64(self) -> u64;

    /// Inverse of [`Real::to_bits_u64`].
    fn from_bits_u64(bits: u64) -> Self;
}

impl Real for f32 {
    fn scalar_name() -> &'static str {
        "f32"
    }

    fn to_bits_u64(self) -> u64 {
        u64::from(self.to_bits())
    }

    fn from_bits_u64(bits: u64) -> Self {
        f32::from_bits(bits as u32)
    }
}

impl Real for f64 {
    fn scalar_name() -> &'static str {
        "f64"
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }

    fn from_bits_u64(bits: u64) -> Self {
        f64::from_bits(bits)
    }
}

/// Converts an `f64` constant into `T`. Panics only if `T` cannot represent
/// any rounding of the value, which cannot happen for the float types this
/// crate supports.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant not representable in scalar type")
}

/// Converts an integer count into `T` (rounding to nearest for large values).
#[inline]
pub fn real_from_u128<T: Real>(x: u128) -> T {
    T::from_u128(x)
        .or_else(|| T::from_f64(x as f64))
        .expect("count not representable in scalar type")
}
