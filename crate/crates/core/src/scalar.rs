//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Models are trained with `f32`; the `f64` instantiation of the same code is
//! what the finite-difference harness differentiates.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal or accumulator.
    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Little-endian IEEE-754 `f32` encoding, the on-disk tensor format.
    fn to_f32_bits(self) -> u32 {
        (self.to_f64_lossy() as f32).to_bits()
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    #[inline]
    fn to_f32_bits(self) -> u32 {
        self.to_bits()
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Sum in 64-bit precision regardless of the storage type.
#[inline]
pub fn sum64<T: Scalar>(xs: &[T]) -> f64 {
    xs.iter().map(|x| x.to_f64_lossy()).sum()
}
