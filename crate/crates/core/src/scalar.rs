//! Floating-point abstraction shared by every numeric routine in the crate.
//!
//! All math is written against [`Scalar`] so it runs unchanged in `f32`
//! (the on-disk precision) and `f64` (used by the reference oracles in tests).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating point: f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("literal representable in scalar type")
    }

    #[inline]
    fn of_f32(v: f32) -> Self {
        <Self as NumCast>::from(v).expect("f32 representable in scalar type")
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        <Self as NumCast>::from(n).expect("count representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logistic sigmoid.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Scales `v` to unit length in place. Returns the original norm; a zero
/// vector is left untouched.
pub fn normalize_in_place<T: Scalar>(v: &mut [T]) -> T {
    let n = l2_norm(v);
    if n > T::zero() {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

pub(crate) fn convert_slice<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::of_f32(x)).collect()
}

pub(crate) fn to_f32_vec<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|&x| x.as_f32()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_reference_points() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((sigmoid(-1.0f32) - 0.268_941_42).abs() < 1e-6);
    }

    #[test]
    fn normalize_leaves_zero_vector() {
        let mut v = [0.0f32; 3];
        assert_eq!(normalize_in_place(&mut v), 0.0);
        assert_eq!(v, [0.0; 3]);
        let mut w = [3.0f64, 4.0];
        assert_eq!(normalize_in_place(&mut w), 5.0);
        assert!((l2_norm(&w) - 1.0).abs() < 1e-15);
    }
}
