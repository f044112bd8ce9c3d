//! Scalar abstraction shared by geometry, autodiff, model and metric code.
//!
//! Everything numeric in the crate is generic over [`Real`], which is
//! implemented for `f32` (training) and `f64` (oracles and gradient checks).

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Name written into file headers ("f32" / "f64").
    const DTYPE: &'static str;

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).unwrap()
}

#[inline]
pub fn from_usize<T: Real>(x: usize) -> T {
    T::from_usize(x).unwrap()
}

/// Wraps an angle in radians to (-pi, pi].
pub fn wrap_angle<T: Real>(a: T) -> T {
    let two_pi = T::PI() + T::PI();
    let mut w = a % two_pi;
    if w <= -T::PI() {
        w += two_pi;
    } else if w > T::PI() {
        w -= two_pi;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_keeps_half_open_interval() {
        assert_eq!(wrap_angle(std::f64::consts::PI), std::f64::consts::PI);
        assert_eq!(wrap_angle(-std::f64::consts::PI), std::f64::consts::PI);
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(0.5f32) - 0.5).abs() < 1e-7);
        assert!((wrap_angle(-7.0f64) - (-7.0 + 2.0 * std::f64::consts::PI)).abs() < 1e-12);
    }
}
