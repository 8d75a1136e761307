//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, NumCast, ToPrimitive};

/// Floating point type usable as the field scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumCast
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
    /// Converts an `f64` literal. Every `Scalar` can represent (a rounding of) any finite f64.
    #[inline(always)]
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 literal representable")
    }

    #[inline(always)]
    fn count(n: usize) -> Self {
        <Self as NumCast>::from(n).expect("usize representable")
    }

    #[inline(always)]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// ln(1 + e^x), evaluated without overflow for large |x|.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else if x < T::lit(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for y > 0.
pub fn softplus_inv<T: Scalar>(y: T) -> T {
    if y > T::lit(30.0) {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// ln(p / (1 - p)).
pub fn logit<T: Scalar>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

const GELU_K: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::lit(GELU_K) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(GELU_K);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// `exp(logit)` clamped to `[lo, hi]`, plus whether the clamp is inactive.
pub fn exp_clamped<T: Scalar>(logit: T, lo: T, hi: T) -> (T, bool) {
    let e = logit.exp();
    if e < lo {
        (lo, false)
    } else if e > hi {
        (hi, false)
    } else {
        (e, true)
    }
}
