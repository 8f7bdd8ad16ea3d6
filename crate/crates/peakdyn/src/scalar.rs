//! Scalar trait used by the generic parts of the crate.

use num_traits::{Float, FloatConst, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point scalar accepted by the kernel and stationary code.
pub trait Real:
    Float + FloatConst + FromPrimitive + Debug + Display + Sum + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// Lossy conversion to `f64`, used for reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    /// `2^x`.
    fn pow2(x: Self) -> Self {
        (x * Self::LN_2()).exp()
    }

    /// `ln(exp(a) + exp(b))` without overflow.
    fn log_add_exp(a: Self, b: Self) -> Self {
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        if hi == Self::neg_infinity() {
            return hi;
        }
        hi + (lo - hi).exp().ln_1p()
    }
}

impl Real for f32 {}
impl Real for f64 {}
