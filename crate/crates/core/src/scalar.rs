use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar used throughout the crate (f32 or f64).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    #[inline]
    fn pi() -> Self {
        Self::lit(std::f64::consts::PI)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle<T: Real>(theta: T) -> T {
    let two_pi = T::lit(2.0) * T::pi();
    let mut a = theta % two_pi;
    if a <= -T::pi() {
        a += two_pi;
    } else if a > T::pi() {
        a -= two_pi;
    }
    a
}
