//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the controller stack is generic over (`f32` or `f64`).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("literal representable in scalar type")
    }

    /// Lossy conversion back to `f64` for logging and export.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance below which a quantity is treated as numerically zero,
    /// floored at a small multiple of machine epsilon so `f32` stays usable.
    #[inline]
    fn tolerance(nominal: f64) -> Self {
        let eps = Self::epsilon() * Self::lit(64.0);
        Self::lit(nominal).max(eps)
    }
}

impl Real for f32 {}
impl Real for f64 {}
