//! Scalar abstraction shared by every numerical routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar the solvers are generic over (`f32` or `f64`).
pub trait Real:
    RealField
    + Copy
    + FromPrimitive
    + ToPrimitive
    + Serialize
    + DeserializeOwned
    + Default
    + Send
    + Sync
    + 'static
{
    /// Machine epsilon of the concrete type.
    const EPS: Self;

    /// Converts an `f64` literal into this scalar.
    fn lit(x: f64) -> Self;

    /// Converts a count into this scalar.
    fn from_count(n: usize) -> Self {
        Self::lit(n as f64)
    }

    fn as_f64(self) -> f64;

    fn is_finite_value(self) -> bool {
        self.as_f64().is_finite()
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const EPS: Self = <$t>::EPSILON;

            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_conversions() {
        assert_eq!(<f32 as Real>::lit(0.5), 0.5f32);
        assert_eq!(<f64 as Real>::from_count(7), 7.0);
        assert!(!<f64 as Real>::lit(f64::NAN).is_finite_value());
    }
}
