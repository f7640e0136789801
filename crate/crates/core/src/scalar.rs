//! Scalar abstraction for the geometry and least-squares code.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};

/// Floating point scalar usable by the geometry and solver modules: `f32` or `f64`.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + Debug + Send + Sync + 'static
{
    /// Smallest tolerance the type can honour for checks that are specified
    /// at `1e-9`-ish levels in double precision.
    fn tolerance_floor() -> Self;

    /// Converts an `f64` literal or parameter into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every supported scalar")
    }

    /// `max(requested, tolerance_floor())`, with `requested` given in f64.
    #[inline]
    fn tol(requested: f64) -> Self {
        let r = Self::lit(requested);
        if r > Self::tolerance_floor() {
            r
        } else {
            Self::tolerance_floor()
        }
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    #[inline]
    fn tolerance_floor() -> Self {
        1e-13
    }
}

impl Scalar for f32 {
    #[inline]
    fn tolerance_floor() -> Self {
        1e-5
    }
}
