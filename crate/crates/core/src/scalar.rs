//! Scalar abstraction for the geometry core.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type usable by the geometric kernels (`f32` or `f64`).
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance used when validating orthonormality of rotations.
    #[inline]
    fn orthonormal_tol() -> Self {
        let eps = Self::default_epsilon() * Self::lit(1.0e3);
        if eps > Self::lit(1.0e-9) {
            eps
        } else {
            Self::lit(1.0e-9)
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}
