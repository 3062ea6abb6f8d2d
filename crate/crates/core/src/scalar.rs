//! Scalar abstraction shared by every numerical module.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar the estimator is generic over (`f32` or `f64`).
///
/// Branch thresholds live here because the right cut-over between a closed
/// form and its series expansion depends on the precision of the type.
pub trait Real:
    RealField
    + Copy
    + FromPrimitive
    + ToPrimitive
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Below this rotation angle `exp`/`log` switch to a second-order Taylor
    /// expansion.
    const SMALL_ANGLE: f64;
    /// `log` refuses rotations whose angle is closer than this to π.
    const PI_MARGIN: f64;
    /// Below this angle the Jacobian coefficient functions use their series.
    const SERIES_ANGLE: f64 = 0.2;
    /// Drift of `RᵀR − I` (max-abs) tolerated before re-orthonormalizing.
    const ORTHO_TOL: f64;

    /// Converts an `f64` literal. Never fails for the implementing types.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f64 {
    const SMALL_ANGLE: f64 = 1e-8;
    const PI_MARGIN: f64 = 1e-6;
    const ORTHO_TOL: f64 = 1e-9;
}

impl Real for f32 {
    const SMALL_ANGLE: f64 = 1e-4;
    const PI_MARGIN: f64 = 1e-3;
    const ORTHO_TOL: f64 = 1e-5;
}
