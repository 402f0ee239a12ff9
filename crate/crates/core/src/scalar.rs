use std::fmt;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type the numerical code is generic over: `f32` or `f64`.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + fmt::Display + Send + Sync + 'static
{
    /// Gradient-norm tolerance the iterative solvers aim for at this precision.
    const SOLVER_TOL: f64;

    /// Machine epsilon.
    const EPS: f64;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::of(n as f64)
    }
}

impl Scalar for f32 {
    const SOLVER_TOL: f64 = 1e-3;
    const EPS: f64 = f32::EPSILON as f64;
}

impl Scalar for f64 {
    const SOLVER_TOL: f64 = 1e-6;
    const EPS: f64 = f64::EPSILON;
}
