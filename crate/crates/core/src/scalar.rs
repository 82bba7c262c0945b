//! Scalar abstraction shared by the numeric modules.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! code runs at f32 (the storage precision used on disk and in checkpoints)
//! and at f64 (handy for tight-tolerance tests). Reductions always accumulate
//! in f64 regardless of the storage scalar; `f64()`/`of()` are the explicit
//! bridges in and out of accumulator space.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps};

pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Widen into the 64-bit accumulator domain.
    fn f64(self) -> f64;

    /// Round from the 64-bit accumulator domain back to storage precision.
    fn of(x: f64) -> Self;
}

impl Scalar for f32 {
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn of(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }

    #[inline(always)]
    fn of(x: f64) -> Self {
        x
    }
}
