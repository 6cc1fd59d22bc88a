//! Scalar abstraction for pixel and voxel storage.
//!
//! Rasters store values in any `Real` type (`f32` halves memory for large
//! stacks); every reduction and every interpolation weight is computed in
//! `f64`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    fn as_f64(self) -> f64;
    fn of(v: f64) -> Self;
}

impl Real for f32 {
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
}
