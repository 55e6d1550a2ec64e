//! Scalar abstraction over the floating-point element type.
//!
//! All numeric kernels in this crate are generic over [`Scalar`] so the same
//! code runs at `f32` (the on-disk precision) and `f64` (used by tests and
//! the dense solvers). Concrete `f32` aliases live at the crate root.

use std::cmp::Ordering;
use std::fmt;

pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Total ordering that never panics; distances in this crate are finite,
    /// but sorting must stay deterministic even if a NaN sneaks in.
    fn total_order(self, other: Self) -> Ordering;

    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn total_order(self, other: Self) -> Ordering {
        self.total_cmp(&other)
    }

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn total_order(self, other: Self) -> Ordering {
        self.total_cmp(&other)
    }

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
