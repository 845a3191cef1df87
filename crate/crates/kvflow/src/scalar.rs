//! Storage scalar abstraction.
//!
//! Keys, values, and queries are stored at a configurable precision (`f32`
//! or `f64`), while every aggregation — dot products, softmax denominators,
//! output sums, norms — runs in `f64`. This mirrors the usual kernel split
//! between a narrow storage dtype and a wide accumulator dtype. All numeric
//! tolerances documented in this crate are for the `f64` instantiation; the
//! `f32` path exists to make storage-precision drift measurable, not to meet
//! those tolerances.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type of stored vectors: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Widen to the accumulation precision.
    fn wide(self) -> f64;

    /// Round from the accumulation precision back to storage.
    fn from_wide(x: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn wide(self) -> f64 {
        f64::from(self)
    }

    #[inline]
    fn from_wide(x: f64) -> f32 {
        x as f32
    }
}

impl Real for f64 {
    #[inline]
    fn wide(self) -> f64 {
        self
    }

    #[inline]
    fn from_wide(x: f64) -> f64 {
        x
    }
}
