//! Scalar abstraction for the numeric core.
//!
//! Everything numeric (tensors, tape ops, losses, prototype algebra, metrics)
//! is generic over [`Scalar`]. The crate root exposes `f64` aliases, which is
//! what the trainer and CLI use; `f32` is available for callers that want the
//! smaller footprint and can live with looser tolerances.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the numeric core is generic over.
pub trait Scalar:
    Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const TWO: Self;
    const HALF: Self;

    /// Convert an `f64` literal (tolerances, loss constants) into `Self`.
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 literal not representable")
    }

    /// Widen to `f64` for reporting and serialization.
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar not convertible to f64")
    }

    /// Convert a count into `Self` (used by mean reductions).
    fn from_count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count not representable")
    }
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const TWO: Self = 2.0;
            const HALF: Self = 0.5;
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
