//! Scalar abstraction so the numeric kernels run in f32 or f64.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable in every kernel of this crate.
///
/// Implemented by `f32` and `f64` through the blanket impl below.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + std::iter::Sum<Self>
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Conversion from an `f64` constant. Panics if the value has no finite
    /// representation in `Self`, which cannot happen for the compiled-in
    /// constants this is used with.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("constant not representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + LinalgScalar
        + ScalarOperand
        + std::iter::Sum<T>
        + std::fmt::Debug
        + std::fmt::Display
        + Send
        + Sync
        + 'static
{
}
