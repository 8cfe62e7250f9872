//! Scalar abstraction: the whole engine is generic over `f32`/`f64`.

use std::fmt::{Debug, Display, LowerExp};

/// Floating-point scalar the engine runs on.
///
/// `f64` is used by gradient checks and oracle tests (finite differences need
/// the headroom), `f32` by training runs.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Widening conversion (exact for both supported types). Named to avoid
    /// clashing with `ToPrimitive::to_f64`.
    fn as_f64(self) -> f64;
    /// Conversion from `f64`; rounds for `f32`.
    fn of(x: f64) -> Self;
    /// Serialized form is always little-endian `f32`.
    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Real for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn of(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    fn as_f64(self) -> f64 {
        self
    }
    fn of(x: f64) -> Self {
        x
    }
}

/// Shorthand for `T::of`, readable at call sites with many constants.
#[inline]
pub fn rl<T: Real>(x: f64) -> T {
    T::of(x)
}
