//! Scalar abstraction: everything numeric in this crate is generic over a
//! floating-point type implementing [`Real`].
//!
//! The crate root exports `f64` aliases for the main types; `f64` is the
//! precision the verification suites (gradient checks, hyperbolic boundary
//! arithmetic) are specified against. `f32` instantiations exist for
//! interop with the on-disk tensor format, which stores 32-bit payloads.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into `Self`. Lossy for `f32`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant converts to any Real")
    }

    /// Converts `self` to `f64` (exact for `f32` and `f64`).
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
