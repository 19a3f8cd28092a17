//! Scalar abstraction for the compute engine: f32 or f64.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the whole engine is generic over.
///
/// The default throughout the workspace is `f64` (gradient checks and
/// run-to-run reproducibility outrank speed at this scale); `f32` is
/// available through the generic modules.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from f64 literals used in configs and math constants.
    fn from_f64_lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal must convert to scalar")
    }

    /// Widen to f64 for reporting and serialization.
    fn to_f64_lit(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
