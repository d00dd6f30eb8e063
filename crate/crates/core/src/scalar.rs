//! Floating point abstraction shared by every numeric routine in the crate.
//!
//! All linear algebra, autodiff, adapter and training code is written against
//! [`Scalar`], which is implemented for `f32` and `f64`. 64-bit is the default
//! everywhere precision matters (oracles, gradient checks); 32-bit is mainly
//! useful for latency measurements.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

/// Real scalar type usable as a matrix element.
pub trait Scalar:
    'static
    + Copy
    + Send
    + Sync
    + Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Sum
    + Debug
    + Display
    + LowerExp
{
    /// Short name used in reports and file headers.
    const NAME: &'static str;

    /// Gauss error function.
    fn erf(self) -> Self;

    /// Lossless for `f64`, rounding for `f32`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Runtime-selectable precision, used by the command line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => f32::NAME,
            Precision::F64 => f64::NAME,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}
