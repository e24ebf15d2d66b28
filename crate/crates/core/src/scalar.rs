//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Tensors, models and losses are generic over [`Scalar`], which is
//! implemented for `f32` (the default compute precision) and `f64` (used by
//! gradient checks). BF16 is not a storage type; it is emulated by rounding
//! through [`Scalar::round_bf16`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Precision tag carried by a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Float64,
    Float32,
    /// Values stored at the scalar's native width but exactly representable
    /// in bfloat16.
    Bfloat16,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Float64 => "float64",
            Precision::Float32 => "float32",
            Precision::Bfloat16 => "bfloat16",
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Native precision of the type.
    const PRECISION: Precision;

    /// Round to the nearest bfloat16 value (ties to even), returned at the
    /// native width. Infinities and NaN pass through.
    fn round_bf16(self) -> Self;

    /// Lossless-or-nearest conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

/// Largest finite bfloat16 value.
pub const BF16_MAX: f64 = 3.389_531_389_251_535_5e38;

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Float32;

    fn round_bf16(self) -> f32 {
        if !self.is_finite() {
            return self;
        }
        let bits = self.to_bits();
        let lsb = (bits >> 16) & 1;
        let rounded = bits.wrapping_add(0x7FFF + lsb) & 0xFFFF_0000;
        f32::from_bits(rounded)
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Float64;

    fn round_bf16(self) -> f64 {
        if !self.is_finite() || self == 0.0 {
            return self;
        }
        let mag = self.abs();
        // Below the f32/bf16 normal range the spacing is fixed at 2^-133.
        let min_normal = 2f64.powi(-126);
        let rounded = if mag < min_normal {
            let quantum = 2f64.powi(-133);
            round_half_even(mag / quantum) * quantum
        } else {
            // Keep 7 explicit mantissa bits out of f64's 52.
            let bits = mag.to_bits();
            let drop = 52 - 7;
            let lsb = (bits >> drop) & 1;
            let half = (1u64 << (drop - 1)) - 1;
            let r = (bits + half + lsb) & !((1u64 << drop) - 1);
            f64::from_bits(r)
        };
        let rounded = if rounded > BF16_MAX {
            f64::INFINITY
        } else {
            rounded
        };
        rounded.copysign(self)
    }
}

fn round_half_even(x: f64) -> f64 {
    let r = x.round();
    if (x - x.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - x.signum()
    } else {
        r
    }
}
