//! Scalar abstraction for the real-valued side of the pipeline.
//!
//! Everything that runs in real arithmetic (calibration, the float
//! oracle, fake quantization) is generic over [`Real`] so the same code
//! instantiates at `f32` and `f64`. The bit-exact equivalence between
//! the integer datapath and the fake-quant path is only guaranteed at
//! `f64`: reconstruction of a 32-bit accumulator from dequantized
//! carriers needs more mantissa bits than `f32` has once dot products
//! get long.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
}

/// Shorthand for pulling an `f64` constant into the generic scalar.
#[inline]
pub fn r<R: Real>(x: f64) -> R {
    R::from_f64(x).expect("f64 constant representable in scalar type")
}

/// Round half away from zero, the rounding mode used everywhere in the
/// quantizer. `Float::round` already has these semantics; the alias
/// exists so call sites say what they mean.
#[inline]
pub fn round_half_away<R: Real>(x: R) -> R {
    x.round()
}

/// tanh-form GELU. Both the float oracle and the LUT builder use this
/// exact function, so the LUT is the quantization of the oracle's
/// activation rather than an approximation of a different one.
pub fn gelu<R: Real>(x: R) -> R {
    let c = r::<R>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = r::<R>(0.044_715);
    let half = r::<R>(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (R::one() + inner.tanh())
}
