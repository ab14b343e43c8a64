//! Symmetric linear quantization numerics.
//!
//! Reals map to integers as `x_I = round(clamp(x, -MAX, MAX) * s)` and
//! back as `x_q = x_I / s`; scales are counts-per-unit. Weight scales
//! come from the tensor maximum, activation scales from an EMA of
//! per-batch maxima. Scales themselves are stored as 8-bit normalized
//! mantissas with a power-of-two exponent, and accumulators return to
//! 8-bit activations through a 32-bit fixed-point multiplier plus
//! right shift.

// `!(x > 0)` deliberately rejects NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use crate::error::{Error, Result};
use crate::real::{r, round_half_away, Real};

/// Rounding mode carried by a [`QuantSpec`]. Only one mode exists in
/// this pipeline; the enum keeps the policy explicit at call sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rounding {
    #[default]
    HalfAwayFromZero,
}

/// Per-tensor quantization policy: bitwidth, symmetric clip threshold,
/// and the EMA state used to calibrate activation tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSpec<R: Real> {
    pub bits: u8,
    pub max_clip: R,
    pub rounding: Rounding,
    pub ema_decay: R,
    pub ema_state: Option<R>,
}

impl<R: Real> QuantSpec<R> {
    pub fn new(bits: u8, max_clip: R, ema_decay: R) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::invalid(format!("bitwidth {bits} outside 2..=8")));
        }
        if !(max_clip > R::zero()) {
            return Err(Error::invalid("max_clip must be positive"));
        }
        if !(ema_decay > R::zero() && ema_decay < R::one()) {
            return Err(Error::invalid("ema_decay must lie in (0, 1)"));
        }
        Ok(QuantSpec {
            bits,
            max_clip,
            rounding: Rounding::HalfAwayFromZero,
            ema_decay,
            ema_state: None,
        })
    }

    /// MIN = -MAX under symmetric quantization.
    pub fn min_clip(&self) -> R {
        -self.max_clip
    }

    /// Largest quantized magnitude, `2^(k-1) - 1`.
    pub fn qmax(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }

    /// Fold one batch maximum into the EMA state.
    pub fn observe(&mut self, batch_max: R) {
        self.ema_state = Some(ema_update(self.ema_state, batch_max, self.ema_decay));
    }
}

/// 8-bit scale factor: normalized mantissa in [128, 255] times a power
/// of two. Relative representation error is at most 2^-8.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scale8 {
    pub mantissa: u8,
    pub exp2: i16,
}

impl Scale8 {
    /// Quantize a positive real scale to the normalized 8-bit form,
    /// rounding the mantissa half away from zero.
    pub fn from_real<R: Real>(s: R) -> Result<Scale8> {
        let s = s.to_f64().unwrap_or(f64::NAN);
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::invalid(format!("scale must be positive, got {s}")));
        }
        // s = c * 2^e with c in [1, 2); mantissa = round(c * 128).
        let e = s.log2().floor() as i32;
        let c = s / (e as f64).exp2();
        let mut mantissa = (c * 128.0).round() as u32;
        let mut e = e;
        if mantissa >= 256 {
            mantissa = 128;
            e += 1;
        }
        debug_assert!((128..=255).contains(&mantissa));
        let exp2 = e - 7;
        if exp2 < i16::MIN as i32 || exp2 > i16::MAX as i32 {
            return Err(Error::invalid(format!("scale {s} exponent out of range")));
        }
        Ok(Scale8 {
            mantissa: mantissa as u8,
            exp2: exp2 as i16,
        })
    }

    /// Exact real value `mantissa * 2^exp2`.
    pub fn value(&self) -> f64 {
        self.mantissa as f64 * (self.exp2 as f64).exp2()
    }

    /// The value in an arbitrary scalar type (exact for f32/f64: the
    /// mantissa has 8 significant bits).
    pub fn value_r<R: Real>(&self) -> R {
        r(self.value())
    }
}

/// Integer tensor plus the metadata that makes it meaningful: storage
/// bitwidth, signedness, shape and scale. Elements are held widened to
/// `i32`; the container packs them down on write.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub data: Vec<i32>,
    pub bits: u8,
    pub signed: bool,
    pub shape: Vec<usize>,
    pub scale: Scale8,
}

impl QTensor {
    pub fn new(
        data: Vec<i32>,
        bits: u8,
        signed: bool,
        shape: Vec<usize>,
        scale: Scale8,
    ) -> Result<Self> {
        if !matches!(bits, 4 | 8 | 32) {
            return Err(Error::invalid(format!(
                "storage bitwidth {bits} not in {{4, 8, 32}}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                name: "qtensor".into(),
                expected: shape,
                found: vec![data.len()],
            });
        }
        let t = QTensor {
            data,
            bits,
            signed,
            shape,
            scale,
        };
        let (lo, hi) = t.range();
        if let Some(bad) = t.data.iter().find(|&&v| v < lo || v > hi) {
            return Err(Error::invalid(format!(
                "element {bad} outside {}-bit {} range [{lo}, {hi}]",
                t.bits,
                if t.signed { "signed" } else { "unsigned" }
            )));
        }
        Ok(t)
    }

    /// Full storage range, e.g. [-8, 7] for signed 4-bit. Quantization
    /// itself only produces the symmetric sub-range, but -2^(k-1) is
    /// accepted on input.
    pub fn range(&self) -> (i32, i32) {
        if self.signed {
            let hi = (1i64 << (self.bits - 1)) - 1;
            (-(hi as i32) - 1, hi as i32)
        } else {
            (0, ((1i64 << self.bits) - 1).min(i32::MAX as i64) as i32)
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, row: usize) -> &[i32] {
        let cols = *self.shape.last().expect("row() on empty shape");
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() expects a matrix");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("cols() on empty shape")
    }
}

/// 32-bit fixed-point requantization multiplier: `value = m * 2^-shift`
/// with `m` normalized to [2^30, 2^31).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequantMul {
    pub m: i32,
    pub shift: u8,
}

impl RequantMul {
    /// Build from a real target factor. Normalization keeps 31
    /// significant bits, so the relative error is at most 2^-30.
    pub fn from_target(target: f64) -> Result<RequantMul> {
        if !(target > 0.0) || !target.is_finite() {
            return Err(Error::invalid(format!(
                "requant target must be positive, got {target}"
            )));
        }
        // Want m = round(target * 2^shift) in [2^30, 2^31).
        let shift = 30 - target.log2().floor() as i32;
        if !(0..=62).contains(&shift) {
            return Err(Error::invalid(format!(
                "requant target {target} not representable with a non-negative shift"
            )));
        }
        let mut shift = shift as u8;
        let mut m = (target * (shift as f64).exp2()).round() as i64;
        if m >= 1i64 << 31 {
            // Rounded up across the normalization boundary.
            if shift == 0 {
                return Err(Error::invalid(format!("requant target {target} too large")));
            }
            shift -= 1;
            m = (target * (shift as f64).exp2()).round() as i64;
        }
        debug_assert!((1i64 << 30..1i64 << 31).contains(&m));
        Ok(RequantMul { m: m as i32, shift })
    }

    pub fn value(&self) -> f64 {
        self.m as f64 * (-(self.shift as f64)).exp2()
    }
}

/// `min(max(x, lo), hi)` with an explicit argument check.
pub fn clamp<R: Real>(x: R, lo: R, hi: R) -> Result<R> {
    if lo > hi {
        return Err(Error::invalid(format!(
            "clamp bounds inverted: {lo} > {hi}"
        )));
    }
    Ok(x.max(lo).min(hi))
}

/// Weight scale `(2^(k-1) - 1) / max|W|`.
pub fn weight_scale<R: Real>(w: &[R], bits: u8) -> Result<R> {
    if w.is_empty() {
        return Err(Error::invalid("weight tensor is empty"));
    }
    let max_abs = w.iter().fold(R::zero(), |acc, &v| acc.max(v.abs()));
    if !(max_abs > R::zero()) {
        return Err(Error::DegenerateScale("weight tensor".into()));
    }
    let qmax = r::<R>(((1i32 << (bits - 1)) - 1) as f64);
    Ok(qmax / max_abs)
}

/// EMA recurrence over per-batch maxima; the first observation
/// initializes the state.
pub fn ema_update<R: Real>(state: Option<R>, batch_max: R, decay: R) -> R {
    match state {
        None => batch_max,
        Some(prev) => decay * prev + (R::one() - decay) * batch_max,
    }
}

/// Activation scale `(2^(k-1) - 1) / EMA(max|A|)`.
pub fn act_scale<R: Real>(spec: &QuantSpec<R>) -> Result<R> {
    let ema = spec
        .ema_state
        .ok_or_else(|| Error::NotCalibrated("no EMA state observed".into()))?;
    if !(ema > R::zero()) {
        return Err(Error::NotCalibrated("EMA state is zero".into()));
    }
    Ok(r::<R>(spec.qmax() as f64) / ema)
}

/// Storage bitwidth for a k-bit quantized tensor: nibble-packed when it
/// fits, byte otherwise.
pub fn storage_bits(k: u8) -> u8 {
    if k <= 4 {
        4
    } else {
        8
    }
}

/// Quantize a real tensor: clamp to the policy's clip range, scale,
/// round half away from zero, saturate to the symmetric k-bit range.
pub fn quantize<R: Real>(
    x: &[R],
    spec: &QuantSpec<R>,
    scale: Scale8,
    shape: Vec<usize>,
) -> Result<QTensor> {
    let s = scale.value_r::<R>();
    let qmax = spec.qmax();
    let data = x
        .iter()
        .map(|&v| {
            let c = v.max(spec.min_clip()).min(spec.max_clip);
            let q = round_half_away(c * s).to_i64().unwrap_or(0);
            (q.clamp(-(qmax as i64), qmax as i64)) as i32
        })
        .collect();
    QTensor::new(data, storage_bits(spec.bits), true, shape, scale)
}

/// Inverse map `x_q = x_I / s`.
pub fn dequantize<R: Real>(q: &QTensor) -> Vec<R> {
    let s = q.scale.value_r::<R>();
    q.data.iter().map(|&v| r::<R>(v as f64) / s).collect()
}

/// Quantize biases onto the accumulator grid `s_bias = s_a * s_w`,
/// stored 32-bit. Returns the tensor and the number of elements that
/// saturated at the 32-bit rails (zero for any sane model; silent
/// wraparound is forbidden).
pub fn quantize_bias<R: Real>(b: &[R], s_a: Scale8, s_w: Scale8) -> Result<(QTensor, usize)> {
    let s = s_a.value() * s_w.value();
    let prod_scale = Scale8::from_real(s)?;
    let mut saturated = 0usize;
    let data = b
        .iter()
        .map(|&v| {
            let q = round_half_away(v.to_f64().unwrap_or(0.0) * s);
            if q > i32::MAX as f64 {
                saturated += 1;
                i32::MAX
            } else if q < i32::MIN as f64 {
                saturated += 1;
                i32::MIN
            } else {
                q as i32
            }
        })
        .collect();
    let shape = vec![b.len()];
    Ok((QTensor::new(data, 32, true, shape, prod_scale)?, saturated))
}

/// Requantization multiplier for `s_f = s_y / (s_a * s_w)`.
pub fn requant_multiplier(s_a: Scale8, s_w: Scale8, s_y: Scale8) -> Result<RequantMul> {
    RequantMul::from_target(s_y.value() / (s_a.value() * s_w.value()))
}

/// Saturation rails for a requantized output.
fn out_range(out_bits: u8, out_signed: bool) -> (i64, i64) {
    if out_signed {
        let q = (1i64 << (out_bits - 1)) - 1;
        (-q, q)
    } else {
        (0, (1i64 << out_bits) - 1)
    }
}

/// Round `p * 2^-shift` half away from zero. `p` fits i64 by the
/// callers' construction; the half-add is widened so the edge cases
/// cannot wrap.
#[inline]
fn round_shift(p: i64, shift: u8) -> i64 {
    if shift == 0 {
        return p;
    }
    let half = 1i128 << (shift - 1);
    let p = p as i128;
    let q = if p >= 0 {
        (p + half) >> shift
    } else {
        -((-p + half) >> shift)
    };
    q as i64
}

/// Requantize a widened accumulator: `(sum * m) * 2^-shift`, rounded
/// half away from zero and saturated to the output range.
pub fn requantize_sum(sum: i64, rm: &RequantMul, out_bits: u8, out_signed: bool) -> i32 {
    let p = sum * rm.m as i64; // |sum| <= 2^32, m < 2^31: fits i64
    let q = round_shift(p, rm.shift);
    let (lo, hi) = out_range(out_bits, out_signed);
    q.clamp(lo, hi) as i32
}

/// Accumulator + bias to an output activation:
/// `y = sat(round(((acc + bias) * m) * 2^-shift))`.
pub fn requantize(acc: i32, bias: i32, rm: &RequantMul, out_bits: u8, out_signed: bool) -> i32 {
    requantize_sum(acc as i64 + bias as i64, rm, out_bits, out_signed)
}
