//! Special-function cores: LUT softmax, fixed-point layer
//! normalization, LUT GELU.
//!
//! The softmax core never sees a real exponential: max subtraction
//! keeps `exp` arguments in (-inf, 0], an 8-bit quantized codomain
//! needs only 256 sampling points, and with the LUT step equal to the
//! input quantum the table index is the integer difference itself.
//!
//! The LN core mirrors a 3-stage SIMD pipeline: (1) merge two scaled
//! input vectors into Q16.16 and take the mean, (2) subtract the mean
//! and accumulate the variance, (3) scale by gamma * rsqrt(var + eps),
//! add beta and requantize.

// `!(x > 0)` deliberately rejects NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use crate::error::{Error, Result};
use crate::qnum::{QTensor, Scale8};
use crate::real::{gelu, r, Real};

/// Q16.16 fixed-point value: 32-bit storage, resolution 2^-16,
/// representable magnitude below 2^15.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Fixed(pub i32);

impl Fixed {
    pub const FRAC_BITS: u32 = 16;
    pub const ONE: Fixed = Fixed(1 << 16);

    pub fn from_real<R: Real>(x: R) -> Fixed {
        let v = (x.to_f64().unwrap_or(0.0) * 65536.0).round();
        Fixed(v.clamp(i32::MIN as f64, i32::MAX as f64) as i32)
    }

    pub fn to_real<R: Real>(self) -> R {
        r::<R>(self.0 as f64 / 65536.0)
    }
}

/// Vector of Q16.16 values, the LN core's working representation.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedVec {
    pub values: Vec<Fixed>,
}

/// Layer-norm parameters in signed Q1.6 plus the fixed-point epsilon
/// floor that keeps the zero-variance path finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub gamma: Vec<i8>,
    pub beta: Vec<i8>,
    pub epsilon: Fixed,
}

/// Default LN epsilon, 2^-10 in Q16.16.
pub const LN_EPSILON: Fixed = Fixed(64);

impl LnParams {
    /// Quantize real gamma/beta to Q1.6, saturating at the rails.
    /// Returns the parameter set and the count of saturated values so
    /// importers can report the diagnostic.
    pub fn from_real<R: Real>(gamma: &[R], beta: &[R]) -> (LnParams, usize) {
        let mut saturated = 0usize;
        let q = |v: &R, saturated: &mut usize| -> i8 {
            let x = (v.to_f64().unwrap_or(0.0) * 64.0).round();
            if x > 127.0 {
                *saturated += 1;
                127
            } else if x < -127.0 {
                *saturated += 1;
                -127
            } else {
                x as i8
            }
        };
        let gamma = gamma.iter().map(|v| q(v, &mut saturated)).collect();
        let beta = beta.iter().map(|v| q(v, &mut saturated)).collect();
        (
            LnParams {
                gamma,
                beta,
                epsilon: LN_EPSILON,
            },
            saturated,
        )
    }

    /// Real value of a Q1.6 parameter.
    pub fn param_real<R: Real>(p: i8) -> R {
        r::<R>(p as f64 / 64.0)
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// 256-entry exponential table: index i holds round(255 * exp(-i * delta)).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpLut {
    pub entries: [u8; 256],
    pub input_step: f64,
}

/// Build the table for a given input quantization step.
pub fn build_exp_lut(delta: f64) -> Result<ExpLut> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!(
            "LUT step must be positive, got {delta}"
        )));
    }
    let mut entries = [0u8; 256];
    for (i, e) in entries.iter_mut().enumerate() {
        *e = (255.0 * (-(i as f64) * delta).exp()).round() as u8;
    }
    Ok(ExpLut {
        entries,
        input_step: delta,
    })
}

impl ExpLut {
    /// Table for a softmax input scale: step = one input quantum, so
    /// the index path needs no multiplier.
    pub fn for_scale(scale: Scale8) -> Result<ExpLut> {
        build_exp_lut(1.0 / scale.value())
    }

    /// The raw 256-byte blob, index order (little-endian indexing: byte
    /// k is entry k).
    pub fn to_bytes(&self) -> [u8; 256] {
        self.entries
    }
}

/// Saturating half-away-from-zero rounding of `a / d` for d > 0.
#[inline]
fn round_div(a: i128, d: i128) -> i128 {
    debug_assert!(d > 0);
    let q = (2 * a.abs() + d) / (2 * d);
    if a >= 0 {
        q
    } else {
        -q
    }
}

/// Half-away-from-zero rounding of `a * 2^-shift`.
#[inline]
fn round_shift(a: i128, shift: u32) -> i128 {
    if shift == 0 {
        return a;
    }
    let half = 1i128 << (shift - 1);
    if a >= 0 {
        (a + half) >> shift
    } else {
        -((-a + half) >> shift)
    }
}

/// Scale s_out applied to a Q16.16 value, rounded and saturated to the
/// symmetric k-bit output range.
fn quantize_q16(v: i128, out_scale: Scale8, out_bits: u8) -> i32 {
    let p = v * out_scale.mantissa as i128;
    let k = 16 - out_scale.exp2 as i32;
    let q = if k >= 0 {
        round_shift(p, k as u32)
    } else {
        p << (-k)
    };
    let qmax = ((1i32 << (out_bits - 1)) - 1) as i128;
    q.clamp(-qmax, qmax) as i32
}

/// Integer quantum to Q16.16: round(x * 2^16 / scale).
fn fx_from_scaled(x: i32, scale: Scale8) -> Result<i64> {
    let k = 16 - scale.exp2 as i32;
    let v = if k >= 0 {
        if k > 80 {
            return Err(Error::invalid(format!(
                "scale exponent {} out of LN range",
                scale.exp2
            )));
        }
        round_div((x as i128) << k, scale.mantissa as i128)
    } else {
        if -k > 80 {
            return Err(Error::invalid(format!(
                "scale exponent {} out of LN range",
                scale.exp2
            )));
        }
        round_div(x as i128, (scale.mantissa as i128) << (-k))
    };
    Ok(v as i64)
}

/// LUT softmax over one 8-bit row. Outputs are unsigned Q0.8 with an
/// implicit scale of 256 counts per unit.
pub fn softmax_q(row: &QTensor, lut: &ExpLut) -> Result<QTensor> {
    if row.is_empty() {
        return Err(Error::invalid("softmax row is empty"));
    }
    if row.bits != 8 || !row.signed {
        return Err(Error::invalid("softmax input must be signed 8-bit"));
    }
    let max = *row.data.iter().max().unwrap();
    // Index = difference in input quanta rescaled by step/delta; with
    // the default table that ratio is exactly 1.
    let ratio = (1.0 / row.scale.value()) / lut.input_step;
    let exps: Vec<u32> = row
        .data
        .iter()
        .map(|&v| {
            let d = (max - v) as f64;
            let idx = (d * ratio).round().min(255.0) as usize;
            lut.entries[idx] as u32
        })
        .collect();
    let sum: u64 = exps.iter().map(|&e| e as u64).sum();
    debug_assert!(sum >= 255, "max element always contributes entry[0] = 255");
    let data: Vec<i32> = exps
        .iter()
        .map(|&e| {
            let q = round_div(256 * e as i128, sum as i128);
            q.min(255) as i32
        })
        .collect();
    let out_scale = Scale8 {
        mantissa: 128,
        exp2: 1,
    }; // exactly 256
    QTensor::new(data, 8, false, row.shape.clone(), out_scale)
}

/// Newton-Raphson reciprocal square root in Q16.16. The initial guess
/// is the power-of-two exponent estimate refined by one linear mantissa
/// correction, which keeps three iterations comfortably inside a 2^-10
/// relative error for v in [2^-10, 2^10]. Internals run in Q*.48.
pub fn rsqrt_fixed(v: Fixed, iters: u32) -> Result<Fixed> {
    if v.0 <= 0 {
        return Err(Error::invalid(format!(
            "rsqrt input must be positive, got {}",
            v.0
        )));
    }
    const F: u32 = 48;
    let raw = v.0 as i128; // value = raw * 2^-16
    let v48 = raw << 32;

    // raw in [2^lg, 2^(lg+1)) => value = c * 2^e, e = lg - 16, c in [1, 2).
    let lg = 127 - raw.leading_zeros() as i32;
    let e = lg - 16;
    let c48 = if lg <= 48 {
        raw << (48 - lg)
    } else {
        raw >> (lg - 48)
    };

    // 1/sqrt(c) ~= 1.29289 - 0.29289 c (exact at both interval ends).
    const A48: i128 = 363_910_280_172_699; // round(1.29289322 * 2^48)
    const B48: i128 = 82_435_285_840_547; // round(0.29289322 * 2^48)
    const INV_SQRT2_48: i128 = 199_032_864_766_430; // round(2^48 / sqrt(2))
    let mut y = A48 - round_shift(B48 * c48, F);
    if e.rem_euclid(2) == 1 {
        y = round_shift(y * INV_SQRT2_48, F);
    }
    let half_e = e.div_euclid(2);
    y = if half_e >= 0 {
        y >> half_e
    } else {
        y << (-half_e)
    };

    // y <- y * (3 - v y^2) / 2
    for _ in 0..iters {
        let vy = round_shift(v48 * y, F);
        let vyy = round_shift(vy * y, F);
        let term = (3i128 << F) - vyy;
        y = round_shift(y * term, F + 1);
    }

    let q16 = round_shift(y, 32);
    if q16 > i32::MAX as i128 {
        return Err(Error::invalid("rsqrt result outside Q16.16 range"));
    }
    Ok(Fixed(q16 as i32))
}

/// Fixed-point layer normalization of `x1/s1 + x2/s2` (the residual
/// addition is the first pipeline stage), producing an 8-bit tensor at
/// `out_scale`.
pub fn layernorm_q(
    x1: &QTensor,
    x2: &QTensor,
    p: &LnParams,
    out_bits: u8,
    out_scale: Scale8,
) -> Result<QTensor> {
    let n = x1.len();
    if n == 0 {
        return Err(Error::invalid("layernorm input is empty"));
    }
    if x2.len() != n {
        return Err(Error::invalid(format!(
            "layernorm input lengths differ: {n} vs {}",
            x2.len()
        )));
    }
    if p.gamma.len() != n || p.beta.len() != n {
        return Err(Error::invalid(format!(
            "layernorm parameter length {} does not match hidden dim {n}",
            p.gamma.len()
        )));
    }

    // Stage 1: two scaled inputs -> one Q16.16 vector and its mean.
    let mut v = Vec::with_capacity(n);
    let mut sum = 0i128;
    for i in 0..n {
        let vi = fx_from_scaled(x1.data[i], x1.scale)? + fx_from_scaled(x2.data[i], x2.scale)?;
        sum += vi as i128;
        v.push(vi);
    }
    let mean = round_div(sum, n as i128) as i64;

    // Stage 2: mean subtraction and variance.
    let mut sq = 0i128;
    for vi in v.iter_mut() {
        *vi -= mean;
        sq += (*vi as i128) * (*vi as i128);
    }
    let var_q32 = round_div(sq, n as i128);
    let var = round_shift(var_q32, 16).min(i32::MAX as i128) as i32;

    // Stage 3: element-wise gamma * c * rsqrt(var + eps) + beta.
    let inv = rsqrt_fixed(Fixed(var.saturating_add(p.epsilon.0)), 3)?;
    let data: Vec<i32> = v
        .iter()
        .zip(p.gamma.iter().zip(&p.beta))
        .map(|(&c, (&g, &b))| {
            let t1 = round_shift(c as i128 * inv.0 as i128, 16);
            let t2 = round_shift(t1 * g as i128, 6);
            let t3 = t2 + ((b as i128) << 10);
            quantize_q16(t3, out_scale, out_bits)
        })
        .collect();
    QTensor::new(data, out_bits, true, x1.shape.clone(), out_scale)
}

/// Stage-2 centered vector, exposed for the mean-removal property test.
pub fn ln_centered(x1: &QTensor, x2: &QTensor) -> Result<FixedVec> {
    let n = x1.len();
    if n == 0 || x2.len() != n {
        return Err(Error::invalid("ln_centered needs equal nonempty inputs"));
    }
    let mut v = Vec::with_capacity(n);
    let mut sum = 0i128;
    for i in 0..n {
        let vi = fx_from_scaled(x1.data[i], x1.scale)? + fx_from_scaled(x2.data[i], x2.scale)?;
        sum += vi as i128;
        v.push(vi);
    }
    let mean = round_div(sum, n as i128) as i64;
    Ok(FixedVec {
        values: v
            .into_iter()
            .map(|vi| Fixed((vi - mean).clamp(i32::MIN as i64, i32::MAX as i64) as i32))
            .collect(),
    })
}

/// 256-entry GELU table: index is the 8-bit two's-complement input at
/// `s_in`, entry is the output quantized at `s_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeluLut {
    pub entries: [i8; 256],
}

impl GeluLut {
    pub fn build(s_in: Scale8, s_out: Scale8) -> GeluLut {
        Self::build_raw(s_in.value(), s_out.value())
    }

    pub fn build_raw(s_in: f64, s_out: f64) -> GeluLut {
        let mut entries = [0i8; 256];
        for (idx, e) in entries.iter_mut().enumerate() {
            let x_i = idx as u8 as i8;
            let x = x_i as f64 / s_in;
            let y = (gelu(x) * s_out).round().clamp(-127.0, 127.0);
            *e = y as i8;
        }
        GeluLut { entries }
    }

    #[inline]
    pub fn apply(&self, q: i32) -> i32 {
        self.entries[(q as i8 as u8) as usize] as i32
    }

    /// Element-wise application preserving shape.
    pub fn apply_tensor(&self, x: &QTensor, out_scale: Scale8) -> Result<QTensor> {
        if x.bits != 8 || !x.signed {
            return Err(Error::invalid("GELU LUT input must be signed 8-bit"));
        }
        let data = x.data.iter().map(|&v| self.apply(v)).collect();
        QTensor::new(data, 8, true, x.shape.clone(), out_scale)
    }
}
