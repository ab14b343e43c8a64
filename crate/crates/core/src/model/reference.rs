//! Real-arithmetic engines: the float oracle and the configurable
//! hybrid that inserts quantize→dequantize at every site the integer
//! path quantizes.
//!
//! The hybrid engine is the semantic reference for the integer
//! datapath. With every part quantized and Scale8/RequantMul values in
//! play, its carriers sit exactly on the integer grid, so rounding the
//! carrier times the scale recovers the integer tensors bit-exactly
//! (at f64; f32 lacks the mantissa for long dot products). The linear
//! algebra itself stays naive real arithmetic — none of the BIM
//! machinery is shared — which is what makes the equivalence test
//! meaningful.

use super::*;
use crate::qnum::{requantize_sum, RequantMul, Scale8};
use crate::real::{gelu, r, Real};
use crate::specfn::{build_exp_lut, layernorm_q, softmax_q, GeluLut};

// ---------------------------------------------------------------------------
// Float oracle
// ---------------------------------------------------------------------------

fn linear_nb<R: Real>(x: &[R], w: &[R], seq: usize, out: usize, inn: usize) -> Vec<R> {
    let mut y = vec![R::zero(); seq * out];
    for t in 0..seq {
        let xr = &x[t * inn..(t + 1) * inn];
        for o in 0..out {
            let wr = &w[o * inn..(o + 1) * inn];
            let mut acc = R::zero();
            for c in 0..inn {
                acc = acc + wr[c] * xr[c];
            }
            y[t * out + o] = acc;
        }
    }
    y
}

fn add_bias<R: Real>(y: &mut [R], b: &[R], seq: usize, out: usize) {
    for t in 0..seq {
        for o in 0..out {
            y[t * out + o] = y[t * out + o] + b[o];
        }
    }
}

fn real_softmax_row<R: Real>(row: &mut [R]) {
    let max = row.iter().fold(R::neg_infinity(), |a, &v| a.max(v));
    let mut sum = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

type Observer<'a, R> = &'a mut dyn FnMut(&str, &[R]);

fn oracle_impl<R: Real>(
    ids: &[u32],
    fw: &FloatWeights<R>,
    mut obs: Option<Observer<'_, R>>,
) -> Result<Vec<R>> {
    let mc = &fw.config;
    mc.validate()?;
    let seq = ids.len();
    let (h, d, heads, f) = (mc.hidden, mc.head_dim, mc.heads, mc.ffn_dim);
    let eps = r::<R>(ENCODER_LN_EPS);
    let inv_sqrt_d = r::<R>(1.0 / (d as f64).sqrt());

    let emit = |name: String, data: &[R], obs: &mut Option<Observer<'_, R>>| {
        if let Some(cb) = obs.as_deref_mut() {
            cb(&name, data);
        }
    };

    let mut x = embed_sequence(
        ids,
        &fw.tok_emb,
        &fw.pos_emb,
        &fw.seg_emb,
        &fw.emb_ln_gamma,
        &fw.emb_ln_beta,
        mc,
    )?;
    emit("embed_out".into(), &x, &mut obs);

    for (i, l) in fw.layers.iter().enumerate() {
        let mut q = linear_nb(&x, &l.wq, seq, h, h);
        add_bias(&mut q, &l.bq, seq, h);
        let mut k = linear_nb(&x, &l.wk, seq, h, h);
        add_bias(&mut k, &l.bk, seq, h);
        let mut v = linear_nb(&x, &l.wv, seq, h, h);
        add_bias(&mut v, &l.bv, seq, h);
        emit(format!("layer{i}.q"), &q, &mut obs);
        emit(format!("layer{i}.k"), &k, &mut obs);
        emit(format!("layer{i}.v"), &v, &mut obs);

        let mut scores = vec![R::zero(); heads * seq * seq];
        for head in 0..heads {
            let off = head * d;
            for t in 0..seq {
                for j in 0..seq {
                    let mut acc = R::zero();
                    for c in 0..d {
                        acc = acc + q[t * h + off + c] * k[j * h + off + c];
                    }
                    scores[(head * seq + t) * seq + j] = acc * inv_sqrt_d;
                }
            }
        }
        emit(format!("layer{i}.scores"), &scores, &mut obs);

        let mut attn = scores;
        for row in attn.chunks_mut(seq) {
            real_softmax_row(row);
        }

        let mut z = vec![R::zero(); seq * h];
        for head in 0..heads {
            let off = head * d;
            for t in 0..seq {
                for c in 0..d {
                    let mut acc = R::zero();
                    for j in 0..seq {
                        acc = acc + attn[(head * seq + t) * seq + j] * v[j * h + off + c];
                    }
                    z[t * h + off + c] = acc;
                }
            }
        }
        emit(format!("layer{i}.context"), &z, &mut obs);

        let mut attn_out = linear_nb(&z, &l.wo, seq, h, h);
        add_bias(&mut attn_out, &l.bo, seq, h);
        emit(format!("layer{i}.attn_out"), &attn_out, &mut obs);

        let mut u = Vec::with_capacity(seq * h);
        for t in 0..seq {
            let row: Vec<R> = (0..h).map(|c| attn_out[t * h + c] + x[t * h + c]).collect();
            u.extend(real_layernorm(&row, &l.ln1_gamma, &l.ln1_beta, eps));
        }
        emit(format!("layer{i}.ln1_out"), &u, &mut obs);

        let mut f1 = linear_nb(&u, &l.w1, seq, f, h);
        add_bias(&mut f1, &l.b1, seq, f);
        emit(format!("layer{i}.ffn1_out"), &f1, &mut obs);

        let g: Vec<R> = f1.iter().map(|&v| gelu(v)).collect();
        emit(format!("layer{i}.gelu_out"), &g, &mut obs);

        let mut f2 = linear_nb(&g, &l.w2, seq, h, f);
        add_bias(&mut f2, &l.b2, seq, h);
        emit(format!("layer{i}.ffn2_out"), &f2, &mut obs);

        let mut y = Vec::with_capacity(seq * h);
        for t in 0..seq {
            let row: Vec<R> = (0..h).map(|c| f2[t * h + c] + u[t * h + c]).collect();
            y.extend(real_layernorm(&row, &l.ln2_gamma, &l.ln2_beta, eps));
        }
        emit(format!("layer{i}.ln2_out"), &y, &mut obs);
        x = y;
    }

    Ok(head_logits(&x[..h], &fw.head_w, &fw.head_b))
}

/// Standard float encoder stack over a float weight set.
pub fn float_oracle_forward<R: Real>(ids: &[u32], fw: &FloatWeights<R>) -> Result<Vec<R>> {
    oracle_impl(ids, fw, None)
}

/// Oracle with an activation observer, used by calibration to record
/// per-site maxima.
pub fn float_oracle_traced<R: Real>(
    ids: &[u32],
    fw: &FloatWeights<R>,
    obs: &mut dyn FnMut(&str, &[R]),
) -> Result<Vec<R>> {
    oracle_impl(ids, fw, Some(obs))
}

// ---------------------------------------------------------------------------
// Hybrid engine
// ---------------------------------------------------------------------------

/// Which parts of the graph run quantized, and with which scale flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnginePlan {
    /// Quantize weights at this bitwidth (`None` = float weights).
    pub weight_bits: Option<u8>,
    /// Quantize activations (and biases) at every site.
    pub quant_acts: bool,
    /// Use Scale8 scales and the integer multiply/shift requantizer
    /// instead of ideal real scales.
    pub scale8: bool,
    /// LUT softmax core instead of real exp.
    pub lut_softmax: bool,
    /// Fixed-point LN core with Q1.6 parameters instead of real LN.
    pub fixed_ln: bool,
}

impl EnginePlan {
    pub fn from_flags(flags: AblationFlags, w_bits: u8) -> EnginePlan {
        EnginePlan {
            weight_bits: flags.quant_weights_acts.then_some(w_bits),
            quant_acts: flags.quant_weights_acts,
            scale8: flags.quant_scale,
            lut_softmax: flags.quant_softmax,
            fixed_ln: flags.quant_layernorm,
        }
    }

    pub fn fake_quant(w_bits: u8) -> EnginePlan {
        Self::from_flags(AblationFlags::all_on(), w_bits)
    }

    /// Weight-only sweep: activations, softmax and LN stay real, and
    /// scales stay ideal so the error measures nothing but the weight
    /// grid.
    pub fn weight_sweep(k: Option<u8>) -> EnginePlan {
        EnginePlan {
            weight_bits: k,
            quant_acts: false,
            scale8: false,
            lut_softmax: false,
            fixed_ln: false,
        }
    }

    fn needs_sites(&self) -> bool {
        self.quant_acts || self.lut_softmax || self.fixed_ln
    }
}

/// Effective weights for one tensor: the values the real matmul uses
/// and the scale that puts them back on the integer grid.
struct EffW<R: Real> {
    w: Vec<R>,
    s_w: f64,
}

fn resolve_weight<R: Real>(
    w_f: &[R],
    stored: Option<&crate::qnum::QTensor>,
    plan: &EnginePlan,
) -> Result<EffW<R>> {
    match plan.weight_bits {
        None => Ok(EffW {
            w: w_f.to_vec(),
            s_w: f64::NAN,
        }),
        Some(k) => {
            if plan.scale8 {
                if let Some(t) = stored {
                    return Ok(EffW {
                        w: crate::qnum::dequantize(t),
                        s_w: t.scale.value(),
                    });
                }
            }
            let s_raw = crate::qnum::weight_scale(w_f, k)?.to_f64().unwrap();
            let s = if plan.scale8 {
                Scale8::from_real(s_raw)?.value()
            } else {
                s_raw
            };
            let ints = site_quantize_ints(w_f, s, k);
            let sr = r::<R>(s);
            Ok(EffW {
                w: ints.iter().map(|&v| r::<R>(v as f64) / sr).collect(),
                s_w: s,
            })
        }
    }
}

fn carrier_from_ints<R: Real>(ints: &[i32], s: f64) -> Vec<R> {
    let sr = r::<R>(s);
    ints.iter().map(|&v| r::<R>(v as f64) / sr).collect()
}

fn reconstruct_acc<R: Real>(lin: &[R], s_prod: f64) -> Vec<i64> {
    let sp = r::<R>(s_prod);
    lin.iter()
        .map(|&v| (v * sp).round().to_i64().unwrap_or(0))
        .collect()
}

fn rec(trace: &mut Option<&mut SiteTrace>, name: String, data: &[i32]) {
    if let Some(t) = trace.as_deref_mut() {
        t.record(name, data);
    }
}

struct HybridCtx<'a> {
    qm: Option<&'a QuantizedModel>,
    plan: EnginePlan,
}

impl HybridCtx<'_> {
    /// Flavor scale value for a site: Scale8 value or the raw EMA scale.
    fn site(&self, name: &str) -> Result<f64> {
        let ss = self
            .qm
            .ok_or_else(|| Error::NotCalibrated(format!("site `{name}` needs a quantized model")))?
            .site_scale(name)?;
        Ok(if self.plan.scale8 {
            ss.q.value()
        } else {
            ss.raw
        })
    }

    fn site8(&self, name: &str) -> Result<Scale8> {
        Scale8::from_real(self.site(name)?)
    }

    /// Projection with bias, then the site treatment: integer-twin
    /// requantization under Scale8, direct grid quantization under raw
    /// scales, passthrough when activations stay real.
    #[allow(clippy::too_many_arguments)]
    fn project<R: Real>(
        &self,
        x: &[R],
        seq: usize,
        out: usize,
        inn: usize,
        eff: &EffW<R>,
        b_f: &[R],
        s_in: f64,
        site_name: &str,
        trace: &mut Option<&mut SiteTrace>,
    ) -> Result<Vec<R>> {
        let mut lin = linear_nb(x, &eff.w, seq, out, inn);
        if !self.plan.quant_acts {
            add_bias(&mut lin, b_f, seq, out);
            return Ok(lin);
        }
        let s_y = self.site(site_name)?;
        if eff.s_w.is_nan() {
            // Float weights with quantized activations: no accumulator
            // grid exists, so quantize the real pre-activations directly.
            add_bias(&mut lin, b_f, seq, out);
            let ints = site_quantize_ints(&lin, s_y, 8);
            rec(trace, site_name.to_string(), &ints);
            return Ok(carrier_from_ints(&ints, s_y));
        }
        let s_prod = s_in * eff.s_w;
        let b_ints: Vec<i64> = b_f
            .iter()
            .map(|&b| (b.to_f64().unwrap() * s_prod).round() as i64)
            .collect();
        let ints: Vec<i32> = if self.plan.scale8 {
            let rm = RequantMul::from_target(s_y / s_prod)?;
            let acc = reconstruct_acc(&lin, s_prod);
            acc.iter()
                .enumerate()
                .map(|(idx, &a)| requantize_sum(a + b_ints[idx % out], &rm, 8, true))
                .collect()
        } else {
            let sp = r::<R>(s_prod);
            let with_bias: Vec<R> = lin
                .iter()
                .enumerate()
                .map(|(idx, &v)| v + r::<R>(b_ints[idx % out] as f64) / sp)
                .collect();
            site_quantize_ints(&with_bias, s_y, 8)
        };
        rec(trace, site_name.to_string(), &ints);
        Ok(carrier_from_ints(&ints, s_y))
    }
}

/// The configurable real-arithmetic engine. `fw` supplies the float
/// parameters; `qm` supplies site scales, stored integer weights and LN
/// parameters whenever the plan quantizes those parts.
fn hybrid_forward<R: Real>(
    ids: &[u32],
    fw: &FloatWeights<R>,
    qm: Option<&QuantizedModel>,
    plan: EnginePlan,
    mut trace: Option<&mut SiteTrace>,
) -> Result<Vec<R>> {
    let mc = &fw.config;
    mc.validate()?;
    if plan.needs_sites() && qm.is_none() {
        return Err(Error::NotCalibrated(
            "plan quantizes activations but no quantized model was supplied".into(),
        ));
    }
    let ctx = HybridCtx { qm, plan };
    let seq = ids.len();
    let (h, d, heads, f) = (mc.hidden, mc.head_dim, mc.heads, mc.ffn_dim);
    let eps = r::<R>(ENCODER_LN_EPS);
    let inv_sqrt_d = r::<R>(1.0 / (d as f64).sqrt());

    let mut x = embed_sequence(
        ids,
        &fw.tok_emb,
        &fw.pos_emb,
        &fw.seg_emb,
        &fw.emb_ln_gamma,
        &fw.emb_ln_beta,
        mc,
    )?;
    if mc.num_layers == 0 {
        return Ok(head_logits(&x[..h], &fw.head_w, &fw.head_b));
    }
    if plan.quant_acts {
        let s0 = ctx.site("embed_out")?;
        let ints = site_quantize_ints(&x, s0, mc.a_bits);
        rec(&mut trace, "embed_out".to_string(), &ints);
        x = carrier_from_ints(&ints, s0);
    }

    for i in 0..mc.num_layers {
        let fl = &fw.layers[i];
        let ql = qm.map(|m| &m.layers[i]);
        let in_site = if i == 0 {
            "embed_out".to_string()
        } else {
            format!("layer{}.ln2_out", i - 1)
        };
        let s_in = if plan.quant_acts {
            ctx.site(&in_site)?
        } else {
            f64::NAN
        };

        let wq = resolve_weight(&fl.wq, ql.map(|l| &l.wq), &plan)?;
        let wk = resolve_weight(&fl.wk, ql.map(|l| &l.wk), &plan)?;
        let wv = resolve_weight(&fl.wv, ql.map(|l| &l.wv), &plan)?;
        let wo = resolve_weight(&fl.wo, ql.map(|l| &l.wo), &plan)?;
        let w1 = resolve_weight(&fl.w1, ql.map(|l| &l.w1), &plan)?;
        let w2 = resolve_weight(&fl.w2, ql.map(|l| &l.w2), &plan)?;

        let q = ctx.project(
            &x,
            seq,
            h,
            h,
            &wq,
            &fl.bq,
            s_in,
            &format!("layer{i}.q"),
            &mut trace,
        )?;
        let k = ctx.project(
            &x,
            seq,
            h,
            h,
            &wk,
            &fl.bk,
            s_in,
            &format!("layer{i}.k"),
            &mut trace,
        )?;
        let v = ctx.project(
            &x,
            seq,
            h,
            h,
            &wv,
            &fl.bv,
            s_in,
            &format!("layer{i}.v"),
            &mut trace,
        )?;

        // Attention scores, activation x activation.
        let mut scores_lin = vec![R::zero(); heads * seq * seq];
        for head in 0..heads {
            let off = head * d;
            for t in 0..seq {
                for j in 0..seq {
                    let mut acc = R::zero();
                    for c in 0..d {
                        acc = acc + q[t * h + off + c] * k[j * h + off + c];
                    }
                    scores_lin[(head * seq + t) * seq + j] = acc;
                }
            }
        }
        let scores: Vec<R> = if plan.quant_acts {
            let s_sc = ctx.site(&format!("layer{i}.scores"))?;
            let ints: Vec<i32> = if plan.scale8 {
                let s_q = ctx.site(&format!("layer{i}.q"))?;
                let s_k = ctx.site(&format!("layer{i}.k"))?;
                let rm = RequantMul::from_target(s_sc / ((d as f64).sqrt() * s_q * s_k))?;
                reconstruct_acc(&scores_lin, s_q * s_k)
                    .iter()
                    .map(|&a| requantize_sum(a, &rm, 8, true))
                    .collect()
            } else {
                let scaled: Vec<R> = scores_lin.iter().map(|&v| v * inv_sqrt_d).collect();
                site_quantize_ints(&scaled, s_sc, 8)
            };
            rec(&mut trace, format!("layer{i}.scores"), &ints);
            carrier_from_ints(&ints, s_sc)
        } else {
            scores_lin.iter().map(|&v| v * inv_sqrt_d).collect()
        };

        // Softmax rows.
        let attn: Vec<R> = if plan.lut_softmax {
            let s_sc = ctx.site(&format!("layer{i}.scores"))?;
            let s_sc8 = ctx.site8(&format!("layer{i}.scores"))?;
            let lut = build_exp_lut(1.0 / s_sc)?;
            let mut ints = Vec::with_capacity(heads * seq * seq);
            for row in scores.chunks(seq) {
                let row_ints = site_quantize_ints(row, s_sc, 8);
                let row_q = crate::qnum::QTensor::new(row_ints, 8, true, vec![seq], s_sc8)?;
                ints.extend(softmax_q(&row_q, &lut)?.data);
            }
            rec(&mut trace, format!("layer{i}.attn"), &ints);
            carrier_from_ints(&ints, 256.0)
        } else {
            let mut a = scores.clone();
            for row in a.chunks_mut(seq) {
                real_softmax_row(row);
            }
            a
        };

        // Attention-weighted values.
        let mut z_lin = vec![R::zero(); seq * h];
        for head in 0..heads {
            let off = head * d;
            for t in 0..seq {
                for c in 0..d {
                    let mut acc = R::zero();
                    for j in 0..seq {
                        acc = acc + attn[(head * seq + t) * seq + j] * v[j * h + off + c];
                    }
                    z_lin[t * h + off + c] = acc;
                }
            }
        }
        let z: Vec<R> = if plan.quant_acts {
            let s_ctx = ctx.site(&format!("layer{i}.context"))?;
            let ints: Vec<i32> = if plan.scale8 && plan.lut_softmax {
                let s_v = ctx.site(&format!("layer{i}.v"))?;
                let rm = RequantMul::from_target(s_ctx / (256.0 * s_v))?;
                reconstruct_acc(&z_lin, 256.0 * s_v)
                    .iter()
                    .map(|&a| requantize_sum(a, &rm, 8, true))
                    .collect()
            } else {
                site_quantize_ints(&z_lin, s_ctx, 8)
            };
            rec(&mut trace, format!("layer{i}.context"), &ints);
            carrier_from_ints(&ints, s_ctx)
        } else {
            z_lin
        };

        let s_ctx_in = if plan.quant_acts {
            ctx.site(&format!("layer{i}.context"))?
        } else {
            f64::NAN
        };
        let attn_out = ctx.project(
            &z,
            seq,
            h,
            h,
            &wo,
            &fl.bo,
            s_ctx_in,
            &format!("layer{i}.attn_out"),
            &mut trace,
        )?;

        // LN1 with residual.
        let u: Vec<R> = if plan.fixed_ln {
            let ql = ql.expect("fixed LN requires the quantized model");
            let s1 = ctx.site8(&format!("layer{i}.attn_out"))?;
            let s2 = ctx.site8(&in_site)?;
            let so = ctx.site8(&format!("layer{i}.ln1_out"))?;
            let x1_ints = site_quantize_ints(&attn_out, s1.value(), 8);
            let x2_ints = site_quantize_ints(&x, s2.value(), 8);
            let mut ints = Vec::with_capacity(seq * h);
            for t in 0..seq {
                let r1 = crate::qnum::QTensor::new(
                    x1_ints[t * h..(t + 1) * h].to_vec(),
                    8,
                    true,
                    vec![h],
                    s1,
                )?;
                let r2 = crate::qnum::QTensor::new(
                    x2_ints[t * h..(t + 1) * h].to_vec(),
                    8,
                    true,
                    vec![h],
                    s2,
                )?;
                ints.extend(layernorm_q(&r1, &r2, &ql.ln1, 8, so)?.data);
            }
            rec(&mut trace, format!("layer{i}.ln1_out"), &ints);
            carrier_from_ints(&ints, so.value())
        } else {
            let mut u = Vec::with_capacity(seq * h);
            for t in 0..seq {
                let row: Vec<R> = (0..h).map(|c| attn_out[t * h + c] + x[t * h + c]).collect();
                u.extend(real_layernorm(&row, &fl.ln1_gamma, &fl.ln1_beta, eps));
            }
            if plan.quant_acts {
                let s = ctx.site(&format!("layer{i}.ln1_out"))?;
                let ints = site_quantize_ints(&u, s, 8);
                rec(&mut trace, format!("layer{i}.ln1_out"), &ints);
                carrier_from_ints(&ints, s)
            } else {
                u
            }
        };

        let s_u = if plan.quant_acts {
            ctx.site(&format!("layer{i}.ln1_out"))?
        } else {
            f64::NAN
        };
        let f1 = ctx.project(
            &u,
            seq,
            f,
            h,
            &w1,
            &fl.b1,
            s_u,
            &format!("layer{i}.ffn1_out"),
            &mut trace,
        )?;

        let g: Vec<R> = if plan.quant_acts {
            let s_f1 = ctx.site(&format!("layer{i}.ffn1_out"))?;
            let s_g = ctx.site(&format!("layer{i}.gelu_out"))?;
            let lut = GeluLut::build_raw(s_f1, s_g);
            let ints: Vec<i32> = site_quantize_ints(&f1, s_f1, 8)
                .iter()
                .map(|&v| lut.apply(v))
                .collect();
            rec(&mut trace, format!("layer{i}.gelu_out"), &ints);
            carrier_from_ints(&ints, s_g)
        } else {
            f1.iter().map(|&v| gelu(v)).collect()
        };

        let s_g_in = if plan.quant_acts {
            ctx.site(&format!("layer{i}.gelu_out"))?
        } else {
            f64::NAN
        };
        let f2 = ctx.project(
            &g,
            seq,
            h,
            f,
            &w2,
            &fl.b2,
            s_g_in,
            &format!("layer{i}.ffn2_out"),
            &mut trace,
        )?;

        // LN2 with residual from u.
        x = if plan.fixed_ln {
            let ql = ql.expect("fixed LN requires the quantized model");
            let s1 = ctx.site8(&format!("layer{i}.ffn2_out"))?;
            let s2 = ctx.site8(&format!("layer{i}.ln1_out"))?;
            let so = ctx.site8(&format!("layer{i}.ln2_out"))?;
            let x1_ints = site_quantize_ints(&f2, s1.value(), 8);
            let x2_ints = site_quantize_ints(&u, s2.value(), 8);
            let mut ints = Vec::with_capacity(seq * h);
            for t in 0..seq {
                let r1 = crate::qnum::QTensor::new(
                    x1_ints[t * h..(t + 1) * h].to_vec(),
                    8,
                    true,
                    vec![h],
                    s1,
                )?;
                let r2 = crate::qnum::QTensor::new(
                    x2_ints[t * h..(t + 1) * h].to_vec(),
                    8,
                    true,
                    vec![h],
                    s2,
                )?;
                ints.extend(layernorm_q(&r1, &r2, &ql.ln2, 8, so)?.data);
            }
            rec(&mut trace, format!("layer{i}.ln2_out"), &ints);
            carrier_from_ints(&ints, so.value())
        } else {
            let mut y = Vec::with_capacity(seq * h);
            for t in 0..seq {
                let row: Vec<R> = (0..h).map(|c| f2[t * h + c] + u[t * h + c]).collect();
                y.extend(real_layernorm(&row, &fl.ln2_gamma, &fl.ln2_beta, eps));
            }
            if plan.quant_acts {
                let s = ctx.site(&format!("layer{i}.ln2_out"))?;
                let ints = site_quantize_ints(&y, s, 8);
                rec(&mut trace, format!("layer{i}.ln2_out"), &ints);
                carrier_from_ints(&ints, s)
            } else {
                y
            }
        };
    }

    Ok(head_logits(&x[..h], &fw.head_w, &fw.head_b))
}

/// Fake quantization: the integer graph executed in real arithmetic
/// with identical Scale8/RequantMul values. The semantic reference for
/// `model_forward`.
pub fn fake_quant_forward<R: Real>(
    ids: &[u32],
    qm: &QuantizedModel,
    trace: Option<&mut SiteTrace>,
) -> Result<Vec<R>> {
    let fw = dequantize_model::<R>(qm);
    hybrid_forward(
        ids,
        &fw,
        Some(qm),
        EnginePlan::fake_quant(qm.config.w_bits),
        trace,
    )
}

/// Ablation run: the graph with the selected parts quantized, over the
/// given float reference weights.
pub fn ablation_forward<R: Real>(
    ids: &[u32],
    fw: &FloatWeights<R>,
    qm: &QuantizedModel,
    flags: AblationFlags,
    trace: Option<&mut SiteTrace>,
) -> Result<Vec<R>> {
    hybrid_forward(
        ids,
        fw,
        Some(qm),
        EnginePlan::from_flags(flags, qm.config.w_bits),
        trace,
    )
}

/// Weight-only bitwidth sweep point: weights quantized at `k` with
/// ideal real scales, everything else float. `None` is the float
/// passthrough.
pub fn sweep_forward<R: Real>(ids: &[u32], fw: &FloatWeights<R>, k: Option<u8>) -> Result<Vec<R>> {
    hybrid_forward(ids, fw, None, EnginePlan::weight_sweep(k), None)
}

/// Relative L2 error between two logit vectors.
pub fn logit_rel_error<R: Real>(got: &[R], want: &[R]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&a, &b) in got.iter().zip(want) {
        let (a, b) = (a.to_f64().unwrap(), b.to_f64().unwrap());
        num += (a - b) * (a - b);
        den += b * b;
    }
    (num / den.max(1e-300)).sqrt()
}
