//! The integer datapath: every encoder tensor is a `QTensor`, every
//! matmul goes through the BIM kernel, every nonlinearity through a
//! fixed-point core. The host contributes float embeddings at the
//! front and the float task head at the back.

use super::*;
use crate::bim::{pe_matvec_raw, HwConfig, WeightMode};
use crate::qnum::{dequantize, requantize_sum, QTensor, RequantMul, Scale8};
use crate::real::Real;
use crate::specfn::{layernorm_q, softmax_q, LnParams};

fn rec(trace: &mut Option<&mut SiteTrace>, name: String, data: &[i32]) {
    if let Some(t) = trace.as_deref_mut() {
        t.record(name, data);
    }
}

fn mode_of(w: &QTensor) -> Result<WeightMode> {
    match w.bits {
        4 => Ok(WeightMode::W4),
        8 => Ok(WeightMode::W8),
        other => Err(Error::invalid(format!("weights stored at {other} bits"))),
    }
}

/// `[seq, in] x [out, in]^T -> [seq, out]`, requantized per element.
fn seq_matmul_requant(
    w: &QTensor,
    x: &QTensor,
    bias: &QTensor,
    rm: &RequantMul,
    hw: &HwConfig,
    out_scale: Scale8,
) -> Result<QTensor> {
    let seq = x.rows();
    let (out_rows, in_dim) = (w.rows(), w.cols());
    if x.cols() != in_dim {
        return Err(Error::invalid(format!(
            "matmul shape mismatch: x cols {} vs w cols {in_dim}",
            x.cols()
        )));
    }
    let mode = mode_of(w)?;
    let mut data = Vec::with_capacity(seq * out_rows);
    for t in 0..seq {
        let mv = pe_matvec_raw(&w.data, out_rows, in_dim, mode, x.row(t), !x.signed, hw)?;
        debug_assert!(!mv.saturated, "accumulator saturation in projection");
        for (r, &acc) in mv.acc.iter().enumerate() {
            data.push(requantize_sum(
                acc as i64 + bias.data[r] as i64,
                rm,
                8,
                true,
            ));
        }
    }
    QTensor::new(data, 8, true, vec![seq, out_rows], out_scale)
}

/// Per-row fixed-point layer norm over a sequence.
fn ln_rows(x1: &QTensor, x2: &QTensor, p: &LnParams, out_scale: Scale8) -> Result<QTensor> {
    let seq = x1.rows();
    let n = x1.cols();
    let mut data = Vec::with_capacity(seq * n);
    for t in 0..seq {
        let r1 = QTensor::new(x1.row(t).to_vec(), x1.bits, x1.signed, vec![n], x1.scale)?;
        let r2 = QTensor::new(x2.row(t).to_vec(), x2.bits, x2.signed, vec![n], x2.scale)?;
        let y = layernorm_q(&r1, &r2, p, 8, out_scale)?;
        data.extend_from_slice(&y.data);
    }
    QTensor::new(data, 8, true, vec![seq, n], out_scale)
}

/// Quantized multi-head attention for one layer: Q/K/V projections in
/// weight mode, QK^T and AV in 8x8 mode, LUT softmax per row, output
/// projection. All intermediates are 8-bit tensors.
pub fn mha_forward(
    qm: &QuantizedModel,
    layer: usize,
    x: &QTensor,
    hw: &HwConfig,
    mut trace: Option<&mut SiteTrace>,
) -> Result<QTensor> {
    let mc = &qm.config;
    let l = &qm.layers[layer];
    let seq = x.rows();
    let (h, d, heads) = (mc.hidden, mc.head_dim, mc.heads);

    let s =
        |name: &str| -> Result<Scale8> { Ok(qm.site_scale(&format!("layer{layer}.{name}"))?.q) };
    let q = seq_matmul_requant(&l.wq, x, &l.bq, &l.rm_q, hw, s("q")?)?;
    let k = seq_matmul_requant(&l.wk, x, &l.bk, &l.rm_k, hw, s("k")?)?;
    let v = seq_matmul_requant(&l.wv, x, &l.bv, &l.rm_v, hw, s("v")?)?;
    rec(&mut trace, format!("layer{layer}.q"), &q.data);
    rec(&mut trace, format!("layer{layer}.k"), &k.data);
    rec(&mut trace, format!("layer{layer}.v"), &v.data);

    let s_scores = s("scores")?;
    let s_ctx = s("context")?;
    let mut scores_all = vec![0i32; heads * seq * seq];
    let mut attn_all = vec![0i32; heads * seq * seq];
    let mut z_data = vec![0i32; seq * h];

    for head in 0..heads {
        let off = head * d;
        // Head slices of K and V^T, materialized contiguous.
        let mut k_h = Vec::with_capacity(seq * d);
        for t in 0..seq {
            k_h.extend_from_slice(&k.row(t)[off..off + d]);
        }
        let mut v_ht = Vec::with_capacity(d * seq); // [d, seq]
        for c in 0..d {
            for t in 0..seq {
                v_ht.push(v.row(t)[off + c]);
            }
        }

        for t in 0..seq {
            let q_row = &q.row(t)[off..off + d];
            let mv = pe_matvec_raw(&k_h, seq, d, WeightMode::W8, q_row, false, hw)?;
            debug_assert!(!mv.saturated);
            let score_row: Vec<i32> = mv
                .acc
                .iter()
                .map(|&a| requantize_sum(a as i64, &l.rm_scores, 8, true))
                .collect();
            scores_all[(head * seq + t) * seq..(head * seq + t + 1) * seq]
                .copy_from_slice(&score_row);

            let score_q = QTensor::new(score_row, 8, true, vec![seq], s_scores)?;
            let attn = softmax_q(&score_q, &l.softmax_lut)?;
            attn_all[(head * seq + t) * seq..(head * seq + t + 1) * seq]
                .copy_from_slice(&attn.data);

            let mv = pe_matvec_raw(&v_ht, d, seq, WeightMode::W8, &attn.data, true, hw)?;
            debug_assert!(!mv.saturated);
            for (c, &acc) in mv.acc.iter().enumerate() {
                z_data[t * h + off + c] = requantize_sum(acc as i64, &l.rm_av, 8, true);
            }
        }
    }
    rec(&mut trace, format!("layer{layer}.scores"), &scores_all);
    rec(&mut trace, format!("layer{layer}.attn"), &attn_all);
    rec(&mut trace, format!("layer{layer}.context"), &z_data);

    let z = QTensor::new(z_data, 8, true, vec![seq, h], s_ctx)?;
    let out = seq_matmul_requant(&l.wo, &z, &l.bo, &l.rm_o, hw, s("attn_out")?)?;
    rec(&mut trace, format!("layer{layer}.attn_out"), &out.data);
    Ok(out)
}

/// Quantized feed-forward block: FFN1, LUT GELU, FFN2.
pub fn ffn_forward(
    qm: &QuantizedModel,
    layer: usize,
    u: &QTensor,
    hw: &HwConfig,
    mut trace: Option<&mut SiteTrace>,
) -> Result<QTensor> {
    let l = &qm.layers[layer];
    let s =
        |name: &str| -> Result<Scale8> { Ok(qm.site_scale(&format!("layer{layer}.{name}"))?.q) };
    let f1 = seq_matmul_requant(&l.w1, u, &l.b1, &l.rm_ffn1, hw, s("ffn1_out")?)?;
    rec(&mut trace, format!("layer{layer}.ffn1_out"), &f1.data);
    let g = l.gelu_lut.apply_tensor(&f1, s("gelu_out")?)?;
    rec(&mut trace, format!("layer{layer}.gelu_out"), &g.data);
    let f2 = seq_matmul_requant(&l.w2, &g, &l.b2, &l.rm_ffn2, hw, s("ffn2_out")?)?;
    rec(&mut trace, format!("layer{layer}.ffn2_out"), &f2.data);
    Ok(f2)
}

/// One encoder layer: attention, add & norm, FFN, add & norm.
pub fn encoder_layer_forward(
    qm: &QuantizedModel,
    layer: usize,
    x: &QTensor,
    hw: &HwConfig,
    mut trace: Option<&mut SiteTrace>,
) -> Result<QTensor> {
    let l = &qm.layers[layer];
    let s =
        |name: &str| -> Result<Scale8> { Ok(qm.site_scale(&format!("layer{layer}.{name}"))?.q) };
    let a = mha_forward(qm, layer, x, hw, trace.as_deref_mut())?;
    let u = ln_rows(&a, x, &l.ln1, s("ln1_out")?)?;
    rec(&mut trace, format!("layer{layer}.ln1_out"), &u.data);
    let f = ffn_forward(qm, layer, &u, hw, trace.as_deref_mut())?;
    let y = ln_rows(&f, &u, &l.ln2, s("ln2_out")?)?;
    rec(&mut trace, format!("layer{layer}.ln2_out"), &y.data);
    Ok(y)
}

/// Full forward pass. With every ablation flag on this is the integer
/// datapath; any disabled flag routes through the real-arithmetic
/// hybrid engine on the dequantized weights.
pub fn model_forward<R: Real>(
    ids: &[u32],
    qm: &QuantizedModel,
    hw: &HwConfig,
    flags: AblationFlags,
    mut trace: Option<&mut SiteTrace>,
) -> Result<Vec<R>> {
    qm.config.validate()?;
    if !flags.is_all_on() {
        let fw = dequantize_model::<R>(qm);
        return ablation_forward(ids, &fw, qm, flags, trace);
    }
    let mc = &qm.config;
    let host = &qm.host;
    let to_r = |v: &[f64]| {
        v.iter()
            .map(|&x| crate::real::r::<R>(x))
            .collect::<Vec<R>>()
    };
    let emb = embed_sequence::<R>(
        ids,
        &to_r(&host.tok_emb),
        &to_r(&host.pos_emb),
        &to_r(&host.seg_emb),
        &to_r(&host.emb_ln_gamma),
        &to_r(&host.emb_ln_beta),
        mc,
    )?;
    let head_w = to_r(&host.head_w);
    let head_b = to_r(&host.head_b);

    // An empty encoder stack never leaves the host: pure float path.
    if mc.num_layers == 0 {
        return Ok(head_logits(&emb[..mc.hidden], &head_w, &head_b));
    }

    let s0 = qm.site_scale("embed_out")?.q;
    let x0_ints = site_quantize_ints(&emb, s0.value(), mc.a_bits);
    rec(&mut trace, "embed_out".to_string(), &x0_ints);
    let mut x = QTensor::new(x0_ints, 8, true, vec![ids.len(), mc.hidden], s0)?;

    for i in 0..mc.num_layers {
        x = encoder_layer_forward(qm, i, &x, hw, trace.as_deref_mut())?;
    }

    let cls_all: Vec<R> = dequantize(&x);
    Ok(head_logits(&cls_all[..mc.hidden], &head_w, &head_b))
}
