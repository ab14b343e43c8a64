//! The fully quantized BERT network graph.
//!
//! Three engines share one graph: the integer datapath
//! ([`model_forward`]), the fake-quant reference
//! ([`fake_quant_forward`]) that runs the same graph in real arithmetic
//! with quantize→dequantize inserted at every site, and the float
//! oracle ([`float_oracle_forward`]). Embeddings and the task head run
//! on the host in floating point; the encoder stack is what gets
//! quantized.

mod integer;
mod reference;

pub use integer::{encoder_layer_forward, ffn_forward, mha_forward, model_forward};
pub use reference::{
    ablation_forward, fake_quant_forward, float_oracle_forward, float_oracle_traced,
    logit_rel_error, sweep_forward, EnginePlan,
};

use crate::error::{Error, Result};
use crate::qnum::{
    quantize_bias, requant_multiplier, weight_scale, QTensor, QuantSpec, RequantMul, Scale8,
};
use crate::real::{r, Real};
use crate::specfn::{ExpLut, GeluLut, LnParams};
use std::collections::BTreeMap;

/// Epsilon used by every encoder layer norm, fixed-point and real alike
/// (2^-10, exactly representable in Q16.16).
pub const ENCODER_LN_EPS: f64 = 0.0009765625;

/// Epsilon for the host-side embedding layer norm.
pub const EMBED_LN_EPS: f64 = 1e-12;

/// Scale of softmax outputs: 256 counts per unit (unsigned Q0.8).
pub fn softmax_out_scale() -> Scale8 {
    Scale8 {
        mantissa: 128,
        exp2: 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub type_vocab: usize,
    pub num_classes: usize,
    pub w_bits: u8,
    pub a_bits: u8,
}

impl ModelConfig {
    pub fn bert_base() -> Self {
        ModelConfig {
            num_layers: 12,
            hidden: 768,
            heads: 12,
            head_dim: 64,
            ffn_dim: 3072,
            seq_len: 128,
            vocab_size: 30522,
            max_position: 512,
            type_vocab: 2,
            num_classes: 2,
            w_bits: 4,
            a_bits: 8,
        }
    }

    /// Small configuration for tests: everything scaled down, FFN at
    /// the usual 4x hidden.
    pub fn toy(num_layers: usize, hidden: usize, heads: usize, seq_len: usize) -> Self {
        ModelConfig {
            num_layers,
            hidden,
            heads,
            head_dim: hidden / heads,
            ffn_dim: hidden * 4,
            seq_len,
            vocab_size: 64,
            max_position: 64,
            type_vocab: 2,
            num_classes: 2,
            w_bits: 4,
            a_bits: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden != self.heads * self.head_dim {
            return Err(Error::invalid(format!(
                "hidden {} != heads {} * head_dim {}",
                self.hidden, self.heads, self.head_dim
            )));
        }
        if self.seq_len < 1 {
            return Err(Error::invalid("seq_len must be >= 1"));
        }
        if self.hidden == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !(2..=8).contains(&self.w_bits) || self.a_bits != 8 {
            return Err(Error::invalid(format!(
                "unsupported bitwidths w={} a={}",
                self.w_bits, self.a_bits
            )));
        }
        Ok(())
    }

    /// Per-layer activation sites that carry a calibrated scale, in
    /// graph order. The softmax output is not listed: its scale is
    /// fixed at 256 counts per unit.
    pub const LAYER_SITES: [&'static str; 11] = [
        "q", "k", "v", "scores", "context", "attn_out", "ln1_out", "ffn1_out", "gelu_out",
        "ffn2_out", "ln2_out",
    ];

    /// All calibrated activation site names for this configuration.
    pub fn site_names(&self) -> Vec<String> {
        let mut names = vec!["embed_out".to_string()];
        for i in 0..self.num_layers {
            for s in Self::LAYER_SITES {
                names.push(format!("layer{i}.{s}"));
            }
        }
        names
    }
}

/// Which parts of the pipeline run quantized (the ablation switches).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub quant_weights_acts: bool,
    pub quant_scale: bool,
    pub quant_softmax: bool,
    pub quant_layernorm: bool,
}

impl AblationFlags {
    pub fn all_on() -> Self {
        AblationFlags {
            quant_weights_acts: true,
            quant_scale: true,
            quant_softmax: true,
            quant_layernorm: true,
        }
    }

    pub fn all_off() -> Self {
        AblationFlags {
            quant_weights_acts: false,
            quant_scale: false,
            quant_softmax: false,
            quant_layernorm: false,
        }
    }

    pub fn is_all_on(&self) -> bool {
        self.quant_weights_acts && self.quant_scale && self.quant_softmax && self.quant_layernorm
    }

    pub fn is_all_off(&self) -> bool {
        !(self.quant_weights_acts || self.quant_scale || self.quant_softmax || self.quant_layernorm)
    }

    /// The ablation rows in table order: each row quantizes one more
    /// part than the previous.
    pub fn table_rows() -> [AblationFlags; 5] {
        let mk = |wa, sc, sm, ln| AblationFlags {
            quant_weights_acts: wa,
            quant_scale: sc,
            quant_softmax: sm,
            quant_layernorm: ln,
        };
        [
            mk(false, false, false, false),
            mk(true, false, false, false),
            mk(true, true, false, false),
            mk(true, true, true, false),
            mk(true, true, true, true),
        ]
    }

    /// Structural count of quantized sites for a configuration, used by
    /// the ablate report.
    pub fn quantized_site_count(&self, mc: &ModelConfig) -> usize {
        let mut n = 0;
        if self.quant_weights_acts {
            n += 6 * mc.num_layers; // weight tensors
            n += mc.site_names().len(); // activation sites
            n += mc.num_layers; // GELU tables
        }
        if self.quant_scale {
            n += 8 * mc.num_layers; // requant multipliers
        }
        if self.quant_softmax {
            n += mc.num_layers;
        }
        if self.quant_layernorm {
            n += 2 * mc.num_layers;
        }
        n
    }
}

/// One encoder layer in floating point, row-major `[out][in]` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatLayer<R: Real> {
    pub wq: Vec<R>,
    pub wk: Vec<R>,
    pub wv: Vec<R>,
    pub wo: Vec<R>,
    pub bq: Vec<R>,
    pub bk: Vec<R>,
    pub bv: Vec<R>,
    pub bo: Vec<R>,
    pub w1: Vec<R>,
    pub b1: Vec<R>,
    pub w2: Vec<R>,
    pub b2: Vec<R>,
    pub ln1_gamma: Vec<R>,
    pub ln1_beta: Vec<R>,
    pub ln2_gamma: Vec<R>,
    pub ln2_beta: Vec<R>,
}

/// Full float weight set: embeddings and head (host side) plus the
/// encoder stack.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatWeights<R: Real> {
    pub config: ModelConfig,
    pub tok_emb: Vec<R>,
    pub pos_emb: Vec<R>,
    pub seg_emb: Vec<R>,
    pub emb_ln_gamma: Vec<R>,
    pub emb_ln_beta: Vec<R>,
    pub layers: Vec<FloatLayer<R>>,
    pub head_w: Vec<R>,
    pub head_b: Vec<R>,
}

/// Calibrated scale for one activation site: the real value straight
/// from the EMA, and its 8-bit quantized form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteScale {
    pub raw: f64,
    pub q: Scale8,
}

impl SiteScale {
    pub fn from_raw(raw: f64) -> Result<SiteScale> {
        Ok(SiteScale {
            raw,
            q: Scale8::from_real(raw)?,
        })
    }

    /// Clip threshold implied by a scale: MAX = qmax / s.
    pub fn max_clip(scale_value: f64, bits: u8) -> f64 {
        (((1i32 << (bits - 1)) - 1) as f64) / scale_value
    }
}

/// One quantized encoder layer: integer weights and biases, requant
/// multipliers per matmul, LN parameters and the per-layer tables.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub wq: QTensor,
    pub wk: QTensor,
    pub wv: QTensor,
    pub wo: QTensor,
    pub w1: QTensor,
    pub w2: QTensor,
    pub bq: QTensor,
    pub bk: QTensor,
    pub bv: QTensor,
    pub bo: QTensor,
    pub b1: QTensor,
    pub b2: QTensor,
    pub rm_q: RequantMul,
    pub rm_k: RequantMul,
    pub rm_v: RequantMul,
    pub rm_scores: RequantMul,
    pub rm_av: RequantMul,
    pub rm_o: RequantMul,
    pub rm_ffn1: RequantMul,
    pub rm_ffn2: RequantMul,
    pub ln1: LnParams,
    pub ln2: LnParams,
    pub softmax_lut: ExpLut,
    pub gelu_lut: GeluLut,
}

/// Host-side parameters kept in float (f64 holds the on-disk f32
/// values exactly).
#[derive(Debug, Clone, PartialEq)]
pub struct HostParams {
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub seg_emb: Vec<f64>,
    pub emb_ln_gamma: Vec<f64>,
    pub emb_ln_beta: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

/// The quantized model: what the FQBT container holds, materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub host: HostParams,
    pub layers: Vec<QuantLayer>,
    pub scales: BTreeMap<String, SiteScale>,
}

impl QuantizedModel {
    pub fn site_scale(&self, name: &str) -> Result<&SiteScale> {
        self.scales
            .get(name)
            .ok_or_else(|| Error::NotCalibrated(format!("no scale for site `{name}`")))
    }

    /// Input scale site of layer `i`: the previous layer's output or
    /// the quantized embedding.
    pub fn layer_input_site(&self, i: usize) -> String {
        if i == 0 {
            "embed_out".to_string()
        } else {
            format!("layer{}.ln2_out", i - 1)
        }
    }
}

/// Integer intermediates recorded at every quantization site, keyed by
/// site name. Both the integer engine and the fake-quant engine fill
/// one of these; pipeline equivalence compares them wholesale.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteTrace {
    pub sites: BTreeMap<String, Vec<i32>>,
}

impl SiteTrace {
    pub fn record(&mut self, name: impl Into<String>, data: &[i32]) {
        self.sites.insert(name.into(), data.to_vec());
    }
}

/// Quantize one activation vector at a site scale, returning the
/// integers. Shared verbatim by the integer engine (host boundary) and
/// the fake-quant engine (every site) so their rounding can never
/// drift apart.
pub(crate) fn site_quantize_ints<R: Real>(x: &[R], scale_value: f64, bits: u8) -> Vec<i32> {
    let qmax = ((1i32 << (bits - 1)) - 1) as i64;
    let max_clip = r::<R>(SiteScale::max_clip(scale_value, bits));
    let s = r::<R>(scale_value);
    x.iter()
        .map(|&v| {
            let c = v.max(-max_clip).min(max_clip);
            let q = (c * s).round().to_i64().unwrap_or(0);
            q.clamp(-qmax, qmax) as i32
        })
        .collect()
}

/// Host-side embedding: token + position + segment lookup followed by
/// a float layer norm. All three engines call this one function.
pub(crate) fn embed_sequence<R: Real>(
    ids: &[u32],
    tok: &[R],
    pos: &[R],
    seg: &[R],
    gamma: &[R],
    beta: &[R],
    mc: &ModelConfig,
) -> Result<Vec<R>> {
    if ids.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if ids.len() > mc.max_position {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds max position {}",
            ids.len(),
            mc.max_position
        )));
    }
    let h = mc.hidden;
    let mut out = Vec::with_capacity(ids.len() * h);
    for (t, &id) in ids.iter().enumerate() {
        if id as usize >= mc.vocab_size {
            return Err(Error::invalid(format!(
                "token id {id} outside vocab of {}",
                mc.vocab_size
            )));
        }
        let tk = &tok[id as usize * h..(id as usize + 1) * h];
        let ps = &pos[t * h..(t + 1) * h];
        let sg = &seg[..h]; // segment 0 for single-sentence inputs
        let row: Vec<R> = (0..h).map(|j| tk[j] + ps[j] + sg[j]).collect();
        out.extend(real_layernorm(&row, gamma, beta, r::<R>(EMBED_LN_EPS)));
    }
    Ok(out)
}

/// Real-arithmetic layer norm of one vector.
pub(crate) fn real_layernorm<R: Real>(x: &[R], gamma: &[R], beta: &[R], eps: R) -> Vec<R> {
    let n = r::<R>(x.len() as f64);
    let mean = x.iter().fold(R::zero(), |a, &v| a + v) / n;
    let var = x
        .iter()
        .fold(R::zero(), |a, &v| a + (v - mean) * (v - mean))
        / n;
    let inv = (var + eps).sqrt().recip();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect()
}

/// Float task head on the first-token vector.
pub(crate) fn head_logits<R: Real>(cls: &[R], head_w: &[R], head_b: &[R]) -> Vec<R> {
    let h = cls.len();
    head_b
        .iter()
        .enumerate()
        .map(|(c, &b)| {
            let row = &head_w[c * h..(c + 1) * h];
            row.iter().zip(cls).fold(b, |acc, (&w, &x)| acc + w * x)
        })
        .collect()
}

fn quantize_weight_tensor<R: Real>(
    name: &str,
    w: &[R],
    rows: usize,
    cols: usize,
    w_bits: u8,
) -> Result<QTensor> {
    let s_raw = weight_scale(w, w_bits).map_err(|e| match e {
        Error::DegenerateScale(_) => Error::DegenerateScale(name.to_string()),
        other => other,
    })?;
    let scale = Scale8::from_real(s_raw)?;
    let spec = QuantSpec::new(
        w_bits,
        r::<R>(SiteScale::max_clip(scale.value(), w_bits)),
        r(0.99),
    )?;
    crate::qnum::quantize(w, &spec, scale, vec![rows, cols])
}

/// Quantize a float weight set against calibrated activation specs.
/// Returns the model plus importer diagnostics (LN parameter or bias
/// saturation).
pub fn quantize_weights<R: Real>(
    fw: &FloatWeights<R>,
    specs: &BTreeMap<String, QuantSpec<R>>,
    w_bits: u8,
) -> Result<(QuantizedModel, Vec<String>)> {
    let mc = ModelConfig {
        w_bits,
        ..fw.config
    };
    mc.validate()?;
    let mut warnings = Vec::new();

    // Finalize all site scales first.
    let mut scales = BTreeMap::new();
    for name in mc.site_names() {
        let spec = specs
            .get(&name)
            .ok_or_else(|| Error::NotCalibrated(format!("site `{name}` has no spec")))?;
        let raw = crate::qnum::act_scale(spec)?.to_f64().unwrap();
        scales.insert(name.clone(), SiteScale::from_raw(raw)?);
    }

    let site = |scales: &BTreeMap<String, SiteScale>, i: usize, s: &str| -> Scale8 {
        scales[&format!("layer{i}.{s}")].q
    };

    let mut layers = Vec::with_capacity(mc.num_layers);
    for (i, fl) in fw.layers.iter().enumerate() {
        let s_in = if i == 0 {
            scales["embed_out"].q
        } else {
            scales[&format!("layer{}.ln2_out", i - 1)].q
        };
        let h = mc.hidden;
        let f = mc.ffn_dim;

        let wq = quantize_weight_tensor(&format!("layer{i}.Wq"), &fl.wq, h, h, w_bits)?;
        let wk = quantize_weight_tensor(&format!("layer{i}.Wk"), &fl.wk, h, h, w_bits)?;
        let wv = quantize_weight_tensor(&format!("layer{i}.Wv"), &fl.wv, h, h, w_bits)?;
        let wo = quantize_weight_tensor(&format!("layer{i}.Wo"), &fl.wo, h, h, w_bits)?;
        let w1 = quantize_weight_tensor(&format!("layer{i}.W1"), &fl.w1, f, h, w_bits)?;
        let w2 = quantize_weight_tensor(&format!("layer{i}.W2"), &fl.w2, h, f, w_bits)?;

        let mut qbias = |name: &str, b: &[R], s_a: Scale8, s_w: Scale8| -> Result<QTensor> {
            let (t, sat) = quantize_bias(b, s_a, s_w)?;
            if sat > 0 {
                warnings.push(format!(
                    "{name}: {sat} bias value(s) saturated at 32-bit rails"
                ));
            }
            Ok(t)
        };
        let bq = qbias(&format!("layer{i}.bq"), &fl.bq, s_in, wq.scale)?;
        let bk = qbias(&format!("layer{i}.bk"), &fl.bk, s_in, wk.scale)?;
        let bv = qbias(&format!("layer{i}.bv"), &fl.bv, s_in, wv.scale)?;
        let s_ctx = site(&scales, i, "context");
        let bo = qbias(&format!("layer{i}.bo"), &fl.bo, s_ctx, wo.scale)?;
        let s_ln1 = site(&scales, i, "ln1_out");
        let b1 = qbias(&format!("layer{i}.b1"), &fl.b1, s_ln1, w1.scale)?;
        let s_gelu = site(&scales, i, "gelu_out");
        let b2 = qbias(&format!("layer{i}.b2"), &fl.b2, s_gelu, w2.scale)?;

        let s_q = site(&scales, i, "q");
        let s_k = site(&scales, i, "k");
        let s_v = site(&scales, i, "v");
        let s_scores = site(&scales, i, "scores");
        let s_attn_out = site(&scales, i, "attn_out");
        let s_ffn1 = site(&scales, i, "ffn1_out");
        let s_ffn2 = site(&scales, i, "ffn2_out");

        let rm_q = requant_multiplier(s_in, wq.scale, s_q)?;
        let rm_k = requant_multiplier(s_in, wk.scale, s_k)?;
        let rm_v = requant_multiplier(s_in, wv.scale, s_v)?;
        // 1/sqrt(d_k) folds into the score requantization.
        let rm_scores = RequantMul::from_target(
            s_scores.value() / ((mc.head_dim as f64).sqrt() * s_q.value() * s_k.value()),
        )?;
        let rm_av = RequantMul::from_target(s_ctx.value() / (256.0 * s_v.value()))?;
        let rm_o = requant_multiplier(s_ctx, wo.scale, s_attn_out)?;
        let rm_ffn1 = requant_multiplier(s_ln1, w1.scale, s_ffn1)?;
        let rm_ffn2 = requant_multiplier(s_gelu, w2.scale, s_ffn2)?;

        let mut qln = |name: &str, gamma: &[R], beta: &[R]| -> LnParams {
            let (p, sat) = LnParams::from_real(gamma, beta);
            if sat > 0 {
                warnings.push(format!("{name}: {sat} LN parameter(s) saturated in Q1.6"));
            }
            p
        };
        let ln1 = qln(&format!("layer{i}.ln1"), &fl.ln1_gamma, &fl.ln1_beta);
        let ln2 = qln(&format!("layer{i}.ln2"), &fl.ln2_gamma, &fl.ln2_beta);

        layers.push(QuantLayer {
            softmax_lut: ExpLut::for_scale(s_scores)?,
            gelu_lut: GeluLut::build(s_ffn1, s_gelu),
            wq,
            wk,
            wv,
            wo,
            w1,
            w2,
            bq,
            bk,
            bv,
            bo,
            b1,
            b2,
            rm_q,
            rm_k,
            rm_v,
            rm_scores,
            rm_av,
            rm_o,
            rm_ffn1,
            rm_ffn2,
            ln1,
            ln2,
        });
    }

    let to64 = |v: &[R]| v.iter().map(|x| x.to_f64().unwrap()).collect::<Vec<f64>>();
    let host = HostParams {
        tok_emb: to64(&fw.tok_emb),
        pos_emb: to64(&fw.pos_emb),
        seg_emb: to64(&fw.seg_emb),
        emb_ln_gamma: to64(&fw.emb_ln_gamma),
        emb_ln_beta: to64(&fw.emb_ln_beta),
        head_w: to64(&fw.head_w),
        head_b: to64(&fw.head_b),
    };
    Ok((
        QuantizedModel {
            config: mc,
            host,
            layers,
            scales,
        },
        warnings,
    ))
}

/// Dequantize a model back to a float weight set (the reference point
/// for ablation and sweep runs on a container). Biases divide by the
/// exact product of the consumer's input and weight scales — the
/// Scale8 recorded on the bias tensor is an approximation of that
/// product and would perturb every bias by up to 2^-8.
pub fn dequantize_model<R: Real>(qm: &QuantizedModel) -> FloatWeights<R> {
    let deq = |t: &QTensor| crate::qnum::dequantize::<R>(t);
    let from64 = |v: &[f64]| v.iter().map(|&x| r::<R>(x)).collect::<Vec<R>>();
    let ln_real = |p: &[i8]| {
        p.iter()
            .map(|&v| LnParams::param_real::<R>(v))
            .collect::<Vec<R>>()
    };
    let deq_bias = |t: &QTensor, s_a: f64, s_w: f64| -> Vec<R> {
        let s = r::<R>(s_a * s_w);
        t.data.iter().map(|&v| r::<R>(v as f64) / s).collect()
    };
    let layers = qm
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let s_in = qm.scales[&qm.layer_input_site(i)].q.value();
            let s_ctx = qm.scales[&format!("layer{i}.context")].q.value();
            let s_ln1 = qm.scales[&format!("layer{i}.ln1_out")].q.value();
            let s_gelu = qm.scales[&format!("layer{i}.gelu_out")].q.value();
            FloatLayer {
                bq: deq_bias(&l.bq, s_in, l.wq.scale.value()),
                bk: deq_bias(&l.bk, s_in, l.wk.scale.value()),
                bv: deq_bias(&l.bv, s_in, l.wv.scale.value()),
                bo: deq_bias(&l.bo, s_ctx, l.wo.scale.value()),
                b1: deq_bias(&l.b1, s_ln1, l.w1.scale.value()),
                b2: deq_bias(&l.b2, s_gelu, l.w2.scale.value()),
                wq: deq(&l.wq),
                wk: deq(&l.wk),
                wv: deq(&l.wv),
                wo: deq(&l.wo),
                w1: deq(&l.w1),
                w2: deq(&l.w2),
                ln1_gamma: ln_real(&l.ln1.gamma),
                ln1_beta: ln_real(&l.ln1.beta),
                ln2_gamma: ln_real(&l.ln2.gamma),
                ln2_beta: ln_real(&l.ln2.beta),
            }
        })
        .collect();
    FloatWeights {
        config: qm.config,
        tok_emb: from64(&qm.host.tok_emb),
        pos_emb: from64(&qm.host.pos_emb),
        seg_emb: from64(&qm.host.seg_emb),
        emb_ln_gamma: from64(&qm.host.emb_ln_gamma),
        emb_ln_beta: from64(&qm.host.emb_ln_beta),
        layers,
        head_w: from64(&qm.host.head_w),
        head_b: from64(&qm.host.head_b),
    }
}
