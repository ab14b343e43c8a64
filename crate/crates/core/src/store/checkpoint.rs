//! Float checkpoint import/export, calibration streaming, and the
//! model <-> container mapping.
//!
//! Checkpoint format (little-endian): magic "FQCK", tensor count u32,
//! then per tensor: name_len u32, name, ndim u8, dims u32 x ndim, raw
//! f32 data. The expected tensor schema comes from the model
//! configuration; missing names and shape mismatches are hard errors.

use super::{qtensor_from_entry, ContainerBuilder, DType, FqbtContainer};
use crate::error::{Error, Result};
use crate::model::{
    quantize_weights, FloatLayer, FloatWeights, HostParams, ModelConfig, QuantLayer,
    QuantizedModel, SiteScale,
};
use crate::qnum::{QTensor, QuantSpec, RequantMul, Scale8};
use crate::real::{r, Real};
use crate::specfn::{ExpLut, GeluLut, LnParams, LN_EPSILON};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: [u8; 4] = *b"FQCK";

/// Expected checkpoint schema: (name, shape) for every tensor.
pub fn checkpoint_schema(mc: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = mc.hidden;
    let f = mc.ffn_dim;
    let mut v = vec![
        ("embed.token".into(), vec![mc.vocab_size, h]),
        ("embed.position".into(), vec![mc.max_position, h]),
        ("embed.segment".into(), vec![mc.type_vocab, h]),
        ("embed.ln.gamma".into(), vec![h]),
        ("embed.ln.beta".into(), vec![h]),
    ];
    for i in 0..mc.num_layers {
        for (n, s) in [
            ("Wq", vec![h, h]),
            ("Wk", vec![h, h]),
            ("Wv", vec![h, h]),
            ("Wo", vec![h, h]),
            ("bq", vec![h]),
            ("bk", vec![h]),
            ("bv", vec![h]),
            ("bo", vec![h]),
            ("W1", vec![f, h]),
            ("b1", vec![f]),
            ("W2", vec![h, f]),
            ("b2", vec![h]),
            ("ln1.gamma", vec![h]),
            ("ln1.beta", vec![h]),
            ("ln2.gamma", vec![h]),
            ("ln2.beta", vec![h]),
        ] {
            v.push((format!("layer{i}.{n}"), s));
        }
    }
    v.push(("head.W".into(), vec![mc.num_classes, h]));
    v.push(("head.b".into(), vec![mc.num_classes]));
    v
}

/// Write a float weight set in the checkpoint format.
pub fn export_float_checkpoint<R: Real>(
    fw: &FloatWeights<R>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mc = &fw.config;
    let mut tensors: Vec<(String, Vec<usize>, &[R])> = vec![
        (
            "embed.token".into(),
            vec![mc.vocab_size, mc.hidden],
            &fw.tok_emb,
        ),
        (
            "embed.position".into(),
            vec![mc.max_position, mc.hidden],
            &fw.pos_emb,
        ),
        (
            "embed.segment".into(),
            vec![mc.type_vocab, mc.hidden],
            &fw.seg_emb,
        ),
        ("embed.ln.gamma".into(), vec![mc.hidden], &fw.emb_ln_gamma),
        ("embed.ln.beta".into(), vec![mc.hidden], &fw.emb_ln_beta),
    ];
    for (i, l) in fw.layers.iter().enumerate() {
        let h = mc.hidden;
        let f = mc.ffn_dim;
        for (n, s, d) in [
            ("Wq", vec![h, h], &l.wq),
            ("Wk", vec![h, h], &l.wk),
            ("Wv", vec![h, h], &l.wv),
            ("Wo", vec![h, h], &l.wo),
            ("bq", vec![h], &l.bq),
            ("bk", vec![h], &l.bk),
            ("bv", vec![h], &l.bv),
            ("bo", vec![h], &l.bo),
            ("W1", vec![f, h], &l.w1),
            ("b1", vec![f], &l.b1),
            ("W2", vec![h, f], &l.w2),
            ("b2", vec![h], &l.b2),
            ("ln1.gamma", vec![h], &l.ln1_gamma),
            ("ln1.beta", vec![h], &l.ln1_beta),
            ("ln2.gamma", vec![h], &l.ln2_gamma),
            ("ln2.beta", vec![h], &l.ln2_beta),
        ] {
            tensors.push((format!("layer{i}.{n}"), s, d));
        }
    }
    tensors.push(("head.W".into(), vec![mc.num_classes, mc.hidden], &fw.head_w));
    tensors.push(("head.b".into(), vec![mc.num_classes], &fw.head_b));

    let mut f = std::fs::File::create(path)?;
    f.write_all(&CKPT_MAGIC)?;
    f.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in tensors {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&[shape.len() as u8])?;
        for d in &shape {
            f.write_all(&(*d as u32).to_le_bytes())?;
        }
        let n: usize = shape.iter().product();
        debug_assert_eq!(n, data.len());
        let mut buf = Vec::with_capacity(4 * n);
        for v in data {
            buf.extend_from_slice(&(v.to_f64().unwrap() as f32).to_le_bytes());
        }
        f.write_all(&buf)?;
    }
    Ok(())
}

type RawTensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn read_checkpoint_tensors(path: impl AsRef<Path>) -> Result<RawTensorMap> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > data.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &data[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CKPT_MAGIC {
        return Err(Error::Format("bad magic (not an FQCK checkpoint)".into()));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, 4 * n)?;
        let vals = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        map.insert(name, (shape, vals));
    }
    Ok(map)
}

/// Load a float checkpoint and verify it against the configuration's
/// schema.
pub fn import_float_checkpoint<R: Real>(
    path: impl AsRef<Path>,
    mc: &ModelConfig,
) -> Result<FloatWeights<R>> {
    mc.validate()?;
    let mut map = read_checkpoint_tensors(path)?;
    let mut get = |name: &str, want: &[usize]| -> Result<Vec<R>> {
        let (shape, vals) = map
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if shape != want {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: want.to_vec(),
                found: shape,
            });
        }
        Ok(vals.into_iter().map(|v| r::<R>(v as f64)).collect())
    };

    let h = mc.hidden;
    let f = mc.ffn_dim;
    let tok_emb = get("embed.token", &[mc.vocab_size, h])?;
    let pos_emb = get("embed.position", &[mc.max_position, h])?;
    let seg_emb = get("embed.segment", &[mc.type_vocab, h])?;
    let emb_ln_gamma = get("embed.ln.gamma", &[h])?;
    let emb_ln_beta = get("embed.ln.beta", &[h])?;
    let mut layers = Vec::with_capacity(mc.num_layers);
    for i in 0..mc.num_layers {
        layers.push(FloatLayer {
            wq: get(&format!("layer{i}.Wq"), &[h, h])?,
            wk: get(&format!("layer{i}.Wk"), &[h, h])?,
            wv: get(&format!("layer{i}.Wv"), &[h, h])?,
            wo: get(&format!("layer{i}.Wo"), &[h, h])?,
            bq: get(&format!("layer{i}.bq"), &[h])?,
            bk: get(&format!("layer{i}.bk"), &[h])?,
            bv: get(&format!("layer{i}.bv"), &[h])?,
            bo: get(&format!("layer{i}.bo"), &[h])?,
            w1: get(&format!("layer{i}.W1"), &[f, h])?,
            b1: get(&format!("layer{i}.b1"), &[f])?,
            w2: get(&format!("layer{i}.W2"), &[h, f])?,
            b2: get(&format!("layer{i}.b2"), &[h])?,
            ln1_gamma: get(&format!("layer{i}.ln1.gamma"), &[h])?,
            ln1_beta: get(&format!("layer{i}.ln1.beta"), &[h])?,
            ln2_gamma: get(&format!("layer{i}.ln2.gamma"), &[h])?,
            ln2_beta: get(&format!("layer{i}.ln2.beta"), &[h])?,
        });
    }
    Ok(FloatWeights {
        config: *mc,
        tok_emb,
        pos_emb,
        seg_emb,
        emb_ln_gamma,
        emb_ln_beta,
        layers,
        head_w: get("head.W", &[mc.num_classes, h])?,
        head_b: get("head.b", &[mc.num_classes])?,
    })
}

/// Calibration input: token-id sequences at a fixed length. Parsed
/// from newline-delimited whitespace-separated ids; short lines pad
/// with token 0, long lines truncate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibStream {
    pub sequences: Vec<Vec<u32>>,
}

impl CalibStream {
    pub fn parse(text: &str, mc: &ModelConfig) -> Result<CalibStream> {
        let mut sequences = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut ids = Vec::with_capacity(mc.seq_len);
            for tok in line.split_whitespace() {
                let id: u32 = tok.parse().map_err(|_| {
                    Error::invalid(format!("line {}: `{tok}` is not a token id", lineno + 1))
                })?;
                if id as usize >= mc.vocab_size {
                    return Err(Error::invalid(format!(
                        "line {}: token id {id} outside vocab of {}",
                        lineno + 1,
                        mc.vocab_size
                    )));
                }
                ids.push(id);
            }
            ids.truncate(mc.seq_len);
            while ids.len() < mc.seq_len {
                ids.push(0);
            }
            sequences.push(ids);
        }
        Ok(CalibStream { sequences })
    }

    pub fn from_file(path: impl AsRef<Path>, mc: &ModelConfig) -> Result<CalibStream> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::NotCalibrated("calibration file missing or unreadable".into()))?;
        Self::parse(&text, mc)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Run the float oracle over the stream, fold per-sequence activation
/// maxima through the EMA, and return one finalized spec per site.
pub fn calibrate<R: Real>(
    fw: &FloatWeights<R>,
    stream: &CalibStream,
    a_bits: u8,
    ema_decay: f64,
) -> Result<BTreeMap<String, QuantSpec<R>>> {
    if stream.is_empty() {
        return Err(Error::NotCalibrated("calibration stream is empty".into()));
    }
    let mc = &fw.config;
    let mut specs: BTreeMap<String, QuantSpec<R>> = mc
        .site_names()
        .into_iter()
        .map(|n| {
            (
                n,
                QuantSpec::new(a_bits, r::<R>(1.0), r::<R>(ema_decay)).unwrap(),
            )
        })
        .collect();

    for ids in &stream.sequences {
        let mut maxima: BTreeMap<String, R> = BTreeMap::new();
        crate::model::float_oracle_traced(ids, fw, &mut |site, data: &[R]| {
            let m = data.iter().fold(R::zero(), |a, &v| a.max(v.abs()));
            maxima
                .entry(site.to_string())
                .and_modify(|e| *e = e.max(m))
                .or_insert(m);
        })?;
        for (site, m) in maxima {
            if let Some(spec) = specs.get_mut(&site) {
                spec.observe(m);
            }
        }
    }
    // The clip threshold for activations defaults to the EMA itself.
    for spec in specs.values_mut() {
        if let Some(ema) = spec.ema_state {
            spec.max_clip = ema;
        }
    }
    Ok(specs)
}

fn rm_bytes(rm: &RequantMul) -> Vec<u8> {
    let mut b = rm.m.to_le_bytes().to_vec();
    b.push(rm.shift);
    b
}

fn rm_from_bytes(bytes: &[u8]) -> Result<RequantMul> {
    if bytes.len() != 5 {
        return Err(Error::Format("requant entry must be 5 bytes".into()));
    }
    Ok(RequantMul {
        m: i32::from_le_bytes(bytes[..4].try_into().unwrap()),
        shift: bytes[4],
    })
}

fn f32_bytes(vals: &[f64]) -> Vec<u8> {
    vals.iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

fn f64_from_f32_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect()
}

/// Serialize a quantized model into the container layout.
pub fn model_to_container(qm: &QuantizedModel) -> FqbtContainer {
    let mc = &qm.config;
    let mut b = ContainerBuilder::new();

    // Activation site scales first (stable, documented order).
    for name in mc.site_names() {
        let s = qm.scales[&name].q;
        let mut bytes = vec![s.mantissa];
        bytes.extend_from_slice(&s.exp2.to_le_bytes());
        b.add(name, DType::Scale8E, Some(s), vec![1], &bytes);
    }

    for (i, l) in qm.layers.iter().enumerate() {
        for (n, t) in [
            ("Wq", &l.wq),
            ("Wk", &l.wk),
            ("Wv", &l.wv),
            ("Wo", &l.wo),
            ("W1", &l.w1),
            ("W2", &l.w2),
        ] {
            b.add_qtensor_quant(format!("layer{i}.{n}"), t, mc.w_bits);
        }
        for (n, t) in [
            ("bq", &l.bq),
            ("bk", &l.bk),
            ("bv", &l.bv),
            ("bo", &l.bo),
            ("b1", &l.b1),
            ("b2", &l.b2),
        ] {
            b.add_qtensor(format!("layer{i}.{n}"), t);
        }
        for (n, rm) in [
            ("rm_q", &l.rm_q),
            ("rm_k", &l.rm_k),
            ("rm_v", &l.rm_v),
            ("rm_scores", &l.rm_scores),
            ("rm_av", &l.rm_av),
            ("rm_o", &l.rm_o),
            ("rm_ffn1", &l.rm_ffn1),
            ("rm_ffn2", &l.rm_ffn2),
        ] {
            b.add(
                format!("layer{i}.{n}"),
                DType::Requant,
                None,
                vec![1],
                &rm_bytes(rm),
            );
        }
        let ln8 = |v: &[i8]| v.iter().map(|&x| x as u8).collect::<Vec<u8>>();
        b.add(
            format!("layer{i}.ln1.gamma"),
            DType::LnParam8,
            None,
            vec![mc.hidden],
            &ln8(&l.ln1.gamma),
        );
        b.add(
            format!("layer{i}.ln1.beta"),
            DType::LnParam8,
            None,
            vec![mc.hidden],
            &ln8(&l.ln1.beta),
        );
        b.add(
            format!("layer{i}.ln2.gamma"),
            DType::LnParam8,
            None,
            vec![mc.hidden],
            &ln8(&l.ln2.gamma),
        );
        b.add(
            format!("layer{i}.ln2.beta"),
            DType::LnParam8,
            None,
            vec![mc.hidden],
            &ln8(&l.ln2.beta),
        );
    }

    // Host-side float tensors live in the same container.
    let host = &qm.host;
    b.add(
        "embed.token",
        DType::F32,
        None,
        vec![mc.vocab_size, mc.hidden],
        &f32_bytes(&host.tok_emb),
    );
    b.add(
        "embed.position",
        DType::F32,
        None,
        vec![mc.max_position, mc.hidden],
        &f32_bytes(&host.pos_emb),
    );
    b.add(
        "embed.segment",
        DType::F32,
        None,
        vec![mc.type_vocab, mc.hidden],
        &f32_bytes(&host.seg_emb),
    );
    b.add(
        "embed.ln.gamma",
        DType::F32,
        None,
        vec![mc.hidden],
        &f32_bytes(&host.emb_ln_gamma),
    );
    b.add(
        "embed.ln.beta",
        DType::F32,
        None,
        vec![mc.hidden],
        &f32_bytes(&host.emb_ln_beta),
    );
    b.add(
        "head.W",
        DType::F32,
        None,
        vec![mc.num_classes, mc.hidden],
        &f32_bytes(&host.head_w),
    );
    b.add(
        "head.b",
        DType::F32,
        None,
        vec![mc.num_classes],
        &f32_bytes(&host.head_b),
    );

    b.finish(*mc)
}

/// Materialize a quantized model from a loaded container, validating
/// completeness and shapes.
pub fn model_from_container(c: &FqbtContainer) -> Result<QuantizedModel> {
    let mc = c.config;
    mc.validate()?;
    let h = mc.hidden;
    let f = mc.ffn_dim;

    let mut scales = BTreeMap::new();
    for name in mc.site_names() {
        let e = c.find(&name)?;
        if e.dtype != DType::Scale8E {
            return Err(Error::Format(format!("site `{name}` is not a scale entry")));
        }
        let bytes = c.tensor_bytes(e);
        let s = Scale8 {
            mantissa: bytes[0],
            exp2: i16::from_le_bytes(bytes[1..3].try_into().unwrap()),
        };
        scales.insert(
            name,
            SiteScale {
                raw: s.value(),
                q: s,
            },
        );
    }

    let qt = |name: &str, shape: &[usize]| -> Result<QTensor> {
        let e = c.find(name)?;
        if e.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.into(),
                expected: shape.to_vec(),
                found: e.shape.clone(),
            });
        }
        qtensor_from_entry(e, c.tensor_bytes(e))
    };
    let rm = |name: &str| -> Result<RequantMul> { rm_from_bytes(c.tensor_bytes(c.find(name)?)) };
    let ln = |name: &str| -> Result<Vec<i8>> {
        let e = c.find(name)?;
        if e.shape != [h] {
            return Err(Error::ShapeMismatch {
                name: name.into(),
                expected: vec![h],
                found: e.shape.clone(),
            });
        }
        Ok(c.tensor_bytes(e).iter().map(|&b| b as i8).collect())
    };

    let mut layers = Vec::with_capacity(mc.num_layers);
    for i in 0..mc.num_layers {
        let p = |n: &str| format!("layer{i}.{n}");
        let s_scores = scales[&p("scores")].q;
        let s_ffn1 = scales[&p("ffn1_out")].q;
        let s_gelu = scales[&p("gelu_out")].q;
        layers.push(QuantLayer {
            wq: qt(&p("Wq"), &[h, h])?,
            wk: qt(&p("Wk"), &[h, h])?,
            wv: qt(&p("Wv"), &[h, h])?,
            wo: qt(&p("Wo"), &[h, h])?,
            w1: qt(&p("W1"), &[f, h])?,
            w2: qt(&p("W2"), &[h, f])?,
            bq: qt(&p("bq"), &[h])?,
            bk: qt(&p("bk"), &[h])?,
            bv: qt(&p("bv"), &[h])?,
            bo: qt(&p("bo"), &[h])?,
            b1: qt(&p("b1"), &[f])?,
            b2: qt(&p("b2"), &[h])?,
            rm_q: rm(&p("rm_q"))?,
            rm_k: rm(&p("rm_k"))?,
            rm_v: rm(&p("rm_v"))?,
            rm_scores: rm(&p("rm_scores"))?,
            rm_av: rm(&p("rm_av"))?,
            rm_o: rm(&p("rm_o"))?,
            rm_ffn1: rm(&p("rm_ffn1"))?,
            rm_ffn2: rm(&p("rm_ffn2"))?,
            ln1: LnParams {
                gamma: ln(&p("ln1.gamma"))?,
                beta: ln(&p("ln1.beta"))?,
                epsilon: LN_EPSILON,
            },
            ln2: LnParams {
                gamma: ln(&p("ln2.gamma"))?,
                beta: ln(&p("ln2.beta"))?,
                epsilon: LN_EPSILON,
            },
            softmax_lut: ExpLut::for_scale(s_scores)?,
            gelu_lut: GeluLut::build(s_ffn1, s_gelu),
        });
    }

    let fv = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let e = c.find(name)?;
        if e.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.into(),
                expected: shape.to_vec(),
                found: e.shape.clone(),
            });
        }
        Ok(f64_from_f32_bytes(c.tensor_bytes(e)))
    };
    let host = HostParams {
        tok_emb: fv("embed.token", &[mc.vocab_size, h])?,
        pos_emb: fv("embed.position", &[mc.max_position, h])?,
        seg_emb: fv("embed.segment", &[mc.type_vocab, h])?,
        emb_ln_gamma: fv("embed.ln.gamma", &[h])?,
        emb_ln_beta: fv("embed.ln.beta", &[h])?,
        head_w: fv("head.W", &[mc.num_classes, h])?,
        head_b: fv("head.b", &[mc.num_classes])?,
    };

    Ok(QuantizedModel {
        config: mc,
        host,
        layers,
        scales,
    })
}

/// Compression accounting over a container: float-equivalent bytes
/// divided by quantized bytes, both with and without the host-side
/// float tensors (which are identical on both sides).
#[derive(Debug, Clone, serde::Serialize)]
pub struct CompressionReport {
    pub encoder_float_bytes: u64,
    pub encoder_quant_bytes: u64,
    pub host_float_bytes: u64,
    pub ratio_encoder: f64,
    pub ratio_total: f64,
}

pub fn compression_report(c: &FqbtContainer) -> CompressionReport {
    let mut encoder_float = 0u64;
    let mut encoder_quant = 0u64;
    let mut host_float = 0u64;
    for e in &c.entries {
        let is_host = e.name.starts_with("embed.") || e.name.starts_with("head.");
        if is_host {
            host_float += e.length;
            continue;
        }
        // Quantized side: payload plus the inline 3-byte scale carried
        // by integer tensors.
        let inline_scale = matches!(
            e.dtype,
            DType::I2Packed | DType::I4Packed | DType::I8 | DType::U8 | DType::I32
        );
        encoder_quant += e.length + if inline_scale { 3 } else { 0 };
        // Float equivalent: parameters that exist in the float model.
        let float_equiv = match e.dtype {
            DType::I2Packed
            | DType::I4Packed
            | DType::I8
            | DType::U8
            | DType::I32
            | DType::LnParam8 => 4 * e.elems() as u64,
            DType::Scale8E | DType::Requant => 0,
            DType::F32 => 4 * e.elems() as u64,
        };
        encoder_float += float_equiv;
    }
    let ratio_encoder = encoder_float as f64 / encoder_quant as f64;
    let ratio_total = (encoder_float + host_float) as f64 / (encoder_quant + host_float) as f64;
    CompressionReport {
        encoder_float_bytes: encoder_float,
        encoder_quant_bytes: encoder_quant,
        host_float_bytes: host_float,
        ratio_encoder,
        ratio_total,
    }
}

/// Quantize a float weight set end to end: weights, biases, requant
/// multipliers, LN parameters, then the container.
pub fn quantize_model<R: Real>(
    fw: &FloatWeights<R>,
    specs: &BTreeMap<String, QuantSpec<R>>,
    w_bits: u8,
) -> Result<(FqbtContainer, QuantizedModel, Vec<String>)> {
    let (qm, warnings) = quantize_weights(fw, specs, w_bits)?;
    let container = model_to_container(&qm);
    Ok((container, qm, warnings))
}
