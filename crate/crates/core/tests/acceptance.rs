//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured figure. Run with `cargo test --test acceptance`.

mod common;

use common::*;
use fqbert::bim::{bim_dot, BimConfig, BimVariant, HwConfig, WeightMode};
use fqbert::model::{
    fake_quant_forward, float_oracle_forward, model_forward, sweep_forward, AblationFlags,
    ModelConfig, SiteTrace,
};
use fqbert::qnum::{QTensor, QuantSpec, Scale8};
use fqbert::sched::{estimate_latency, plan_dataflow};
use fqbert::specfn::{layernorm_q, softmax_q, ExpLut, LnParams};
use fqbert::store::{compression_report, ContainerBuilder, DType, FqbtContainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::time::Instant;

fn pass(n: usize, what: &str, detail: String) {
    println!("PASS criterion {n}: {what} — {detail}");
}

#[test]
fn criterion_1_bim_exhaustive_8x8() {
    let t0 = Instant::now();
    for variant in [BimVariant::TypeA, BimVariant::TypeB] {
        let cfg = BimConfig::new(4, variant).unwrap();
        for a in -128i32..=127 {
            for b in -128i32..=127 {
                let got = bim_dot(&[a], &[b], WeightMode::W8, false, &cfg).unwrap();
                assert_eq!(got, a * b, "{a} * {b} under {variant:?}");
            }
        }
    }
    pass(
        1,
        "BIM exhaustive 8x8 equivalence",
        format!("131072 cases (both variants) in {:?}", t0.elapsed()),
    );
}

#[test]
fn criterion_2_pipeline_equivalence_1000_models() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9a7ec0de);
    let hw = HwConfig::default();
    for trial in 0..1000u32 {
        let hidden = *[8usize, 16, 32, 64].get(rng.gen_range(0..4)).unwrap();
        let heads = *[1usize, 2, 4].get(rng.gen_range(0..3)).unwrap();
        let layers = rng.gen_range(0..=2);
        let seq = rng.gen_range(1..=8);
        let mc = ModelConfig::toy(layers, hidden, heads, seq);
        let (_fw, qm) = toy_model(mc, 1000 + trial as u64);
        let ids = random_ids(&mut rng, &mc, seq);

        let mut t_int = SiteTrace::default();
        let logits_int: Vec<f64> =
            model_forward(&ids, &qm, &hw, AblationFlags::all_on(), Some(&mut t_int)).unwrap();
        let mut t_fake = SiteTrace::default();
        let logits_fake: Vec<f64> = fake_quant_forward(&ids, &qm, Some(&mut t_fake)).unwrap();

        assert_eq!(
            logits_int, logits_fake,
            "trial {trial} (h={hidden} heads={heads} l={layers} seq={seq}): logits differ"
        );
        assert_eq!(
            t_int.sites, t_fake.sites,
            "trial {trial}: quantized intermediates differ"
        );
    }
    pass(
        2,
        "pipeline equivalence, integer vs fake-quant",
        format!("1000 random toy models bit-exact in {:?}", t0.elapsed()),
    );
}

#[test]
fn criterion_3_compression_ratio_bert_base() {
    let t0 = Instant::now();
    // BERT-base encoder shapes. Vocabulary size only affects the
    // host-side float block, which cancels out of the encoder
    // accounting; a reduced vocab keeps the test light.
    let mc = ModelConfig {
        vocab_size: 512,
        max_position: 512,
        ..ModelConfig::bert_base()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe27);
    let h = mc.hidden;
    let f = mc.ffn_dim;
    let gen = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f32> {
        (0..n)
            .map(|_| rng.gen_range(-0.5f32..0.5).max(-0.499))
            .collect()
    };
    let layers = (0..mc.num_layers)
        .map(|_| fqbert::model::FloatLayer::<f32> {
            wq: gen(&mut rng, h * h),
            wk: gen(&mut rng, h * h),
            wv: gen(&mut rng, h * h),
            wo: gen(&mut rng, h * h),
            bq: gen(&mut rng, h),
            bk: gen(&mut rng, h),
            bv: gen(&mut rng, h),
            bo: gen(&mut rng, h),
            w1: gen(&mut rng, f * h),
            b1: gen(&mut rng, f),
            w2: gen(&mut rng, h * f),
            b2: gen(&mut rng, h),
            ln1_gamma: vec![1.0; h],
            ln1_beta: vec![0.0; h],
            ln2_gamma: vec![1.0; h],
            ln2_beta: vec![0.0; h],
        })
        .collect();
    let fw = fqbert::model::FloatWeights::<f32> {
        config: mc,
        tok_emb: gen(&mut rng, mc.vocab_size * h),
        pos_emb: gen(&mut rng, mc.max_position * h),
        seg_emb: gen(&mut rng, mc.type_vocab * h),
        emb_ln_gamma: vec![1.0; h],
        emb_ln_beta: vec![0.0; h],
        layers,
        head_w: gen(&mut rng, mc.num_classes * h),
        head_b: gen(&mut rng, mc.num_classes),
    };
    let specs: BTreeMap<String, QuantSpec<f32>> = mc
        .site_names()
        .into_iter()
        .map(|n| {
            let mut s = QuantSpec::new(8, 1.0f32, 0.99).unwrap();
            s.ema_state = Some(1.0);
            (n, s)
        })
        .collect();
    let (qm, _) = fqbert::model::quantize_weights(&fw, &specs, 4).unwrap();
    let container = fqbert::store::model_to_container(&qm);
    let rep = compression_report(&container);

    // Independent byte-counting oracle from the configuration alone
    // (mirrors scripts/compression_oracle.py).
    let (hl, fl, l) = (h as u64, f as u64, mc.num_layers as u64);
    let weight_params = l * (4 * hl * hl + 2 * hl * fl);
    let bias_params = l * (4 * hl + fl + hl);
    let ln_params = l * 4 * hl;
    let oracle_float = 4 * (weight_params + bias_params + ln_params);
    let oracle_quant = weight_params.div_ceil(2)
        + 4 * bias_params
        + ln_params
        + 3 * 12 * l // inline Scale8 on weight and bias tensors
        + 5 * 8 * l // requant entries
        + 3 * (11 * l + 1); // activation site scales
    let oracle_ratio = oracle_float as f64 / oracle_quant as f64;

    assert_eq!(rep.encoder_float_bytes, oracle_float, "float byte oracle");
    assert_eq!(rep.encoder_quant_bytes, oracle_quant, "quant byte oracle");
    assert!(
        (rep.ratio_encoder - 7.94).abs() <= 0.08,
        "encoder ratio {} outside 7.94 +/- 0.08",
        rep.ratio_encoder
    );
    assert!((oracle_ratio - rep.ratio_encoder).abs() < 1e-12);
    pass(
        3,
        "compression ratio (encoder accounting)",
        format!(
            "{:.4}x vs oracle {:.4}x in {:?}",
            rep.ratio_encoder,
            oracle_ratio,
            t0.elapsed()
        ),
    );
}

#[test]
fn criterion_4_softmax_properties() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x50f7);
    // A handful of scales, table built once per scale.
    let luts: Vec<(Scale8, ExpLut)> = [0.25f64, 1.0, 4.0, 16.0, 64.0]
        .iter()
        .map(|&s| {
            let sc = Scale8::from_real(s).unwrap();
            (sc, ExpLut::for_scale(sc).unwrap())
        })
        .collect();

    for _ in 0..100_000 {
        let n = rng.gen_range(2..=128usize);
        let (scale, lut) = &luts[rng.gen_range(0..luts.len())];
        let data: Vec<i32> = (0..n).map(|_| rng.gen_range(-128..=127)).collect();
        let row = QTensor::new(data.clone(), 8, true, vec![n], *scale).unwrap();
        let out = softmax_q(&row, lut).unwrap();

        // Sum bound.
        let sum: i64 = out.data.iter().map(|&v| v as i64).sum();
        assert!(
            (sum - 256).abs() as f64 <= n as f64 / 2.0,
            "sum {sum} violates n/2 bound at n={n}"
        );
        assert!(out.data.iter().any(|&v| v > 0));

        // Exact invariance under a constant shift that stays in range.
        let lo = *data.iter().min().unwrap();
        let hi = *data.iter().max().unwrap();
        let c = rng.gen_range(-128 - lo..=127 - hi);
        if c != 0 {
            let shifted = QTensor::new(
                data.iter().map(|v| v + c).collect(),
                8,
                true,
                vec![n],
                *scale,
            )
            .unwrap();
            assert_eq!(softmax_q(&shifted, lut).unwrap().data, out.data);
        }

        // Monotonicity: larger input never gets a smaller output.
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by_key(|&i| data[i]);
        for w in idx.windows(2) {
            if data[w[1]] > data[w[0]] {
                assert!(out.data[w[1]] >= out.data[w[0]]);
            }
        }
    }

    // n = 1 saturates to [255] by construction (the n/2 sum bound is
    // vacuous there: 256 rails at the 8-bit maximum).
    let (scale, lut) = &luts[1];
    let one = QTensor::new(vec![5], 8, true, vec![1], *scale).unwrap();
    assert_eq!(softmax_q(&one, lut).unwrap().data, vec![255]);

    pass(
        4,
        "softmax sum/shift/monotonicity",
        format!("100000 rows in {:?}", t0.elapsed()),
    );
}

#[test]
fn criterion_5_layernorm_oracle_proximity() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e);
    let mut max_dev = 0i32;
    for trial in 0..1000usize {
        let n = [8usize, 64, 768][trial % 3];
        let s1 = Scale8::from_real(2.0f64.powf(rng.gen_range(3.0..6.0))).unwrap();
        let s2 = Scale8::from_real(2.0f64.powf(rng.gen_range(3.0..6.0))).unwrap();
        let s_out = Scale8::from_real(2.0f64.powf(rng.gen_range(3.0..6.0))).unwrap();
        let x1 = QTensor::new(
            (0..n).map(|_| rng.gen_range(-127..=127)).collect(),
            8,
            true,
            vec![n],
            s1,
        )
        .unwrap();
        let x2 = QTensor::new(
            (0..n).map(|_| rng.gen_range(-127..=127)).collect(),
            8,
            true,
            vec![n],
            s2,
        )
        .unwrap();
        let gamma: Vec<i8> = (0..n).map(|_| rng.gen_range(-127..=127)).collect();
        let beta: Vec<i8> = (0..n).map(|_| rng.gen_range(-64..=64)).collect();
        let p = LnParams {
            gamma: gamma.clone(),
            beta: beta.clone(),
            epsilon: fqbert::specfn::LN_EPSILON,
        };

        let got = layernorm_q(&x1, &x2, &p, 8, s_out).unwrap();

        // Real-arithmetic oracle, recomputed from scratch in f64.
        let v: Vec<f64> = (0..n)
            .map(|i| x1.data[i] as f64 / s1.value() + x2.data[i] as f64 / s2.value())
            .collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + 0.0009765625).sqrt();
        for i in 0..n {
            let y = gamma[i] as f64 / 64.0 * (v[i] - mean) * inv + beta[i] as f64 / 64.0;
            let want = (y * s_out.value()).round().clamp(-127.0, 127.0) as i32;
            let dev = (got.data[i] - want).abs();
            max_dev = max_dev.max(dev);
            assert!(
                dev <= 3,
                "trial {trial} n={n} element {i}: fixed {} vs oracle {want}",
                got.data[i]
            );
        }
    }

    // Constant input rows return quantize(beta) exactly.
    let s = Scale8::from_real(16.0).unwrap();
    let n = 64;
    let x1 = QTensor::new(vec![19; n], 8, true, vec![n], s).unwrap();
    let x2 = QTensor::new(vec![0; n], 8, true, vec![n], s).unwrap();
    let beta: Vec<i8> = (0..n).map(|i| (i as i8).wrapping_mul(3)).collect();
    let p = LnParams {
        gamma: vec![64; n],
        beta: beta.clone(),
        epsilon: fqbert::specfn::LN_EPSILON,
    };
    let out = layernorm_q(&x1, &x2, &p, 8, s).unwrap();
    for (got, b) in out.data.iter().zip(&beta) {
        let want = ((*b as f64 / 64.0) * 16.0).round().clamp(-127.0, 127.0) as i32;
        assert_eq!(*got, want);
    }

    pass(
        5,
        "LN fixed-point vs real oracle",
        format!(
            "1000 trials, max deviation {max_dev} LSB (bound 3) in {:?}",
            t0.elapsed()
        ),
    );
}

#[test]
fn criterion_6_perf_model_ratio() {
    let t0 = Instant::now();
    let mc = ModelConfig::bert_base();
    let mk = |pes: usize, m: usize| {
        HwConfig::new(12, pes, BimConfig::new(m, BimVariant::TypeA).unwrap()).unwrap()
    };
    let h8 = mk(8, 16);
    let h16 = mk(16, 16);
    let r8 = estimate_latency(&plan_dataflow(&mc, &h8, None).unwrap(), &h8);
    let r16 = estimate_latency(&plan_dataflow(&mc, &h16, None).unwrap(), &h16);
    let ratio = r8.latency_ms / r16.latency_ms;
    assert!(
        (1.6..=2.05).contains(&ratio),
        "latency ratio {ratio} outside [1.6, 2.05] ({} ms / {} ms)",
        r8.latency_ms,
        r16.latency_ms
    );
    pass(
        6,
        "perf-model latency ratio (N=8 vs N=16, M=16, 12 PUs)",
        format!(
            "{:.2} ms / {:.2} ms = {ratio:.3} in [1.6, 2.05] in {:?}",
            r8.latency_ms,
            r16.latency_ms,
            t0.elapsed()
        ),
    );
}

#[test]
fn criterion_7_error_monotone_in_bitwidth() {
    let t0 = Instant::now();
    let mc = ModelConfig::toy(2, 32, 4, 6);
    let fw = toy_weights(mc, 0xf192);
    let mut rng = ChaCha8Rng::seed_from_u64(0xf193);
    let probes: Vec<Vec<u32>> = (0..32).map(|_| random_ids(&mut rng, &mc, 6)).collect();
    let oracles: Vec<Vec<f64>> = probes
        .iter()
        .map(|ids| float_oracle_forward(ids, &fw).unwrap())
        .collect();
    let mut errs = Vec::new();
    for k in [2u8, 3, 4, 6, 8] {
        let mut total = 0.0;
        for (ids, want) in probes.iter().zip(&oracles) {
            let got = sweep_forward(ids, &fw, Some(k)).unwrap();
            total += fqbert::model::logit_rel_error(&got, want);
        }
        errs.push(total / probes.len() as f64);
    }
    for w in errs.windows(2) {
        assert!(w[0] >= w[1], "error increased with bitwidth: {errs:?}");
    }
    pass(
        7,
        "mean relative logit error non-increasing in k",
        format!("errors {errs:?} in {:?}", t0.elapsed()),
    );
}

#[test]
fn criterion_8_tiling_invariance() {
    let t0 = Instant::now();
    let mc = ModelConfig::toy(2, 64, 4, 8);
    let (_fw, qm) = toy_model(mc, 0x711e);
    let mut rng = ChaCha8Rng::seed_from_u64(0x71d);
    let ids = random_ids(&mut rng, &mc, 8);
    let configs = [
        (1usize, 1usize, 2usize),
        (2, 3, 4),
        (12, 8, 16),
        (12, 16, 16),
        (3, 5, 8),
    ];
    let mut reference: Option<(Vec<f64>, SiteTrace)> = None;
    for (pus, pes, m) in configs {
        let hw = HwConfig::new(pus, pes, BimConfig::new(m, BimVariant::TypeB).unwrap()).unwrap();
        let mut trace = SiteTrace::default();
        let logits: Vec<f64> =
            model_forward(&ids, &qm, &hw, AblationFlags::all_on(), Some(&mut trace)).unwrap();
        match &reference {
            None => reference = Some((logits, trace)),
            Some((l0, t0)) => {
                assert_eq!(&logits, l0, "logits differ under ({pus},{pes},{m})");
                assert_eq!(&trace.sites, &t0.sites);
            }
        }
    }
    pass(
        8,
        "tiling invariance across 5 hardware configs",
        format!("identical logits and intermediates in {:?}", t0.elapsed()),
    );
}

#[test]
fn criterion_9_container_round_trip_and_crc() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ff);
    for trial in 0..100usize {
        let mut b = ContainerBuilder::new();
        let n_tensors = rng.gen_range(1..=12);
        for t in 0..n_tensors {
            let elems = rng.gen_range(1..=64usize);
            let dtype = [
                DType::I4Packed,
                DType::I8,
                DType::U8,
                DType::I32,
                DType::LnParam8,
                DType::F32,
            ][rng.gen_range(0..6)];
            let len = dtype.byte_len(elems) as usize;
            let mut bytes = vec![0u8; len];
            rng.fill(&mut bytes[..]);
            if dtype == DType::I4Packed && elems % 2 == 1 {
                let last = bytes.len() - 1;
                bytes[last] &= 0x0F; // odd pad nibble stays zero
            }
            let scale = Scale8::from_real(2.0f64.powi(rng.gen_range(-8..8))).unwrap();
            b.add(
                format!("t{trial}_{t}"),
                dtype,
                Some(scale),
                vec![elems],
                &bytes,
            );
        }
        let c = b.finish(ModelConfig::toy(1, 8, 2, 4));
        let bytes = c.to_bytes();
        let c2 = FqbtContainer::from_bytes(&bytes).unwrap();
        assert_eq!(c, c2, "trial {trial}: struct round trip");
        assert_eq!(c2.to_bytes(), bytes, "trial {trial}: byte round trip");

        if !c.payload.is_empty() {
            let mut corrupted = bytes.clone();
            let payload_start = corrupted.len() - c.payload.len();
            let at = payload_start + rng.gen_range(0..c.payload.len());
            corrupted[at] ^= 1 << rng.gen_range(0..8);
            assert!(
                matches!(
                    FqbtContainer::from_bytes(&corrupted),
                    Err(fqbert::error::Error::Checksum { .. })
                ),
                "trial {trial}: corruption at byte {at} undetected"
            );
        }
    }
    pass(
        9,
        "container round-trip byte equality + CRC detection",
        format!("100 random containers in {:?}", t0.elapsed()),
    );
}
