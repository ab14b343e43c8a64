//! Encoder graph behavior: degenerate cases from the operation
//! contracts, engine agreement, and the sweep/ablation machinery.

mod common;

use common::*;
use fqbert::bim::HwConfig;
use fqbert::model::{
    ablation_forward, dequantize_model, fake_quant_forward, float_oracle_forward, mha_forward,
    model_forward, sweep_forward, AblationFlags, ModelConfig, SiteTrace,
};
use fqbert::qnum::{dequantize, QTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn hw() -> HwConfig {
    HwConfig::default()
}

#[test]
fn pipeline_equivalence_smoke() {
    let mc = ModelConfig::toy(2, 16, 2, 5);
    let (_fw, qm) = toy_model(mc, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ids = random_ids(&mut rng, &mc, 5);

    let mut t_int = SiteTrace::default();
    let logits_int: Vec<f64> =
        model_forward(&ids, &qm, &hw(), AblationFlags::all_on(), Some(&mut t_int)).unwrap();
    let mut t_fake = SiteTrace::default();
    let logits_fake: Vec<f64> = fake_quant_forward(&ids, &qm, Some(&mut t_fake)).unwrap();

    assert_eq!(logits_int, logits_fake, "logits must agree bit-exactly");
    assert_eq!(t_int.sites.len(), t_fake.sites.len());
    for (site, vals) in &t_int.sites {
        assert_eq!(Some(vals), t_fake.sites.get(site), "site {site}");
    }
}

#[test]
fn single_token_attention_saturates_softmax() {
    let mc = ModelConfig::toy(1, 8, 2, 1);
    let (_fw, qm) = toy_model(mc, 11);
    let x0 = {
        // Any in-range 8-bit input row.
        let s = qm.scales["embed_out"].q;
        QTensor::new(vec![3, -5, 7, 0, 1, -2, 4, 6], 8, true, vec![1, 8], s).unwrap()
    };
    let mut trace = SiteTrace::default();
    mha_forward(&qm, 0, &x0, &hw(), Some(&mut trace)).unwrap();
    let attn = &trace.sites["layer0.attn"];
    assert_eq!(
        attn.as_slice(),
        &[255, 255],
        "1x1 attention saturates per head"
    );
}

#[test]
fn zero_input_projections_reduce_to_bias() {
    let mc = ModelConfig::toy(1, 8, 2, 2);
    let (_fw, qm) = toy_model(mc, 13);
    let s = qm.scales["embed_out"].q;
    let x0 = QTensor::new(vec![0; 16], 8, true, vec![2, 8], s).unwrap();
    let mut trace = SiteTrace::default();
    mha_forward(&qm, 0, &x0, &hw(), Some(&mut trace)).unwrap();
    // Every row of Q equals requantize(bias) alone.
    let l = &qm.layers[0];
    let want: Vec<i32> = (0..8)
        .map(|r| fqbert::qnum::requantize(0, l.bq.data[r], &l.rm_q, 8, true))
        .collect();
    let q = &trace.sites["layer0.q"];
    assert_eq!(&q[..8], want.as_slice());
    assert_eq!(
        &q[8..],
        want.as_slice(),
        "both rows identical for zero input"
    );
}

#[test]
fn all_flags_off_matches_float_oracle() {
    let mc = ModelConfig::toy(2, 16, 4, 4);
    let (fw, qm) = toy_model(mc, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let ids = random_ids(&mut rng, &mc, 4);
    let deq = dequantize_model::<f64>(&qm);
    let got: Vec<f64> = ablation_forward(&ids, &deq, &qm, AblationFlags::all_off(), None).unwrap();
    let want = float_oracle_forward(&ids, &deq).unwrap();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-5 * w.abs().max(1.0), "{g} vs {w}");
    }
    // And through model_forward's flag dispatch too.
    let got2: Vec<f64> = model_forward(&ids, &qm, &hw(), AblationFlags::all_off(), None).unwrap();
    for (g, w) in got2.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-5 * w.abs().max(1.0));
    }
    let _ = fw;
}

#[test]
fn zero_layer_model_is_pure_host_path() {
    let mc = ModelConfig::toy(0, 8, 2, 3);
    let (fw, qm) = toy_model(mc, 23);
    let ids = vec![1, 2, 3];
    let a: Vec<f64> = model_forward(&ids, &qm, &hw(), AblationFlags::all_on(), None).unwrap();
    let b: Vec<f64> = fake_quant_forward(&ids, &qm, None).unwrap();
    let c = float_oracle_forward(&ids, &dequantize_model::<f64>(&qm)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c, "0-layer logits are the float head of the embedding");
    let _ = fw;
}

#[test]
fn gelu_lut_zero_and_ffn_bias_path() {
    let mc = ModelConfig::toy(1, 8, 2, 2);
    let (_fw, qm) = toy_model(mc, 29);
    let l = &qm.layers[0];
    assert_eq!(l.gelu_lut.apply(0), 0, "GELU(0) = 0 exactly");

    // x = 0 into the FFN: ffn1 output is requantized bias alone.
    let s_ln1 = qm.scales["layer0.ln1_out"].q;
    let u = QTensor::new(vec![0; 16], 8, true, vec![2, 8], s_ln1).unwrap();
    let mut trace = SiteTrace::default();
    fqbert::model::ffn_forward(&qm, 0, &u, &hw(), Some(&mut trace)).unwrap();
    let f1 = &trace.sites["layer0.ffn1_out"];
    let want: Vec<i32> = (0..mc.ffn_dim)
        .map(|r| fqbert::qnum::requantize(0, l.b1.data[r], &l.rm_ffn1, 8, true))
        .collect();
    assert_eq!(&f1[..mc.ffn_dim], want.as_slice());
    let g = &trace.sites["layer0.gelu_out"];
    let want_g: Vec<i32> = want.iter().map(|&v| l.gelu_lut.apply(v)).collect();
    assert_eq!(
        &g[..mc.ffn_dim],
        want_g.as_slice(),
        "h = act_lut(requantized biases)"
    );
}

#[test]
fn ablation_rows_quantized_site_counts_monotone() {
    let mc = ModelConfig::toy(2, 16, 2, 4);
    let rows = AblationFlags::table_rows();
    let counts: Vec<usize> = rows.iter().map(|f| f.quantized_site_count(&mc)).collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert_eq!(counts[0], 0);
}

#[test]
fn sweep_is_weight_only_and_passthrough_at_none() {
    let mc = ModelConfig::toy(1, 16, 2, 4);
    let (fw, _qm) = toy_model(mc, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let ids = random_ids(&mut rng, &mc, 4);
    let oracle = float_oracle_forward(&ids, &fw).unwrap();
    let pass = sweep_forward(&ids, &fw, None).unwrap();
    let err = fqbert::model::logit_rel_error(&pass, &oracle);
    assert!(err < 1e-9, "float passthrough differs from oracle by {err}");
    let q2 = sweep_forward(&ids, &fw, Some(2)).unwrap();
    assert!(fqbert::model::logit_rel_error(&q2, &oracle) > err);
}

#[test]
fn error_monotonicity_smoke() {
    let mc = ModelConfig::toy(1, 16, 2, 4);
    let fw = toy_weights(mc, 37);
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let probes: Vec<Vec<u32>> = (0..8).map(|_| random_ids(&mut rng, &mc, 4)).collect();
    let mut errs = Vec::new();
    for k in [2u8, 4, 8] {
        let mut total = 0.0;
        for ids in &probes {
            let got = sweep_forward(ids, &fw, Some(k)).unwrap();
            let want = float_oracle_forward(ids, &fw).unwrap();
            total += fqbert::model::logit_rel_error(&got, &want);
        }
        errs.push(total / probes.len() as f64);
    }
    assert!(errs[0] >= errs[1] && errs[1] >= errs[2], "{errs:?}");
}

#[test]
fn cosine_similarity_improves_with_bitwidth() {
    let mc = ModelConfig::toy(1, 16, 2, 4);
    let fw = toy_weights(mc, 41);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let ids = random_ids(&mut rng, &mc, 4);
    let oracle = float_oracle_forward(&ids, &fw).unwrap();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let c2 = cos(&sweep_forward(&ids, &fw, Some(2)).unwrap(), &oracle);
    let c4 = cos(&sweep_forward(&ids, &fw, Some(4)).unwrap(), &oracle);
    let c8 = cos(&sweep_forward(&ids, &fw, Some(8)).unwrap(), &oracle);
    assert!(c8 >= c4 && c4 >= c2, "cosine {c2} {c4} {c8}");
}

#[test]
fn oracle_deterministic_and_zero_weight_head_bias() {
    let mc = ModelConfig::toy(1, 8, 2, 3);
    let mut fw = toy_weights(mc, 43);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let ids = random_ids(&mut rng, &mc, 3);
    let a = float_oracle_forward(&ids, &fw).unwrap();
    let b = float_oracle_forward(&ids, &fw).unwrap();
    assert_eq!(a, b);
    // Zero head weights: logits collapse to the head bias.
    for v in fw.head_w.iter_mut() {
        *v = 0.0;
    }
    let c = float_oracle_forward(&ids, &fw).unwrap();
    assert_eq!(c, fw.head_b);
}

#[test]
fn softmax_rows_sum_bound_inside_attention() {
    let mc = ModelConfig::toy(1, 16, 2, 6);
    let (_fw, qm) = toy_model(mc, 47);
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    let ids = random_ids(&mut rng, &mc, 6);
    let mut trace = SiteTrace::default();
    let _: Vec<f64> =
        model_forward(&ids, &qm, &hw(), AblationFlags::all_on(), Some(&mut trace)).unwrap();
    let attn = &trace.sites["layer0.attn"];
    let seq = 6;
    for row in attn.chunks(seq) {
        let sum: i32 = row.iter().sum();
        assert!(
            (sum - 256).unsigned_abs() as usize <= seq.div_ceil(2),
            "row sum {sum}"
        );
    }
}

#[test]
fn requantize_idempotence_on_dequantized_model() {
    let mc = ModelConfig::toy(2, 16, 2, 4);
    let fw = toy_weights(mc, 53);
    let specs = calibrated_specs(&fw, 53);
    let (qm, _) = fqbert::model::quantize_weights(&fw, &specs, mc.w_bits).unwrap();
    let deq = dequantize_model::<f64>(&qm);
    let (qm2, _) = fqbert::model::quantize_weights(&deq, &specs, mc.w_bits).unwrap();
    for (a, b) in qm.layers.iter().zip(&qm2.layers) {
        assert_eq!(a.wq.data, b.wq.data);
        assert_eq!(a.w1.data, b.w1.data);
        assert_eq!(a.bq.data, b.bq.data);
        assert_eq!(a.ln1.gamma, b.ln1.gamma);
    }
}

#[test]
fn intermediates_within_declared_ranges() {
    let mc = ModelConfig::toy(2, 16, 2, 4);
    let (_fw, qm) = toy_model(mc, 59);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let ids = random_ids(&mut rng, &mc, 4);
    let mut trace = SiteTrace::default();
    let _: Vec<f64> =
        model_forward(&ids, &qm, &hw(), AblationFlags::all_on(), Some(&mut trace)).unwrap();
    for (site, vals) in &trace.sites {
        let (lo, hi) = if site.ends_with(".attn") {
            (0, 255)
        } else {
            (-127, 127)
        };
        for &v in vals {
            assert!(v >= lo && v <= hi, "{site}: {v} outside [{lo}, {hi}]");
        }
    }
}

#[test]
fn dequantized_weights_round_trip_values() {
    let mc = ModelConfig::toy(1, 8, 2, 2);
    let (_fw, qm) = toy_model(mc, 61);
    let deq = dequantize_model::<f64>(&qm);
    let w: Vec<f64> = dequantize(&qm.layers[0].wq);
    assert_eq!(deq.layers[0].wq, w);
}

#[test]
fn zero_weights_and_gamma_collapse_to_beta() {
    let mc = ModelConfig::toy(1, 8, 2, 3);
    let (_fw, mut qm) = toy_model(mc, 67);
    // Zero out layer 0's integer weights and biases and its LN gains;
    // scales stay valid so the layer still runs.
    {
        let l = &mut qm.layers[0];
        for t in [
            &mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2,
        ] {
            t.data.iter_mut().for_each(|v| *v = 0);
        }
        for t in [
            &mut l.bq, &mut l.bk, &mut l.bv, &mut l.bo, &mut l.b1, &mut l.b2,
        ] {
            t.data.iter_mut().for_each(|v| *v = 0);
        }
        l.ln1.gamma.iter_mut().for_each(|g| *g = 0);
        l.ln2.gamma.iter_mut().for_each(|g| *g = 0);
    }
    let s_in = qm.scales["embed_out"].q;
    let x = QTensor::new(
        vec![
            11, -3, 7, 0, 5, -9, 2, 1, 4, -4, 6, -6, 8, -8, 3, -2, 1, 0, -1, 2, 9, -7, 5, -5,
        ],
        8,
        true,
        vec![3, 8],
        s_in,
    )
    .unwrap();
    let y = fqbert::model::encoder_layer_forward(&qm, 0, &x, &hw(), None).unwrap();
    // gamma = 0 everywhere means every row is quantize(beta) of ln2.
    let s_out = qm.scales["layer0.ln2_out"].q;
    let want: Vec<i32> = qm.layers[0]
        .ln2
        .beta
        .iter()
        .map(|&b| {
            ((b as f64 / 64.0) * s_out.value())
                .round()
                .clamp(-127.0, 127.0) as i32
        })
        .collect();
    for t in 0..3 {
        assert_eq!(y.row(t), want.as_slice(), "row {t}");
    }
}
