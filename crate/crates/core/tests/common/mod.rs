//! Shared test fixtures: seeded toy weight sets and a calibrated
//! quantized model.

use fqbert::model::{quantize_weights, FloatLayer, FloatWeights, ModelConfig, QuantizedModel};
use fqbert::qnum::QuantSpec;
use fqbert::store::{calibrate, CalibStream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    // Values round through f32, as they would coming from a checkpoint.
    (0..n)
        .map(|_| rng.gen_range(lo..hi) as f32 as f64)
        .collect()
}

pub fn toy_weights(mc: ModelConfig, seed: u64) -> FloatWeights<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = mc.hidden;
    let f = mc.ffn_dim;
    let layers = (0..mc.num_layers)
        .map(|_| FloatLayer {
            wq: uniform(&mut rng, h * h, -0.5, 0.5),
            wk: uniform(&mut rng, h * h, -0.5, 0.5),
            wv: uniform(&mut rng, h * h, -0.5, 0.5),
            wo: uniform(&mut rng, h * h, -0.5, 0.5),
            bq: uniform(&mut rng, h, -0.1, 0.1),
            bk: uniform(&mut rng, h, -0.1, 0.1),
            bv: uniform(&mut rng, h, -0.1, 0.1),
            bo: uniform(&mut rng, h, -0.1, 0.1),
            w1: uniform(&mut rng, f * h, -0.5, 0.5),
            b1: uniform(&mut rng, f, -0.1, 0.1),
            w2: uniform(&mut rng, h * f, -0.5, 0.5),
            b2: uniform(&mut rng, h, -0.1, 0.1),
            ln1_gamma: uniform(&mut rng, h, 0.5, 1.5),
            ln1_beta: uniform(&mut rng, h, -0.1, 0.1),
            ln2_gamma: uniform(&mut rng, h, 0.5, 1.5),
            ln2_beta: uniform(&mut rng, h, -0.1, 0.1),
        })
        .collect();
    FloatWeights {
        config: mc,
        tok_emb: uniform(&mut rng, mc.vocab_size * h, -1.0, 1.0),
        pos_emb: uniform(&mut rng, mc.max_position * h, -0.5, 0.5),
        seg_emb: uniform(&mut rng, mc.type_vocab * h, -0.25, 0.25),
        emb_ln_gamma: uniform(&mut rng, h, 0.5, 1.5),
        emb_ln_beta: uniform(&mut rng, h, -0.1, 0.1),
        layers,
        head_w: uniform(&mut rng, mc.num_classes * h, -0.5, 0.5),
        head_b: uniform(&mut rng, mc.num_classes, -0.1, 0.1),
    }
}

pub fn random_ids(rng: &mut ChaCha8Rng, mc: &ModelConfig, len: usize) -> Vec<u32> {
    (0..len)
        .map(|_| rng.gen_range(0..mc.vocab_size as u32))
        .collect()
}

pub fn calibrated_specs(fw: &FloatWeights<f64>, seed: u64) -> BTreeMap<String, QuantSpec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1_ab1e);
    let mc = &fw.config;
    let sequences: Vec<Vec<u32>> = (0..3)
        .map(|_| random_ids(&mut rng, mc, mc.seq_len))
        .collect();
    let stream = CalibStream { sequences };
    calibrate(fw, &stream, mc.a_bits, 0.99).expect("calibration succeeds on toy weights")
}

pub fn toy_model(mc: ModelConfig, seed: u64) -> (FloatWeights<f64>, QuantizedModel) {
    let fw = toy_weights(mc, seed);
    let specs = calibrated_specs(&fw, seed);
    let (qm, _warnings) = quantize_weights(&fw, &specs, mc.w_bits).expect("quantization succeeds");
    (fw, qm)
}
