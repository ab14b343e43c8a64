//! Seeded synthetic checkpoint generator so every workflow runs
//! without external model downloads.
//!
//! Distributions: weights uniform in [-0.5, 0.5], biases in
//! [-0.1, 0.1], LN gamma in [0.5, 1.5], LN beta in [-0.1, 0.1], token
//! embeddings in [-1, 1], position embeddings in [-0.5, 0.5], segment
//! embeddings in [-0.25, 0.25], head like a weight matrix. Values are
//! rounded through f32 (the checkpoint stores f32).

use fqbert::model::{FloatLayer, FloatWeights, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| rng.gen_range(lo..hi) as f32 as f64)
        .collect()
}

pub fn synthesize(mc: ModelConfig, seed: u64) -> FloatWeights<f64> {
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

pub fn random_sequences(mc: &ModelConfig, count: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00ca_11b5_eed0);
    (0..count)
        .map(|_| {
            (0..mc.seq_len)
                .map(|_| rng.gen_range(0..mc.vocab_size as u32))
                .collect()
        })
        .collect()
}
