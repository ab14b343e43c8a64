//! Persistence behavior: checkpoint schema enforcement, calibration
//! examples, container round trips, and compression accounting.

mod common;

use common::*;
use fqbert::error::Error;
use fqbert::model::ModelConfig;
use fqbert::qnum::act_scale;
use fqbert::store::{
    calibrate, compression_report, export_float_checkpoint, import_float_checkpoint,
    model_from_container, model_to_container, CalibStream, FqbtContainer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn checkpoint_round_trip_and_schema_errors() {
    let mc = ModelConfig::toy(1, 8, 2, 4);
    let fw = toy_weights(mc, 71);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.fqck");
    export_float_checkpoint(&fw, &path).unwrap();
    let back = import_float_checkpoint::<f64>(&path, &mc).unwrap();
    // f32 on disk: values round through f32.
    assert_eq!(back.layers[0].wq.len(), 64);
    assert!((back.layers[0].wq[0] - fw.layers[0].wq[0]).abs() < 1e-7);

    // A 2-layer config over a 1-layer checkpoint names the first
    // missing tensor.
    let mc2 = ModelConfig::toy(2, 8, 2, 4);
    match import_float_checkpoint::<f64>(&path, &mc2) {
        Err(Error::MissingTensor(name)) => assert_eq!(name, "layer1.Wq"),
        other => panic!("expected MissingTensor, got {other:?}"),
    }

    // Wrong hidden dim reports both shapes.
    let mc3 = ModelConfig::toy(1, 16, 2, 4);
    match import_float_checkpoint::<f64>(&path, &mc3) {
        Err(Error::ShapeMismatch {
            name,
            expected,
            found,
        }) => {
            assert_eq!(name, "embed.token");
            assert_eq!(expected, vec![mc3.vocab_size, 16]);
            assert_eq!(found, vec![mc.vocab_size, 8]);
        }
        other => panic!("expected ShapeMismatch, got {other:?}"),
    }
}

#[test]
fn calibration_examples() {
    let mc = ModelConfig::toy(1, 8, 2, 4);
    let fw = toy_weights(mc, 73);
    let mut rng = ChaCha8Rng::seed_from_u64(74);
    let seq = random_ids(&mut rng, &mc, 4);

    // Single batch: EMA initializes to the batch max.
    let one = CalibStream {
        sequences: vec![seq.clone()],
    };
    let specs1 = calibrate(&fw, &one, 8, 0.99).unwrap();

    // Two identical batches: EMA fixed point, same scales.
    let two = CalibStream {
        sequences: vec![seq.clone(), seq.clone()],
    };
    let specs2 = calibrate(&fw, &two, 8, 0.99).unwrap();
    for (name, s1) in &specs1 {
        let s2 = &specs2[name];
        assert_eq!(s1.ema_state, s2.ema_state, "{name}");
        assert_eq!(
            act_scale(s1).unwrap(),
            act_scale(s2).unwrap(),
            "{name}: identical batches must give identical scales"
        );
    }

    // Empty stream is a calibration error.
    let empty = CalibStream { sequences: vec![] };
    assert!(matches!(
        calibrate(&fw, &empty, 8, 0.99),
        Err(Error::NotCalibrated(_))
    ));
}

#[test]
fn ema_two_batch_recurrence() {
    // maxima 1.0 then 2.0 at decay 0.99 -> ema 1.01 -> s = 127/1.01.
    let e0 = fqbert::qnum::ema_update(None, 1.0f64, 0.99);
    let e1 = fqbert::qnum::ema_update(Some(e0), 2.0, 0.99);
    assert!((e1 - 1.01).abs() < 1e-12);
    let mut spec = fqbert::qnum::QuantSpec::new(8, 1.0f64, 0.99).unwrap();
    spec.ema_state = Some(e1);
    assert!((act_scale(&spec).unwrap() - 127.0 / 1.01).abs() < 1e-9);
}

#[test]
fn calib_stream_parsing() {
    let mc = ModelConfig::toy(1, 8, 2, 4);
    let s = CalibStream::parse("1 2 3 4\n7 8\n\n5 6 7 8 9 10\n", &mc).unwrap();
    assert_eq!(s.sequences.len(), 3);
    assert_eq!(s.sequences[0], vec![1, 2, 3, 4]);
    assert_eq!(s.sequences[1], vec![7, 8, 0, 0], "short lines pad with 0");
    assert_eq!(s.sequences[2], vec![5, 6, 7, 8], "long lines truncate");
    assert!(
        CalibStream::parse("1 999 2 3\n", &mc).is_err(),
        "vocab bound enforced"
    );
    assert!(CalibStream::parse("1 x 2 3\n", &mc).is_err());
}

#[test]
fn model_container_round_trip() {
    let mc = ModelConfig::toy(2, 16, 2, 4);
    let (_fw, qm) = toy_model(mc, 79);
    let c = model_to_container(&qm);
    let bytes = c.to_bytes();
    let c2 = FqbtContainer::from_bytes(&bytes).unwrap();
    assert_eq!(c, c2);
    let qm2 = model_from_container(&c2).unwrap();
    // The container stores Scale8 only; the raw EMA scale collapses to
    // the quantized value on reload. Everything else round-trips.
    let mut qm_norm = qm.clone();
    for s in qm_norm.scales.values_mut() {
        s.raw = s.q.value();
    }
    assert_eq!(qm_norm, qm2, "container preserves the whole model");
    // Deterministic serialization.
    assert_eq!(model_to_container(&qm2).to_bytes(), bytes);
}

#[test]
fn container_validation_catches_missing_site() {
    let mc = ModelConfig::toy(1, 8, 2, 4);
    let (_fw, qm) = toy_model(mc, 83);
    let mut c = model_to_container(&qm);
    let idx = c
        .entries
        .iter()
        .position(|e| e.name == "layer0.scores")
        .unwrap();
    c.entries.remove(idx);
    match model_from_container(&c) {
        Err(Error::MissingTensor(name)) => assert_eq!(name, "layer0.scores"),
        other => panic!("expected MissingTensor, got {other:?}"),
    }
}

#[test]
fn compression_accounting_on_toy() {
    let mc = ModelConfig::toy(2, 16, 2, 4);
    let (_fw, qm) = toy_model(mc, 89);
    let c = model_to_container(&qm);
    let rep = compression_report(&c);

    // Independent byte counting from the configuration.
    let h = mc.hidden as u64;
    let f = mc.ffn_dim as u64;
    let l = mc.num_layers as u64;
    let weight_params = l * (4 * h * h + 2 * h * f);
    let bias_params = l * (4 * h + f + h);
    let ln_params = l * 4 * h;
    let float_bytes = 4 * (weight_params + bias_params + ln_params);
    assert_eq!(rep.encoder_float_bytes, float_bytes);

    let quant_bytes = weight_params.div_ceil(2) + 3 * 6 * l // packed weights + inline scales
        + bias_params * 4 + 3 * 6 * l                        // biases + inline scales
        + ln_params                                          // Q1.6 params
        + 5 * 8 * l                                          // requant entries
        + 3 * (11 * l + 1); // site scales
    assert_eq!(rep.encoder_quant_bytes, quant_bytes);
    assert!(rep.ratio_encoder > rep.ratio_total);
}

#[test]
fn degenerate_zero_weight_tensor_is_surfaced() {
    let mc = ModelConfig::toy(1, 8, 2, 4);
    let mut fw = toy_weights(mc, 97);
    for v in fw.layers[0].wv.iter_mut() {
        *v = 0.0;
    }
    let specs = calibrated_specs(&fw, 97);
    match fqbert::model::quantize_weights(&fw, &specs, 4) {
        Err(Error::DegenerateScale(name)) => assert_eq!(name, "layer0.Wv"),
        other => panic!("expected DegenerateScale, got {other:?}"),
    }
}
