use std::collections::BTreeMap;

use dicc_core::datasets::{gen_rds, RdsConfig, StereoSample};
use dicc_core::gradcheck::{grad_check, GradCheckConfig};
use dicc_core::model::{ModelConfig, ModelWeights};
use dicc_core::training::*;
use dicc_core::{DisparityMap, Error, Graph, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn map(h: usize, w: usize, f: impl FnMut(usize) -> f32) -> DisparityMap {
    DisparityMap::dense(h, w, (0..h * w).map(f).collect()).unwrap()
}

fn loss_of(coarse_off: f32, refined_off: f32) -> f64 {
    let gt = map(3, 4, |i| i as f32);
    let c = map(3, 4, |i| i as f32 + coarse_off);
    let r = map(3, 4, |i| i as f32 + refined_off);
    total_loss_maps(&c, &r, &gt, &[true; 12], &LossConfig::default()).unwrap()
}

#[test]
fn loss_hand_cases() {
    assert_eq!(LossConfig::default().lambda, 1.25);
    assert!(loss_of(0.0, 0.0).abs() < 1e-9);
    assert!((loss_of(0.5, 0.0) - 0.125).abs() < 1e-9);
    assert!((loss_of(0.0, 2.0) - 1.875).abs() < 1e-9);
}

#[test]
fn loss_rejects_empty_mask_and_bad_lambda() {
    let gt = map(2, 2, |_| 1.0);
    let err = total_loss_maps(&gt, &gt, &gt, &[false; 4], &LossConfig::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)), "{err}");
    assert!(LossConfig { lambda: 0.0 }.validate().is_err());
    let small = map(1, 4, |_| 1.0);
    assert!(total_loss_maps(&small, &gt, &gt, &[true; 4], &LossConfig::default()).is_err());
}

#[test]
fn loss_nonnegative_and_zero_only_at_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = map(4, 5, |i| (i % 7) as f32);
    for _ in 0..50 {
        let c = map(4, 5, |i| (i % 7) as f32 + rng.gen_range(-3.0..3.0));
        let r = map(4, 5, |i| (i % 7) as f32 + rng.gen_range(-3.0..3.0));
        assert!(total_loss_maps(&c, &r, &gt, &[true; 20], &LossConfig::default()).unwrap() > 0.0);
    }
}

#[test]
fn excluded_pixels_get_zero_gradient() {
    let d = 12;
    let values: Vec<f32> = (0..20)
        .map(|i| if i % 3 == 0 { 12.0 + i as f32 } else { i as f32 * 0.5 })
        .collect();
    let mut valid = vec![true; 20];
    valid[4] = false;
    let gt = DisparityMap::new(4, 5, values, valid).unwrap();
    let targets = LossTargets::<f64>::below(&gt, d).unwrap();
    let mut tape = Tape::<f64>::new();
    let pred = Tensor::from_fn(Shape::new(1, 1, 4, 5), |[_, _, y, x]| (y * 5 + x) as f64 * 0.37);
    let c = tape.leaf(pred.clone());
    let r = tape.leaf(pred.map(|v| v + 0.6));
    let loss = total_loss(&mut tape, &c, &r, &targets, &LossConfig::default()).unwrap();
    tape.backward(loss).unwrap();
    for v in [c, r] {
        let g = tape.grad(v).unwrap();
        for i in 0..20 {
            let excluded = i % 3 == 0 || i == 4;
            assert_eq!(g.data()[i] == 0.0, excluded, "pixel {i}: {}", g.data()[i]);
        }
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let gt = map(3, 4, |i| i as f32 * 0.5);
    let targets = LossTargets::<f64>::new(&gt, &[true; 12]).unwrap();
    // Offsets stay at least 0.2 away from the |x| = 1 knee.
    let offs = [0.3, -0.5, 1.6, -2.2, 0.1, 0.7, -1.4, 2.5, -0.2, 0.4, 1.3, -0.6];
    let coarse = Tensor::from_fn(Shape::new(1, 1, 3, 4), |[_, _, y, x]| {
        (y * 4 + x) as f64 * 0.5 + offs[y * 4 + x]
    });
    let refined = coarse.map(|v| v - 0.05);
    let cfg = GradCheckConfig {
        step: 1e-6,
        tolerance: 1e-6,
        ..Default::default()
    };
    let report = grad_check(
        "total_loss",
        &[("coarse", coarse), ("refined", refined)],
        |t, v| total_loss(t, &v[0], &v[1], &targets, &LossConfig::default()),
        cfg,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

fn single(name: &str, v: f64) -> BTreeMap<String, Tensor<f64>> {
    BTreeMap::from([(name.to_string(), Tensor::full(Shape::new(1, 1, 1, 1), v))])
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut params = single("w", 0.75);
    let mut state = AdamState::new(AdamConfig::default());
    adam_step(&mut params, &single("w", 0.0), &mut state).unwrap();
    assert_eq!(params["w"].data()[0], 0.75);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut params = single("w", 1.0);
    let mut state = AdamState::new(AdamConfig::default());
    adam_step(&mut params, &single("w", 1.0), &mut state).unwrap();
    assert!((params["w"].data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
}

#[test]
fn adam_matches_reference_trace() {
    // Independent scalar transcription of the bias-corrected update.
    let (lr, b1, b2, eps) = (1e-3f64, 0.9f64, 0.999f64, 1e-8f64);
    let grads = [0.3, -1.7];
    let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    let mut reference = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
        reference.push(p);
    }
    let mut params = single("w", 0.5);
    let mut state = AdamState::new(AdamConfig::default());
    for (g, want) in grads.iter().zip(&reference) {
        adam_step(&mut params, &single("w", *g), &mut state).unwrap();
        assert!((params["w"].data()[0] - want).abs() < 1e-12);
    }
    assert_eq!(state.step, 2);
}

#[test]
fn adam_rejects_mismatched_gradient() {
    let mut params = single("w", 0.5);
    let mut state = AdamState::<f64>::new(AdamConfig::default());
    let g = BTreeMap::from([("w".to_string(), Tensor::zeros(Shape::new(2, 1, 1, 1)))]);
    assert!(matches!(adam_step(&mut params, &g, &mut state), Err(Error::Shape(_))));
    assert!(adam_step(&mut params, &single("x", 1.0), &mut state).is_err());
    assert_eq!(state.step, 0);
}

fn sample(h: usize, w: usize) -> StereoSample {
    let img = Tensor::from_fn(Shape::new(1, 1, h, w), |[_, _, y, x]| {
        (y * w + x) as f32 / (h * w) as f32
    });
    let right = img.map(|v| 1.0 - v);
    StereoSample::new(img, right, map(h, w, |i| i as f32)).unwrap()
}

#[test]
fn crop_full_size_is_identity() {
    let s = sample(6, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(random_crop(&s, 6, 9, &mut rng).unwrap(), s);
}

#[test]
fn crop_is_seeded_and_aligned() {
    let s = sample(10, 12);
    let a = random_crop(&s, 4, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = random_crop(&s, 4, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    // Ground truth encodes the source pixel index; images must agree with it.
    let origin = a.gt.get(0, 0) as usize;
    let (top, left) = (origin / 12, origin % 12);
    for y in 0..4 {
        for x in 0..5 {
            let src = (top + y) * 12 + left + x;
            assert_eq!(a.gt.get(y, x), src as f32);
            assert_eq!(a.left.at([0, 0, y, x]), s.left.data()[src]);
            assert_eq!(a.right.at([0, 0, y, x]), s.right.data()[src]);
        }
    }
}

#[test]
fn crop_larger_than_image_is_rejected() {
    let s = sample(6, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(random_crop(&s, 7, 9, &mut rng), Err(Error::InvalidInput(_))));
    assert!(random_crop(&s, 6, 10, &mut rng).is_err());
}

fn rds(n: usize, seed: u64) -> Vec<StereoSample> {
    gen_rds(&RdsConfig::new(60, 48, 12, seed), n).unwrap()
}

fn opts(epochs: usize) -> TrainOptions {
    TrainOptions {
        epochs,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let cfg = ModelConfig::tiny(1, 12);
    let data = rds(2, 1);
    let mut o = opts(2);
    o.adam.lr = 0.0;
    let out = train(&cfg, &data, &[], &o, None, |_, _| Ok(())).unwrap();
    let init = ModelWeights::<f32>::init(&cfg, o.seed).unwrap();
    assert_eq!(out.checkpoint.weights.params, init.params);
    assert_eq!(out.log.len(), 2);
    assert!(out.log.iter().all(|e| e.val_epe.is_none()));
}

#[test]
fn training_is_deterministic() {
    let cfg = ModelConfig::tiny(1, 12);
    let data = rds(3, 2);
    let mut o = opts(2);
    o.crop = Some((48, 48));
    let a = train(&cfg, &data[..2], &data[2..], &o, None, |_, _| Ok(())).unwrap();
    let b = train(&cfg, &data[..2], &data[2..], &o, None, |_, _| Ok(())).unwrap();
    assert_eq!(encode_checkpoint(&a.checkpoint), encode_checkpoint(&b.checkpoint));
    assert_eq!(a.log, b.log);
    assert!(a.log[0].to_string().starts_with("epoch=1 loss="));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let cfg = ModelConfig::tiny(1, 12);
    let data = rds(2, 3);
    let full = train(&cfg, &data, &[], &opts(2), None, |_, _| Ok(())).unwrap();
    let half = train(&cfg, &data, &[], &opts(1), None, |_, _| Ok(())).unwrap();
    let resumed = train(&cfg, &data, &[], &opts(2), Some(half.checkpoint), |_, _| Ok(())).unwrap();
    assert_eq!(
        encode_checkpoint(&full.checkpoint),
        encode_checkpoint(&resumed.checkpoint)
    );
}

#[test]
fn overfit_smoke_loss_decreases() {
    let cfg = ModelConfig::tiny(1, 24);
    let data = gen_rds(&RdsConfig::new(96, 96, 24, 4), 8).unwrap();
    let out = train(&cfg, &data, &[], &opts(25), None, |_, _| Ok(())).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|e| e.loss).collect();
    let pairs = losses.len() - 1;
    let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(
        decreasing * 5 >= pairs * 4,
        "{decreasing}/{pairs} decreasing: {losses:?}"
    );
}

#[test]
fn non_finite_loss_is_divergence() {
    let cfg = ModelConfig::tiny(1, 12);
    let data = rds(1, 5);
    let mut ck = train(&cfg, &data, &[], &opts(0), None, |_, _| Ok(()))
        .unwrap()
        .checkpoint;
    ck.weights.params.get_mut("matching.out.bias").unwrap().data_mut()[0] = f32::NAN;
    let err = train(&cfg, &data, &[], &opts(1), Some(ck), |_, _| Ok(())).unwrap_err();
    match err {
        Error::Divergence(m) => assert!(m.contains("epoch 1"), "{m}"),
        other => panic!("unexpected {other}"),
    }
}

fn trained_checkpoint() -> Checkpoint {
    let cfg = ModelConfig::tiny(1, 12);
    train(&cfg, &rds(1, 6), &[], &opts(1), None, |_, _| Ok(()))
        .unwrap()
        .checkpoint
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained_checkpoint();
    assert!(ck.adam.as_ref().unwrap().step > 0);
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&ck, &p1).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    assert_eq!(loaded, ck);
    for (k, v) in &ck.weights.params {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(v), bits(&loaded.weights.params[k]), "{k}");
    }
    save_checkpoint(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn checkpoint_load_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = encode_checkpoint(&trained_checkpoint());
    let path = dir.path().join("x.ckpt");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Version { found: 7, expected: 1 })
    ));

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Truncated { .. })));

    let missing = dir.path().join("missing.ckpt");
    let err = load_checkpoint(&missing).unwrap_err();
    assert!(err.to_string().contains("missing.ckpt"));
}

#[test]
fn checkpoint_rejects_mismatched_config() {
    let ck = trained_checkpoint();
    match ck.check_config(&ModelConfig::tiny(3, 12)).unwrap_err() {
        Error::ParameterMismatch { name, .. } => assert_eq!(name, "feature.conv0.weight"),
        other => panic!("unexpected {other}"),
    }
    match ck.check_config(&ModelConfig::full(1, 12)).unwrap_err() {
        Error::ParameterMismatch { name, .. } => assert!(name.starts_with("feature."), "{name}"),
        other => panic!("unexpected {other}"),
    }
    // A stored config that disagrees with the stored tensors is rejected at load.
    let mut bytes = encode_checkpoint(&ck);
    let at = bytes.windows(14).position(|w| w == b"in_channels=1\n").unwrap();
    bytes[at + 12] = b'3';
    let err = decode_checkpoint(&bytes, std::path::Path::new("x.ckpt")).unwrap_err();
    assert!(matches!(err, Error::ParameterMismatch { .. }), "{err}");
}

#[test]
fn config_text_round_trip() {
    for cfg in [ModelConfig::tiny(1, 24), ModelConfig::full(3, 192)] {
        let mut c = cfg.clone();
        c.context_only = true;
        assert_eq!(config_from_text(&config_to_text(&c)).unwrap(), c);
    }
    assert!(config_from_text("profile=tiny\n").is_err());
}
