mod common;

use common::{random_frame, rng, tiny_training_setup};
use hvpp_core::synthetic::{degrade, textured_frame};
use hvpp_core::training::{train, TrainConfig, TrainSource, FINAL_CHECKPOINT, LOSS_LOG, LOSS_LOG_HEADER};
use hvpp_core::yuv::sample_patch_pair;
use hvpp_core::{ModelConfig, ParameterStore};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        channels: 8,
        heads: 2,
        num_hfb: 1,
        window_side: 2,
        tile_size: 32,
        tile_overlap: 8,
        ..ModelConfig::default()
    }
}

fn source(size: usize, seed: u64) -> TrainSource {
    let clean = textured_frame(size, size, seed).unwrap();
    TrainSource {
        lossy: Box::new(vec![degrade(&clean, 37)]),
        lossless: Box::new(vec![clean]),
        qp: 37,
        name: format!("syn{seed}"),
        origin: None,
    }
}

fn config(steps: u64, batch: usize, patch: usize) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        batch_size: batch,
        patch_size: patch,
        checkpoint_every: 0,
        model: tiny_model(),
        ..TrainConfig::desk()
    }
}

#[test]
fn zero_learning_rate_leaves_everything_fixed() {
    // patch equals the frame, so every batch is identical
    let cfg = TrainConfig { lr0: 0.0, ..config(5, 1, 16) };
    let out = train(vec![source(16, 1)], &cfg, None, true).unwrap();
    let first = out.log[0].loss;
    assert!(out.log.iter().all(|r| r.loss == first && r.lr == 0.0));
    let init = ParameterStore::init(&cfg.model, cfg.seed).unwrap();
    assert_eq!(out.params.arrays, init.arrays);
}

#[test]
fn seeded_runs_are_bit_identical() {
    let cfg = config(4, 2, 16);
    let run = |deterministic| train(vec![source(32, 1), source(32, 2)], &cfg, None, deterministic).unwrap();
    let a = run(true);
    let b = run(true);
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
    // batch items are reduced in order, so the thread pool does not matter
    let c = run(false);
    assert_eq!(a.log, c.log);
    assert_eq!(a.params, c.params);
    let other = train(vec![source(32, 1), source(32, 2)], &TrainConfig { seed: 1, ..cfg.clone() }, None, true).unwrap();
    assert_ne!(a.log, other.log);
}

#[test]
fn loss_falls_on_a_single_patch() {
    let cfg = TrainConfig { lr0: 1e-3, ..config(60, 1, 32) };
    let out = train(vec![source(32, 3)], &cfg, None, true).unwrap();
    let head: f64 = out.log[..5].iter().map(|r| r.loss.total).sum::<f64>() / 5.0;
    let tail: f64 = out.log[55..].iter().map(|r| r.loss.total).sum::<f64>() / 5.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
    assert!(out.log.iter().all(|r| r.loss.total.is_finite()));
}

#[test]
fn output_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every: 2, ..config(5, 1, 16) };
    train(vec![source(32, 1)], &cfg, Some(dir.path()), true).unwrap();
    let log = std::fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines[0], LOSS_LOG_HEADER);
    assert_eq!(lines.len(), 6);
    for (k, line) in lines[1..].iter().enumerate() {
        let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 6);
        assert_eq!(fields[0], k as f64);
        assert!((fields[2] - (10.0 * fields[3] + fields[4] + fields[5])).abs() < 1e-6 * fields[2]);
    }
    for name in ["step_00000002.ckpt", "step_00000004.ckpt", FINAL_CHECKPOINT] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let params = hvpp_core::checkpoint::load_checkpoint(dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(params.step, 5);
}

#[test]
fn manifest_training_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (config_path, manifest) = tiny_training_setup(dir.path(), 3);
    let cfg = TrainConfig::from_file(&config_path).unwrap();
    let records = hvpp_core::manifest::read_manifest(&manifest, hvpp_core::manifest::ManifestKind::Train).unwrap();
    let sources = records
        .iter()
        .map(|r| TrainSource::from_record(&manifest, r))
        .collect::<hvpp_core::Result<Vec<_>>>()
        .unwrap();
    let out = train(sources, &cfg, None, true).unwrap();
    assert_eq!(out.log.len(), 3);
}

#[test]
fn patch_offsets_are_uniform() {
    let mut r = rng(17);
    let lossy = vec![random_frame(20, 20, &mut r)];
    let clean = vec![random_frame(20, 20, &mut r)];
    // 5 x 5 possible origins for a 16 x 16 patch
    let mut counts = [0f64; 25];
    let n = 5000;
    for _ in 0..n {
        let p = sample_patch_pair(&lossy, &clean, 32, 16, "s", &mut r).unwrap();
        counts[p.offset.1 * 5 + p.offset.0] += 1.0;
    }
    let expected = n as f64 / 25.0;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p_value = 1.0 - ChiSquared::new(24.0).unwrap().cdf(chi2);
    assert!(p_value > 1e-3, "chi2 {chi2}, p {p_value}");
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = TrainConfig::from_file(dir.join("desk.cfg")).unwrap();
    assert_eq!(desk, TrainConfig::desk());
    let full = TrainConfig::from_file(dir.join("full.cfg")).unwrap();
    assert_eq!(full, TrainConfig::default());
}
