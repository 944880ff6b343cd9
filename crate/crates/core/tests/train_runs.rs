//! Full training-loop runs on a synthesized toy dataset: seed determinism,
//! resume equivalence, decay-mode behavior, and failure reporting.

use derain_core::loss::LossWeights;
use derain_core::model::checkpoint::load_checkpoint;
use derain_core::nn::param_hash;
use derain_core::synth::{make_toy_dataset, FogParams, StreakParams};
use derain_core::train::{
    apply_ablation, resume, train, AblationPreset, DecayMode, TrainConfig, TrainError,
};
use std::path::{Path, PathBuf};

fn toy_dataset(dir: &Path) -> PathBuf {
    let root = dir.join("toy");
    make_toy_dataset(4, 16, 16, &StreakParams::toy_default(), &FogParams::toy_default(), 5, &root)
        .unwrap();
    root
}

fn toy_config(root: &Path, out: PathBuf) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        lr: 2e-3,
        epochs: 4,
        seed: 17,
        dataset_root: root.to_path_buf(),
        out_dir: out,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_dataset(dir.path());
    let weights = LossWeights::default();
    let ablation = apply_ablation(AblationPreset::Full);

    let cfg_a = toy_config(&root, dir.path().join("run_a"));
    let cfg_b = toy_config(&root, dir.path().join("run_b"));
    let a = train(&cfg_a, ablation, &weights).unwrap();
    let b = train(&cfg_b, ablation, &weights).unwrap();

    assert_eq!(a.steps, 8, "4 images, batch 2, 4 epochs");
    assert_eq!(a.final_loss, b.final_loss);
    assert_eq!(
        std::fs::read(&a.log_path).unwrap(),
        std::fs::read(&b.log_path).unwrap(),
        "training logs should match byte for byte"
    );
    let mut ba = load_checkpoint(&a.final_checkpoint).unwrap();
    let mut bb = load_checkpoint(&b.final_checkpoint).unwrap();
    assert_eq!(param_hash(&mut ba.bundle), param_hash(&mut bb.bundle));
}

#[test]
fn resume_from_mid_run_matches_uninterrupted_finish() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_dataset(dir.path());
    let weights = LossWeights::default();
    let ablation = apply_ablation(AblationPreset::Full);

    let mut cfg = toy_config(&root, dir.path().join("run"));
    cfg.checkpoint_interval = 4;
    let full = train(&cfg, ablation, &weights).unwrap();
    let mid = cfg.out_dir.join("ckpt_step4.drck");
    assert!(mid.exists(), "periodic checkpoint at the halfway step");

    let log_before: Vec<String> = std::fs::read_to_string(&full.log_path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    let mut final_before = load_checkpoint(&full.final_checkpoint).unwrap();
    let hash_before = param_hash(&mut final_before.bundle);

    // Replaying the second half from the mid-run checkpoint appends the very
    // same step rows and lands on the very same parameters.
    let resumed = resume(&mid).unwrap();
    assert_eq!(resumed.steps, full.steps);
    assert_eq!(resumed.final_loss, full.final_loss);
    let log_after: Vec<String> = std::fs::read_to_string(&full.log_path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(log_after.len(), log_before.len() + 4);
    assert_eq!(&log_after[log_before.len()..], &log_before[5..9]);

    let mut final_after = load_checkpoint(&resumed.final_checkpoint).unwrap();
    assert_eq!(param_hash(&mut final_after.bundle), hash_before);
}

#[test]
fn decay_modes_shape_the_optimizer() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_dataset(dir.path());
    let weights = LossWeights::default();
    let ablation = apply_ablation(AblationPreset::Full);

    let mut sched = toy_config(&root, dir.path().join("sched"));
    sched.epochs = 3;
    let out = train(&sched, ablation, &weights).unwrap();
    let state = load_checkpoint(&out.final_checkpoint).unwrap();
    let expected = sched.lr * sched.decay.powi(2);
    assert!(
        (state.adam.lr - expected).abs() < 1e-9,
        "lr {} after two decays, expected {expected}",
        state.adam.lr
    );
    assert_eq!(state.adam.l2, 0.0);

    let mut reg = toy_config(&root, dir.path().join("reg"));
    reg.epochs = 3;
    reg.decay_mode = DecayMode::L2;
    reg.decay = 1e-4;
    let out = train(&reg, ablation, &weights).unwrap();
    let state = load_checkpoint(&out.final_checkpoint).unwrap();
    assert_eq!(state.adam.lr, reg.lr, "literal decay mode leaves the rate alone");
    assert_eq!(state.adam.l2, 1e-4);
}

#[test]
fn divergence_stops_with_last_checkpoint_reference() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_dataset(dir.path());
    let weights = LossWeights::default();
    let ablation = apply_ablation(AblationPreset::Full);

    let mut cfg = toy_config(&root, dir.path().join("diverge"));
    cfg.lr = 1e20;
    cfg.checkpoint_interval = 1;
    match train(&cfg, ablation, &weights) {
        Err(TrainError::NonFinite { step, last_checkpoint }) => {
            assert!(step >= 2, "first step starts from finite weights");
            let ckpt = last_checkpoint.expect("interval 1 leaves a checkpoint behind");
            assert!(ckpt.exists());
            load_checkpoint(&ckpt).unwrap();
        }
        Err(e) => panic!("wrong error: {e}"),
        Ok(_) => panic!("a 1e20 learning rate should not converge"),
    }
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(&dir.path().join("nowhere"), dir.path().join("out"));
    match train(&cfg, apply_ablation(AblationPreset::Full), &LossWeights::default()) {
        Err(TrainError::Dataset(_)) => {}
        Err(e) => panic!("wrong error: {e}"),
        Ok(_) => panic!("training without data should fail"),
    }
}
