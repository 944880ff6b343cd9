//! End-to-end checks of the `derain` binary: every subcommand runs against a
//! real tiny dataset, and the exit-code contract (0 success, 1 usage error,
//! 2 runtime failure) holds for scripting.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn derain(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_derain"))
        .current_dir(dir)
        .env_remove("DERAIN_CONFIG")
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "expected exit 0, got {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

fn synth_toy(dir: &Path, n: &str, size: &str, seed: &str, out: &str) {
    let result = derain(dir, &["synthesize", "--n", n, "--size", size, "--seed", seed, "--out", out]);
    assert_success(&result);
}

const FAST_TRAIN: &[&str] = &[
    "--set",
    "dataset_root=data/toy",
    "--set",
    "epochs=2",
    "--set",
    "batch_size=2",
    "--set",
    "lr=2e-3",
];

#[test]
fn synthesize_writes_count_and_is_repeatable() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_toy(dir, "8", "64", "1", "data/a");
    synth_toy(dir, "8", "64", "1", "data/b");

    let manifest = std::fs::read_to_string(dir.join("data/a/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 9, "header plus one row per triple");
    for sub in ["rainy", "clear", "depth"] {
        assert_eq!(std::fs::read_dir(dir.join("data/a").join(sub)).unwrap().count(), 8);
    }

    let a = std::fs::read(dir.join("data/a/rainy/0003.png")).unwrap();
    let b = std::fs::read(dir.join("data/b/rainy/0003.png")).unwrap();
    assert_eq!(a, b, "same seed must produce identical bytes");
    assert_eq!(
        std::fs::read_to_string(dir.join("data/a/manifest.csv")).unwrap(),
        std::fs::read_to_string(dir.join("data/b/manifest.csv")).unwrap()
    );
}

#[test]
fn invalid_size_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let result = derain(tmp.path(), &["synthesize", "--n", "2", "--size", "0", "--out", "x"]);
    assert_exit(&result, 1);
    assert!(stderr(&result).contains("usage error"), "stderr:\n{}", stderr(&result));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let result = derain(
        tmp.path(),
        &["--set", "momentum=0.9", "synthesize", "--n", "1", "--size", "16", "--out", "x"],
    );
    assert_exit(&result, 1);
    assert!(stderr(&result).contains("momentum"), "stderr:\n{}", stderr(&result));
}

#[test]
fn overrides_beat_the_config_file_in_the_echo() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("toy.cfg"), "lr = 0.5\nseed = 42\n").unwrap();
    synth_toy(dir, "1", "16", "0", "data/toy");

    let result = derain(
        dir,
        &[
            "--config",
            "toy.cfg",
            "--set",
            "lr=0.001",
            "synthesize",
            "--n",
            "1",
            "--size",
            "16",
            "--out",
            "data/echoed",
        ],
    );
    assert_success(&result);
    let text = stdout(&result);
    assert!(text.contains("resolved configuration:"), "stdout:\n{text}");
    assert!(text.contains("lr = 0.001"), "override must win:\n{text}");
    assert!(text.contains("seed = 42"), "file value must survive:\n{text}");
}

#[test]
fn config_file_resolves_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("env.cfg"), "seed = 99\n").unwrap();
    synth_toy(dir, "1", "16", "0", "data/toy");

    let result = Command::new(env!("CARGO_BIN_EXE_derain"))
        .current_dir(dir)
        .env("DERAIN_CONFIG", "env.cfg")
        .args(["synthesize", "--n", "1", "--size", "16", "--out", "data/again"])
        .output()
        .unwrap();
    assert_success(&result);
    assert!(stdout(&result).contains("seed = 99"), "stdout:\n{}", stdout(&result));
}

#[test]
fn train_writes_checkpoint_log_and_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_toy(dir, "2", "16", "5", "data/toy");

    let mut args = vec!["train", "--preset", "D", "--set", "out_dir=runs/d"];
    args.extend_from_slice(FAST_TRAIN);
    let result = derain(dir, &args);
    assert_success(&result);

    assert!(dir.join("runs/d/final.drck").is_file());
    assert!(dir.join("runs/d/train_log.csv").is_file());
    let resolved = std::fs::read_to_string(dir.join("runs/d/resolved.cfg")).unwrap();
    assert!(
        resolved.contains("concatenation_on = false"),
        "preset D must disable concatenation:\n{resolved}"
    );
    assert!(stdout(&result).contains("concatenation_on = false"));

    let log = std::fs::read_to_string(dir.join("runs/d/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "header plus one row per step:\n{log}");
}

#[test]
fn resume_reaches_the_same_final_loss_as_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_toy(dir, "2", "16", "5", "data/toy");

    let mut straight = vec!["train", "--set", "out_dir=runs/straight", "--set", "seed=11"];
    straight.extend_from_slice(FAST_TRAIN);
    let full = derain(dir, &straight);
    assert_success(&full);

    let mut halted = vec![
        "train",
        "--set",
        "out_dir=runs/halted",
        "--set",
        "seed=11",
        "--set",
        "checkpoint_interval=1",
    ];
    halted.extend_from_slice(FAST_TRAIN);
    assert_success(&derain(dir, &halted));

    let resumed = derain(dir, &["train", "--resume", "runs/halted/ckpt_step1.drck"]);
    assert_success(&resumed);

    let final_loss = |text: &str| {
        text.lines()
            .find(|l| l.starts_with("trained "))
            .map(str::to_owned)
            .expect("training summary line")
    };
    let a = final_loss(&stdout(&full)).replace("straight", "");
    let b = final_loss(&stdout(&resumed)).replace("halted", "");
    assert_eq!(a, b, "resumed run must land on the identical final loss");
}

#[test]
fn infer_handles_single_files_and_directories() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_toy(dir, "3", "16", "5", "data/toy");
    let mut args = vec!["train", "--set", "out_dir=runs/m"];
    args.extend_from_slice(FAST_TRAIN);
    assert_success(&derain(dir, &args));

    let one = derain(
        dir,
        &[
            "infer",
            "--checkpoint",
            "runs/m/final.drck",
            "--input",
            "data/toy/rainy/0001.png",
            "--out",
            "single",
        ],
    );
    assert_success(&one);
    assert!(dir.join("single/0001.png").is_file(), "input name must be preserved");

    let all = derain(
        dir,
        &[
            "infer",
            "--checkpoint",
            "runs/m/final.drck",
            "--input",
            "data/toy/rainy",
            "--out",
            "batch",
        ],
    );
    assert_success(&all);
    for id in ["0000", "0001", "0002"] {
        let path = dir.join("batch").join(format!("{id}.png"));
        let img = derain_core::image::load_image(&path).expect("output must be a readable PNG");
        assert_eq!((img.height(), img.width()), (16, 16), "dimensions must match the input");
    }
}

#[test]
fn resolution_mismatch_is_a_runtime_failure() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_toy(dir, "2", "16", "5", "data/toy");
    let mut args = vec!["train", "--set", "out_dir=runs/m"];
    args.extend_from_slice(FAST_TRAIN);
    assert_success(&derain(dir, &args));
    synth_toy(dir, "1", "32", "5", "data/big");

    let result = derain(
        dir,
        &[
            "infer",
            "--checkpoint",
            "runs/m/final.drck",
            "--input",
            "data/big/rainy/0000.png",
            "--out",
            "o",
        ],
    );
    assert_exit(&result, 2);
}

#[test]
fn evaluate_twice_produces_identical_reports() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_toy(dir, "2", "16", "5", "data/toy");
    let mut args = vec!["train", "--set", "out_dir=runs/m"];
    args.extend_from_slice(FAST_TRAIN);
    assert_success(&derain(dir, &args));

    for out in ["r1.csv", "r2.csv"] {
        let result = derain(
            dir,
            &["evaluate", "--checkpoint", "runs/m/final.drck", "--dataset", "data/toy", "--out", out],
        );
        assert_success(&result);
    }
    assert_eq!(
        std::fs::read(dir.join("r1.csv")).unwrap(),
        std::fs::read(dir.join("r2.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(dir.join("r1.json")).unwrap(),
        std::fs::read(dir.join("r2.json")).unwrap()
    );
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_toy(dir, "1", "16", "0", "data/toy");
    let result = derain(
        dir,
        &["evaluate", "--checkpoint", "nope.drck", "--dataset", "data/toy", "--out", "r.csv"],
    );
    assert_exit(&result, 2);
    assert!(stderr(&result).contains("error"), "stderr:\n{}", stderr(&result));
}

#[test]
fn ablate_emits_one_comparison_row_per_preset() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_toy(dir, "2", "16", "5", "data/toy");

    let mut args = vec!["ablate", "--presets", "Full,C", "--out", "abl"];
    args.extend_from_slice(FAST_TRAIN);
    let result = derain(dir, &args);
    assert_success(&result);

    for preset in ["Full", "C"] {
        assert!(dir.join("abl").join(preset).join("final.drck").is_file());
        assert!(dir.join("abl").join(preset).join("report.csv").is_file());
    }
    let table = std::fs::read_to_string(dir.join("abl/comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 3, "header plus one row per preset:\n{table}");
    assert!(table.lines().nth(1).unwrap().starts_with("Full,"));
    assert!(table.lines().nth(2).unwrap().starts_with("C,"));
    assert!(dir.join("abl/comparison.txt").is_file());
}

#[test]
fn bench_reports_the_requested_sample_count() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_toy(dir, "2", "16", "5", "data/toy");
    let mut args = vec!["train", "--set", "out_dir=runs/m"];
    args.extend_from_slice(FAST_TRAIN);
    assert_success(&derain(dir, &args));

    let result = derain(
        dir,
        &["bench", "--checkpoint", "runs/m/final.drck", "--size", "16", "--iters", "10"],
    );
    assert_success(&result);
    assert!(stdout(&result).contains("measured 10"), "stdout:\n{}", stdout(&result));

    let too_few = derain(
        dir,
        &["bench", "--checkpoint", "runs/m/final.drck", "--size", "16", "--iters", "9"],
    );
    assert_exit(&too_few, 1);
}

#[test]
fn help_and_bad_flags_follow_the_exit_contract() {
    let tmp = TempDir::new().unwrap();
    let help = derain(tmp.path(), &["--help"]);
    assert_exit(&help, 0);
    assert!(stdout(&help).contains("synthesize"));

    let unknown = derain(tmp.path(), &["defog"]);
    assert_exit(&unknown, 1);

    let missing_required = derain(tmp.path(), &["synthesize", "--n", "2"]);
    assert_exit(&missing_required, 1);
}
