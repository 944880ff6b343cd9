//! Release gate for the whole workspace. Each test prints one
//! `ACCEPTANCE <n> (<label>): PASS|FAIL` line (visible with `--nocapture`,
//! or in the failure report) and re-raises any failure so the suite stays
//! red until every criterion holds. The slow criteria (5, 6) train real
//! models at toy scale; the whole file stays inside a CPU-only budget.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;

use derain_core::image::Image;
use derain_core::loss::{
    composite_loss, consistency_loss, consistency_loss_grad, mse_loss, mse_loss_grad,
    perceptual_loss, perceptual_loss_grad, LossWeights, TermValues,
};
use derain_core::metrics::{psnr, ssim, SSIM_C1};
use derain_core::model::checkpoint::{load_bundle, load_checkpoint};
use derain_core::model::{batch_to_tensor, DepthNetConfig, DerainAeConfig, ModelBundle};
use derain_core::nn::{param_hash, snapshot, Adam};
use derain_core::synth::{
    compose_linear, compose_physical, compose_region, load_manifest, load_triple,
    make_toy_dataset, FogParams, StreakParams,
};
use derain_core::train::{
    apply_ablation, train, train_step, AblationConfig, AblationPreset, DecayMode, TrainConfig,
};
use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn gate(n: usize, label: &str, check: impl FnOnce()) {
    let result = catch_unwind(AssertUnwindSafe(check));
    match result {
        Ok(()) => println!("ACCEPTANCE {n} ({label}): PASS"),
        Err(cause) => {
            println!("ACCEPTANCE {n} ({label}): FAIL");
            resume_unwind(cause);
        }
    }
}

fn random_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(Array3::from_shape_fn((h, w, 3), |_| rng.gen::<f32>())).unwrap()
}

fn random_layer(rng: &mut ChaCha8Rng, h: usize, w: usize, hi: f32) -> Array2<f32> {
    Array2::from_shape_fn((h, w), |_| rng.gen::<f32>() * hi)
}

/// Naive per-pixel PSNR, written independently of the library.
fn psnr_reference(pred: &Image, target: &Image) -> f64 {
    let (h, w) = (pred.height(), pred.width());
    let mut se = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let d = pred.pixels()[[y, x, c]] as f64 - target.pixels()[[y, x, c]] as f64;
                se += d * d;
            }
        }
    }
    let mse = se / (h * w * 3) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Direct windowed SSIM: explicit 11x11 Gaussian weights and per-window
/// weighted moments, no separable filtering shortcuts.
fn ssim_reference(pred: &Image, target: &Image) -> f64 {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    const C1: f64 = 1.0e-4;
    const C2: f64 = 9.0e-4;
    let mut weights = [[0.0f64; WIN]; WIN];
    let mut norm = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, wv) in row.iter_mut().enumerate() {
            let di = i as f64 - 5.0;
            let dj = j as f64 - 5.0;
            *wv = (-(di * di + dj * dj) / (2.0 * SIGMA * SIGMA)).exp();
            norm += *wv;
        }
    }
    for row in weights.iter_mut() {
        for wv in row.iter_mut() {
            *wv /= norm;
        }
    }

    let (h, w) = (pred.height(), pred.width());
    let mut total = 0.0;
    let mut n = 0usize;
    for c in 0..3 {
        for y0 in 0..=(h - WIN) {
            for x0 in 0..=(w - WIN) {
                let mut mu1 = 0.0;
                let mut mu2 = 0.0;
                for (i, row) in weights.iter().enumerate() {
                    for (j, &wv) in row.iter().enumerate() {
                        mu1 += wv * pred.pixels()[[y0 + i, x0 + j, c]] as f64;
                        mu2 += wv * target.pixels()[[y0 + i, x0 + j, c]] as f64;
                    }
                }
                let mut var1 = 0.0;
                let mut var2 = 0.0;
                let mut cov = 0.0;
                for (i, row) in weights.iter().enumerate() {
                    for (j, &wv) in row.iter().enumerate() {
                        let a = pred.pixels()[[y0 + i, x0 + j, c]] as f64 - mu1;
                        let b = target.pixels()[[y0 + i, x0 + j, c]] as f64 - mu2;
                        var1 += wv * a * a;
                        var2 += wv * b * b;
                        cov += wv * a * b;
                    }
                }
                total += ((2.0 * mu1 * mu2 + C1) * (2.0 * cov + C2))
                    / ((mu1 * mu1 + mu2 * mu2 + C1) * (var1 + var2 + C2));
                n += 1;
            }
        }
    }
    total / n as f64
}

#[test]
fn criterion_1_metric_oracles() {
    gate(1, "metric oracles", || {
        for seed in 0..50u64 {
            let a = random_image(seed * 2 + 1, 16, 16);
            let b = random_image(seed * 2 + 2, 16, 16);
            let p = psnr(&a, &b).unwrap();
            let p_ref = psnr_reference(&a, &b);
            assert!((p - p_ref).abs() < 1e-6, "psnr seed {seed}: {p} vs {p_ref}");
            let s = ssim(&a, &b).unwrap();
            let s_ref = ssim_reference(&a, &b);
            assert!((s - s_ref).abs() < 1e-6, "ssim seed {seed}: {s} vs {s_ref}");
        }

        let x = random_image(404, 24, 24);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0, "identity SSIM");
        let zeros = Image::zeros(16, 16).unwrap();
        let ones = Image::constant(16, 16, 1.0).unwrap();
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0, "zeros-vs-ones PSNR");
        let constant_case = ssim(&zeros, &ones).unwrap();
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((constant_case - expected).abs() < 1e-12, "constant-vs-constant SSIM");
    });
}

#[test]
fn criterion_2_formation_model_algebra() {
    gate(2, "formation-model algebra", || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for scene in 0..20u64 {
            let h = 16 + (scene as usize % 3) * 8;
            let w = 16 + (scene as usize % 2) * 16;
            let background = random_image(1000 + scene, h, w);
            let zeros = Array2::<f32>::zeros((h, w));
            let ones = Array2::<f32>::ones((h, w));
            let streaks = random_layer(&mut rng, h, w, 0.5);
            let f0 = rng.gen::<f32>();

            let no_rain = compose_linear(&background, &zeros).unwrap();
            assert_eq!(no_rain, background, "R=0 must return B exactly");
            let no_layers = compose_physical(&background, &zeros, &zeros, f0).unwrap();
            assert_eq!(no_layers, background, "R=F=0 must return B exactly");

            let everywhere = compose_region(&background, &streaks, &ones).unwrap();
            let linear = compose_linear(&background, &streaks).unwrap();
            assert_eq!(everywhere, linear, "mask of ones must reduce region to linear");

            let pure_fog = compose_physical(&background, &zeros, &ones, f0).unwrap();
            for &v in pure_fog.pixels().iter() {
                assert_eq!(v, f0, "F=1, R=0 must flood the frame with f0");
            }
        }
    });
}

#[test]
fn criterion_3_loss_suite() {
    gate(3, "loss suite", || {
        let unit = TermValues {
            perceptual: 1.0,
            depth_consist: 1.0,
            derain_consist: 1.0,
            derain_mse: 1.0,
            depth_mse: 1.0,
        };
        let breakdown =
            composite_loss(&unit, &LossWeights::default(), &AblationConfig::default()).unwrap();
        assert_eq!(breakdown.total, 14.0, "unit terms under default weights");

        let a = Array1::from(vec![1.0f64, 1.0]);
        let b = Array1::from(vec![1.0f64, 0.0]);
        let loss = consistency_loss(&a, &b).unwrap();
        let expected = 1.0 - 1.0 / 2.0f64.sqrt();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");

        let h = 1e-4f64;
        let tol = 1e-4f64;
        let rel = |fd: f64, an: f64| (fd - an).abs() / an.abs().max(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let vec10 = |rng: &mut ChaCha8Rng| {
            Array1::from_shape_fn(10, |_| rng.gen::<f64>() * 2.0 - 1.0)
        };

        let pred = vec10(&mut rng);
        let target = vec10(&mut rng);
        let (_, grad) = mse_loss_grad(&pred, &target).unwrap();
        for i in 0..10 {
            let mut plus = pred.clone();
            plus[i] += h;
            let mut minus = pred.clone();
            minus[i] -= h;
            let fd = (mse_loss(&plus, &target).unwrap() - mse_loss(&minus, &target).unwrap())
                / (2.0 * h);
            assert!(rel(fd, grad[i]) < tol, "mse grad [{i}]: fd {fd} vs {}", grad[i]);
        }

        let left = vec10(&mut rng);
        let right = vec10(&mut rng);
        let (_, ga, gb) = consistency_loss_grad(&left, &right).unwrap();
        for i in 0..10 {
            let mut plus = left.clone();
            plus[i] += h;
            let mut minus = left.clone();
            minus[i] -= h;
            let fd = (consistency_loss(&plus, &right).unwrap()
                - consistency_loss(&minus, &right).unwrap())
                / (2.0 * h);
            assert!(rel(fd, ga[i]) < tol, "consistency grad a[{i}]: fd {fd} vs {}", ga[i]);

            let mut plus = right.clone();
            plus[i] += h;
            let mut minus = right.clone();
            minus[i] -= h;
            let fd = (consistency_loss(&left, &plus).unwrap()
                - consistency_loss(&left, &minus).unwrap())
                / (2.0 * h);
            assert!(rel(fd, gb[i]) < tol, "consistency grad b[{i}]: fd {fd} vs {}", gb[i]);
        }

        let taps_target = vec![vec10(&mut rng), vec10(&mut rng)];
        let taps_pred = vec![vec10(&mut rng), vec10(&mut rng)];
        let layer_weights = [0.7f64, 0.3];
        let (_, grads) =
            perceptual_loss_grad(&taps_target, &taps_pred, &layer_weights).unwrap();
        for tap in 0..2 {
            for i in 0..10 {
                let mut plus = taps_pred.clone();
                plus[tap][i] += h;
                let mut minus = taps_pred.clone();
                minus[tap][i] -= h;
                let fd = (perceptual_loss(&taps_target, &plus, &layer_weights).unwrap()
                    - perceptual_loss(&taps_target, &minus, &layer_weights).unwrap())
                    / (2.0 * h);
                assert!(
                    rel(fd, grads[tap][i]) < tol,
                    "perceptual grad tap {tap} [{i}]: fd {fd} vs {}",
                    grads[tap][i]
                );
            }
        }
    });
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    res: usize,
) -> (Array4<f32>, Array4<f32>, Array4<f32>, Array4<f32>) {
    let rainy = Array4::from_shape_fn((n, 3, res, res), |_| rng.gen::<f32>());
    let clear = Array4::from_shape_fn((n, 3, res, res), |_| rng.gen::<f32>());
    let depth = Array4::from_shape_fn((n, 1, res, res), |_| rng.gen::<f32>());
    let half = res / 2;
    let depth_half = Array4::from_shape_fn((n, 1, half, half), |(b, _, y, x)| {
        let mut sum = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                sum += depth[[b, 0, 2 * y + dy, 2 * x + dx]];
            }
        }
        sum / 4.0
    });
    (rainy, clear, depth, depth_half)
}

#[test]
fn criterion_4_architecture_invariants() {
    gate(4, "architecture invariants", || {
        assert_eq!(DerainAeConfig::default().latent_len, 150, "default latent length");

        for size in [32usize, 64, 96] {
            let bundle = ModelBundle::build(
                DerainAeConfig::for_resolution(size, size),
                DepthNetConfig::default(),
                AblationConfig::default(),
                size as u64,
            )
            .unwrap();
            let input = random_image(size as u64 + 9, size, size);
            let output = bundle.infer(&input).unwrap();
            assert_eq!((output.height(), output.width()), (size, size), "shape at {size}px");

            let x = batch_to_tensor(&[&input]);
            let (disps, _) = bundle.depth_forward(&x).unwrap();
            assert_eq!(disps.len(), 2);
            assert_eq!(disps[0].dim(), (1, 1, size, size));
            assert_eq!(disps[1].dim(), (1, 1, size / 2, size / 2));
            for d in &disps {
                assert!(
                    d.iter().all(|&v| v > 0.0 && v < 1.0),
                    "disparity must stay strictly inside (0, 1)"
                );
            }
        }

        let full = ModelBundle::build(
            DerainAeConfig::for_resolution(32, 32),
            DepthNetConfig::default(),
            AblationConfig::default(),
            5,
        )
        .unwrap();
        let derain_w = full.derain_cfg.widths;
        let depth_w = full.depth_cfg.widths;
        assert_eq!(
            full.derain.encoder_input_channels(),
            vec![
                3 + depth_w[0],
                derain_w[0] + depth_w[1],
                derain_w[1] + depth_w[2],
                derain_w[2] + depth_w[3],
            ],
            "concatenation must widen every encoder level by the depth width"
        );
        let plain = ModelBundle::build(
            DerainAeConfig::for_resolution(32, 32),
            DepthNetConfig::default(),
            apply_ablation(AblationPreset::D),
            5,
        )
        .unwrap();
        assert_eq!(
            plain.derain.encoder_input_channels(),
            vec![3, derain_w[0], derain_w[1], derain_w[2]],
            "setting D must fall back to image-only encoder inputs"
        );

        let mut bundle = ModelBundle::build(
            DerainAeConfig {
                widths: [8, 12, 16, 20],
                head_width: 6,
                latent_len: 20,
                input_h: 16,
                input_w: 16,
            },
            DepthNetConfig { widths: [4, 6, 8, 10], ..DepthNetConfig::default() },
            AblationConfig::default(),
            6,
        )
        .unwrap();
        let before = snapshot(&mut bundle);
        let mut adam = Adam::new(1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let (rainy, clear, depth, depth_half) = random_batch(&mut rng, 2, 16);
        for _ in 0..50 {
            train_step(
                &mut bundle,
                &mut adam,
                &rainy,
                &clear,
                &depth,
                &depth_half,
                &LossWeights::default(),
            )
            .unwrap();
        }
        let after = snapshot(&mut bundle);
        let mut moved_supervisor_head = false;
        for ((name, old, trainable), (_, new, _)) in before.iter().zip(after.iter()) {
            if *trainable {
                if name.starts_with("latent.fc_mu") {
                    moved_supervisor_head |= old != new;
                }
            } else {
                assert_eq!(old, new, "frozen tensor {name} must be bit-identical after 50 steps");
            }
        }
        assert!(moved_supervisor_head, "the latent supervisor head must keep training");
    });
}

/// The 8-image 64x64 toy set and its 300-step Full-preset training run,
/// shared by criteria 5 and 6 so the expensive run happens once. Both
/// criteria read it through `overfit_run()`; the seeds are fixed, so the
/// artifacts are identical to what separate runs would produce.
struct OverfitRun {
    tmp: TempDir,
    data: std::path::PathBuf,
    outcome: derain_core::train::TrainOutcome,
}

fn toy_train_config(data: &Path, out_dir: std::path::PathBuf) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        lr: 2e-3,
        decay: 1.0,
        decay_mode: DecayMode::LrSchedule,
        epochs: 75,
        seed: 1,
        dataset_root: data.to_path_buf(),
        out_dir,
        checkpoint_interval: 0,
    }
}

fn overfit_run() -> &'static OverfitRun {
    static RUN: std::sync::OnceLock<OverfitRun> = std::sync::OnceLock::new();
    RUN.get_or_init(|| {
        let tmp = TempDir::new().unwrap();
        let data = tmp.path().join("toy64");
        make_toy_dataset(
            8,
            64,
            64,
            &StreakParams::toy_default(),
            &FogParams::toy_default(),
            1,
            &data,
        )
        .unwrap();
        let cfg = toy_train_config(&data, tmp.path().join("full"));
        let outcome = train(&cfg, AblationConfig::default(), &LossWeights::default()).unwrap();
        OverfitRun { tmp, data, outcome }
    })
}

#[test]
fn criterion_5_overfit_smoke_test() {
    gate(5, "overfit smoke test", || {
        let run = overfit_run();
        let (data, outcome) = (&run.data, &run.outcome);
        assert_eq!(outcome.steps, 300, "75 epochs of 4 steps");

        let log = std::fs::read_to_string(&outcome.log_path).unwrap();
        let total_at = |row: usize| -> f64 {
            log.lines()
                .nth(row)
                .unwrap()
                .rsplit(',')
                .next()
                .unwrap()
                .parse()
                .unwrap()
        };
        let first = total_at(1);
        let last = total_at(300);
        println!("  overfit: step-1 total {first:.4}, step-300 total {last:.4}");
        assert!(
            last < 0.5 * first,
            "loss must at least halve over 300 steps: {last} vs {first}"
        );

        let bundle = load_bundle(&outcome.final_checkpoint).unwrap();
        let manifest = load_manifest(data).unwrap();
        let mut rainy_sum = 0.0;
        let mut derained_sum = 0.0;
        for entry in &manifest {
            let (rainy, clear, _) = load_triple(data, &entry.id).unwrap();
            rainy_sum += psnr(&rainy, &clear).unwrap();
            let derained = bundle.infer(&rainy).unwrap();
            derained_sum += psnr(&derained, &clear).unwrap();
        }
        let n = manifest.len() as f64;
        let rainy_mean = rainy_sum / n;
        let derained_mean = derained_sum / n;
        println!(
            "  overfit: rainy PSNR {rainy_mean:.3} dB, derained PSNR {derained_mean:.3} dB"
        );
        assert!(
            derained_mean >= rainy_mean + 2.0,
            "derained mean PSNR {derained_mean:.3} must clear rainy {rainy_mean:.3} by 2 dB"
        );
    });
}

#[test]
fn criterion_6_ablation_ordering() {
    gate(6, "ablation ordering", || {
        let run = overfit_run();
        let full_eval =
            derain_core::eval::evaluate_dataset(&run.outcome.final_checkpoint, &run.data)
                .unwrap();
        let full = full_eval.report.psnr.ave;

        let cfg = toy_train_config(&run.data, run.tmp.path().join("e"));
        let outcome =
            train(&cfg, apply_ablation(AblationPreset::E), &LossWeights::default()).unwrap();
        let e_eval =
            derain_core::eval::evaluate_dataset(&outcome.final_checkpoint, &run.data).unwrap();
        let worst = e_eval.report.psnr.ave;

        println!("  ablation: Full {full:.3} dB vs E {worst:.3} dB (tolerance 0.5 dB)");
        assert!(
            full >= worst - 0.5,
            "Full ({full:.3} dB) must not trail E ({worst:.3} dB) by more than the toy-scale tolerance"
        );
    });
}

#[test]
fn criterion_7_determinism_and_resume() {
    gate(7, "determinism and resume", || {
        let tmp = TempDir::new().unwrap();
        let data = tmp.path().join("toy16");
        make_toy_dataset(
            4,
            16,
            16,
            &StreakParams::toy_default(),
            &FogParams::toy_default(),
            4,
            &data,
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            lr: 2e-3,
            decay: 0.9,
            decay_mode: DecayMode::LrSchedule,
            epochs: 3,
            seed: 8,
            dataset_root: data.clone(),
            out_dir: tmp.path().join("same"),
            checkpoint_interval: 0,
        };
        let first = train(&cfg, AblationConfig::default(), &LossWeights::default()).unwrap();
        let first_bytes = std::fs::read(&first.final_checkpoint).unwrap();
        let second = train(&cfg, AblationConfig::default(), &LossWeights::default()).unwrap();
        let second_bytes = std::fs::read(&second.final_checkpoint).unwrap();
        assert_eq!(first_bytes, second_bytes, "same seed must write bit-identical checkpoints");

        let halted_cfg = TrainConfig {
            out_dir: tmp.path().join("halted"),
            checkpoint_interval: 2,
            ..cfg.clone()
        };
        train(&halted_cfg, AblationConfig::default(), &LossWeights::default()).unwrap();
        let resumed =
            derain_core::train::resume(&halted_cfg.out_dir.join("ckpt_step2.drck")).unwrap();
        let mut a = load_checkpoint(&first.final_checkpoint).unwrap();
        let mut b = load_checkpoint(&resumed.final_checkpoint).unwrap();
        assert_eq!(
            param_hash(&mut a.bundle),
            param_hash(&mut b.bundle),
            "resume must land on the uninterrupted parameters"
        );
        assert_eq!(a.step, b.step);
        assert_eq!(a.adam.t, b.adam.t);
    });
}

#[test]
fn criterion_8_cli_round_trip() {
    gate(8, "CLI round trip", || {
        let tmp = TempDir::new().unwrap();
        let dir = tmp.path();
        let bin = env!("CARGO_BIN_EXE_derain");
        let run = |args: &[&str]| {
            let out = Command::new(bin).current_dir(dir).args(args).output().unwrap();
            assert!(
                out.status.success(),
                "{args:?} exited {:?}\nstderr:\n{}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            );
        };

        run(&["synthesize", "--n", "3", "--size", "16", "--seed", "6", "--out", "data/toy"]);
        run(&[
            "train",
            "--set",
            "dataset_root=data/toy",
            "--set",
            "out_dir=runs/rt",
            "--set",
            "epochs=2",
            "--set",
            "batch_size=3",
            "--set",
            "lr=2e-3",
        ]);
        run(&[
            "infer",
            "--checkpoint",
            "runs/rt/final.drck",
            "--input",
            "data/toy/rainy",
            "--out",
            "derained",
        ]);
        assert_eq!(std::fs::read_dir(dir.join("derained")).unwrap().count(), 3);
        run(&[
            "evaluate",
            "--checkpoint",
            "runs/rt/final.drck",
            "--dataset",
            "data/toy",
            "--out",
            "report.csv",
        ]);

        let run_record = derain_core::eval::read_report(&dir.join("report.json")).unwrap();
        let report = &run_record.report;
        assert_eq!(report.per_image.len(), 3, "one row per synthesized image");
        let psnrs: Vec<f64> = report.per_image.iter().map(|s| s.psnr).collect();
        let ssims: Vec<f64> = report.per_image.iter().map(|s| s.ssim).collect();
        let recompute = |values: &[f64]| {
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let ave = (values.iter().sum::<f64>() / values.len() as f64).clamp(min, max);
            (ave, max, min)
        };
        assert_eq!(
            recompute(&psnrs),
            (report.psnr.ave, report.psnr.max, report.psnr.min),
            "PSNR aggregates must recompute exactly from the rows"
        );
        assert_eq!(
            recompute(&ssims),
            (report.ssim.ave, report.ssim.max, report.ssim.min),
            "SSIM aggregates must recompute exactly from the rows"
        );

        let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
        assert!(csv.lines().count() > 6, "report must carry header, aggregates, and rows");
    });
}
