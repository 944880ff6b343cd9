//! Dataset evaluation, multi-run comparison tables, and an inference
//! timing harness.
//!
//! Evaluation loads a checkpoint, derains every image listed in a dataset
//! manifest, and scores the result against the paired clean image. Reports
//! are written twice: a CSV with values rounded to five decimals for
//! reading, and a JSON sidecar at full float precision for machines.
//! Identical checkpoint and dataset give byte-identical reports; the timing
//! harness is the one exempt output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::metrics::{aggregate_metrics, psnr, ssim, ImageScore, MetricError, MetricsReport};
use crate::model::checkpoint::{checkpoint_file_hash, load_bundle, CheckpointError};
use crate::model::{ModelBundle, ModelError, RESOLUTION_DIVISOR};
use crate::synth::{load_manifest, load_triple, SynthError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dataset(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("report write at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("need at least two runs to compare, got {0}")]
    TooFewRuns(usize),
    #[error("{runs} runs but {labels} labels")]
    LabelCountMismatch { runs: usize, labels: usize },
    #[error("runs cover different datasets: {0} vs {1}")]
    MismatchedDatasets(String, String),
    #[error("need at least {MIN_TIMED_ITERS} timed iterations, got {0}")]
    TooFewIters(usize),
    #[error("benchmark size {got} incompatible with the checkpoint ({expected}, multiple of {RESOLUTION_DIVISOR})")]
    BadBenchSize { got: usize, expected: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.display().to_string(), source }
}

/// One finished evaluation: where it came from and what it measured.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRun {
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub dataset_root: PathBuf,
    pub report: MetricsReport,
}

/// Scores prediction/target pairs and aggregates them, sorting records by
/// id so the output order never depends on input order.
pub fn score_pairs(pairs: &[(String, &Image, &Image)]) -> Result<MetricsReport, EvalError> {
    let mut scores = Vec::with_capacity(pairs.len());
    for (id, pred, target) in pairs {
        scores.push(ImageScore {
            id: id.clone(),
            psnr: psnr(pred, target)?,
            ssim: ssim(pred, target)?,
        });
    }
    scores.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(aggregate_metrics(scores)?)
}

/// Derains every manifest image with the checkpointed model and scores the
/// outputs against the paired clean images.
pub fn evaluate_dataset(checkpoint: &Path, dataset_root: &Path) -> Result<EvalRun, EvalError> {
    let bundle = load_bundle(checkpoint)?;
    let checkpoint_hash = checkpoint_file_hash(checkpoint)?;
    let manifest = load_manifest(dataset_root)?;

    let mut derained = Vec::with_capacity(manifest.len());
    for entry in &manifest {
        let (rainy, clear, _) = load_triple(dataset_root, &entry.id)?;
        let pred = bundle.infer(&rainy)?;
        derained.push((entry.id.clone(), pred, clear));
    }
    let pairs: Vec<(String, &Image, &Image)> =
        derained.iter().map(|(id, p, t)| (id.clone(), p, t)).collect();
    let report = score_pairs(&pairs)?;

    Ok(EvalRun {
        checkpoint: checkpoint.to_path_buf(),
        checkpoint_hash,
        dataset_root: dataset_root.to_path_buf(),
        report,
    })
}

/// Scores the dataset's own rainy images against their clean pairs, the
/// no-op baseline a trained model has to beat.
pub fn evaluate_identity_baseline(dataset_root: &Path) -> Result<EvalRun, EvalError> {
    let manifest = load_manifest(dataset_root)?;
    let mut loaded = Vec::with_capacity(manifest.len());
    for entry in &manifest {
        let (rainy, clear, _) = load_triple(dataset_root, &entry.id)?;
        loaded.push((entry.id.clone(), rainy, clear));
    }
    let pairs: Vec<(String, &Image, &Image)> =
        loaded.iter().map(|(id, p, t)| (id.clone(), p, t)).collect();
    let report = score_pairs(&pairs)?;
    Ok(EvalRun {
        checkpoint: PathBuf::from("(none)"),
        checkpoint_hash: "rainy-input-baseline".into(),
        dataset_root: dataset_root.to_path_buf(),
        report,
    })
}

/// Writes the CSV report to `path` and a full-precision JSON sidecar next
/// to it with the extension swapped to `.json`.
///
/// CSV layout: a header block naming the dataset, the checkpoint hash, and
/// the aggregates, then one row per image. Values are rounded to five
/// decimals; perfect images print `inf` PSNR in the CSV and `null` in the
/// JSON sidecar.
pub fn write_report(run: &EvalRun, path: &Path) -> Result<(), EvalError> {
    let mut text = String::new();
    let r = &run.report;
    let _ = writeln!(text, "dataset,{}", run.dataset_root.display());
    let _ = writeln!(text, "checkpoint_sha256,{}", run.checkpoint_hash);
    let _ = writeln!(text, "images,{}", r.count);
    let _ = writeln!(text, "metric,ave,max,min");
    let _ = writeln!(text, "psnr,{:.5},{:.5},{:.5}", r.psnr.ave, r.psnr.max, r.psnr.min);
    let _ = writeln!(text, "ssim,{:.5},{:.5},{:.5}", r.ssim.ave, r.ssim.max, r.ssim.min);
    let _ = writeln!(text, "id,psnr,ssim");
    for s in &r.per_image {
        let _ = writeln!(text, "{},{:.5},{:.5}", s.id, s.psnr, s.ssim);
    }
    std::fs::write(path, text).map_err(io_err(path))?;

    let sidecar = path.with_extension("json");
    let json = serde_json::to_string_pretty(run).expect("report serializes");
    std::fs::write(&sidecar, json + "\n").map_err(io_err(&sidecar))?;
    Ok(())
}

/// Reads the JSON sidecar form of a report back.
pub fn read_report(path: &Path) -> Result<EvalRun, EvalError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| EvalError::Io { path: path.display().to_string(), source: e.into() })
}

pub const COMPARISON_COLUMNS: [&str; 6] =
    ["psnr_ave", "psnr_max", "psnr_min", "ssim_ave", "ssim_max", "ssim_min"];

/// One labeled run inside a comparison table. `best` marks the columns
/// where this run is unbeaten; ties flag every tied run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub values: [f64; 6],
    pub best: [bool; 6],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset_root: PathBuf,
    pub rows: Vec<CompareRow>,
}

/// Builds a one-row-per-run table over a shared dataset, flagging the best
/// value per column. Higher is better in every column.
pub fn compare_runs(runs: &[EvalRun], labels: &[String]) -> Result<Comparison, EvalError> {
    if runs.len() < 2 {
        return Err(EvalError::TooFewRuns(runs.len()));
    }
    if labels.len() != runs.len() {
        return Err(EvalError::LabelCountMismatch { runs: runs.len(), labels: labels.len() });
    }
    let root = &runs[0].dataset_root;
    for run in &runs[1..] {
        if &run.dataset_root != root {
            return Err(EvalError::MismatchedDatasets(
                root.display().to_string(),
                run.dataset_root.display().to_string(),
            ));
        }
    }

    let value_row = |run: &EvalRun| -> [f64; 6] {
        let r = &run.report;
        [r.psnr.ave, r.psnr.max, r.psnr.min, r.ssim.ave, r.ssim.max, r.ssim.min]
    };
    let values: Vec<[f64; 6]> = runs.iter().map(value_row).collect();
    let mut column_best = [f64::NEG_INFINITY; 6];
    for row in &values {
        for (best, &v) in column_best.iter_mut().zip(row) {
            *best = best.max(v);
        }
    }

    let rows = labels
        .iter()
        .zip(&values)
        .map(|(label, vals)| CompareRow {
            label: label.clone(),
            values: *vals,
            best: std::array::from_fn(|j| vals[j] == column_best[j]),
        })
        .collect();
    Ok(Comparison { dataset_root: root.clone(), rows })
}

impl Comparison {
    /// CSV form: numeric columns plus a `best_in` column listing where the
    /// row is unbeaten.
    pub fn to_csv(&self) -> String {
        let mut text = String::new();
        let _ = writeln!(text, "label,{},best_in", COMPARISON_COLUMNS.join(","));
        for row in &self.rows {
            let nums: Vec<String> = row.values.iter().map(|v| format!("{v:.5}")).collect();
            let best: Vec<&str> = COMPARISON_COLUMNS
                .iter()
                .zip(&row.best)
                .filter(|(_, &b)| b)
                .map(|(name, _)| *name)
                .collect();
            let _ = writeln!(text, "{},{},{}", row.label, nums.join(","), best.join(";"));
        }
        text
    }

    /// Aligned plain-text form with the best value per column starred.
    pub fn to_text(&self) -> String {
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(["setting".len()])
            .max()
            .unwrap_or(7);
        let mut text = format!("{:label_w$}", "setting");
        for name in COMPARISON_COLUMNS {
            let _ = write!(text, "  {name:>10}");
        }
        text.push('\n');
        for row in &self.rows {
            let _ = write!(text, "{:label_w$}", row.label);
            for (v, &b) in row.values.iter().zip(&row.best) {
                let cell = format!("{v:.5}{}", if b { "*" } else { "" });
                let _ = write!(text, "  {cell:>10}");
            }
            text.push('\n');
        }
        text
    }
}

pub const MIN_TIMED_ITERS: usize = 10;

/// Wall-clock timing of the forward pass alone on a fixed random input.
/// The harness is single-threaded and excludes file and report I/O.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub image_size: usize,
    pub warmup: usize,
    pub measured: usize,
    pub mean_seconds: f64,
    pub samples_seconds: Vec<f64>,
    pub hardware: String,
}

fn hardware_descriptor() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "{}-{}, {} hardware threads",
        std::env::consts::ARCH,
        std::env::consts::OS,
        threads
    )
}

/// Runs `warmup` untimed and `iters` timed forward passes over one seeded
/// random image of side `size`, which must match the checkpoint.
pub fn benchmark_inference(
    checkpoint: &Path,
    size: usize,
    warmup: usize,
    iters: usize,
) -> Result<TimingReport, EvalError> {
    let bundle = load_bundle(checkpoint)?;
    benchmark_bundle(&bundle, size, warmup, iters)
}

/// [`benchmark_inference`] on an already loaded model.
pub fn benchmark_bundle(
    bundle: &ModelBundle,
    size: usize,
    warmup: usize,
    iters: usize,
) -> Result<TimingReport, EvalError> {
    if iters < MIN_TIMED_ITERS {
        return Err(EvalError::TooFewIters(iters));
    }
    let expected = bundle.derain_cfg.input_h;
    if !size.is_multiple_of(RESOLUTION_DIVISOR)
        || size != expected
        || bundle.derain_cfg.input_w != expected
    {
        return Err(EvalError::BadBenchSize { got: size, expected });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x7157);
    let input =
        Image::new(Array3::from_shape_fn((size, size, 3), |_| rng.gen_range(0.0f32..1.0)))
            .map_err(|e| EvalError::Model(ModelError::BadConfig(e.to_string())))?;

    for _ in 0..warmup {
        bundle.infer(&input)?;
    }
    let mut samples_seconds = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        bundle.infer(&input)?;
        samples_seconds.push(t0.elapsed().as_secs_f64());
    }
    let mean_seconds = samples_seconds.iter().sum::<f64>() / samples_seconds.len() as f64;

    Ok(TimingReport {
        image_size: size,
        warmup,
        measured: iters,
        mean_seconds,
        samples_seconds,
        hardware: hardware_descriptor(),
    })
}

impl TimingReport {
    pub fn to_text(&self) -> String {
        format!(
            "image {s}x{s}  warmup {w}  measured {m}  mean {mean:.6} s/image  ({hw})\n",
            s = self.image_size,
            w = self.warmup,
            m = self.measured,
            mean = self.mean_seconds,
            hw = self.hardware,
        )
    }
}
