//! Joint training of the derain autoencoder and depth network: freeze
//! policy, the ablation switchboard, the deterministic loop, and
//! checkpoint/resume plumbing.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageError;
use crate::loss::{
    composite_loss, consistency_loss_grad, mse_loss_grad, perceptual_loss_grad, LossBreakdown,
    LossError, LossWeights, TermValues,
};
use crate::model::checkpoint::{self, TrainState};
use crate::model::{batch_to_tensor, depth_batch_to_tensor, ModelBundle, ModelError};
use crate::nn::ops::area_downsample_2x;
use crate::nn::{zero_grads, Adam};
use crate::synth::{load_manifest, load_triple, SynthError};

/// Which loss terms and graph edges are active. The four switches cover the
/// five ablation presets plus the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub depth_latent_on: bool,
    pub derain_latent_on: bool,
    pub gt_depth_on: bool,
    pub concatenation_on: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationConfig {
    pub fn full() -> Self {
        Self {
            depth_latent_on: true,
            derain_latent_on: true,
            gt_depth_on: true,
            concatenation_on: true,
        }
    }
}

/// The named ablation rows: each setting removes one component (or two for
/// E) from the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationPreset {
    A,
    B,
    C,
    D,
    E,
    Full,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 6] = [
        AblationPreset::Full,
        AblationPreset::A,
        AblationPreset::B,
        AblationPreset::C,
        AblationPreset::D,
        AblationPreset::E,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationPreset::A => "A",
            AblationPreset::B => "B",
            AblationPreset::C => "C",
            AblationPreset::D => "D",
            AblationPreset::E => "E",
            AblationPreset::Full => "Full",
        }
    }
}

impl std::str::FromStr for AblationPreset {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "A" => Ok(AblationPreset::A),
            "B" => Ok(AblationPreset::B),
            "C" => Ok(AblationPreset::C),
            "D" => Ok(AblationPreset::D),
            "E" => Ok(AblationPreset::E),
            "Full" | "full" => Ok(AblationPreset::Full),
            other => Err(TrainError::UnknownPreset(other.to_string())),
        }
    }
}

/// Maps a preset name to its switch row: A drops the depth-latent
/// consistency, B the derain-latent consistency, C the ground-truth depth
/// supervision, D the encoder concatenation, and E both C and D.
pub fn apply_ablation(preset: AblationPreset) -> AblationConfig {
    let full = AblationConfig::full();
    match preset {
        AblationPreset::A => AblationConfig { depth_latent_on: false, ..full },
        AblationPreset::B => AblationConfig { derain_latent_on: false, ..full },
        AblationPreset::C => AblationConfig { gt_depth_on: false, ..full },
        AblationPreset::D => AblationConfig { concatenation_on: false, ..full },
        AblationPreset::E => {
            AblationConfig { gt_depth_on: false, concatenation_on: false, ..full }
        }
        AblationPreset::Full => full,
    }
}

/// How the decay factor is applied: as a per-epoch learning-rate multiplier
/// (default) or as a literal additive L2 coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DecayMode {
    #[default]
    LrSchedule,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub decay: f32,
    pub decay_mode: DecayMode,
    pub epochs: usize,
    pub seed: u64,
    pub dataset_root: PathBuf,
    pub out_dir: PathBuf,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr: 5e-3,
            decay: 0.9,
            decay_mode: DecayMode::LrSchedule,
            epochs: 10,
            seed: 0,
            dataset_root: PathBuf::from("data/toy"),
            out_dir: PathBuf::from("runs/default"),
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(TrainError::BadConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if !self.decay.is_finite() || self.decay <= 0.0 {
            return Err(TrainError::BadConfig(format!("decay must be > 0, got {}", self.decay)));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("unknown ablation preset {0:?} (expected A, B, C, D, E, or Full)")]
    UnknownPreset(String),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Dataset(#[from] SynthError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] crate::model::checkpoint::CheckpointError),
    #[error("non-finite loss at step {step}; last good checkpoint: {last_checkpoint:?}")]
    NonFinite { step: u64, last_checkpoint: Option<PathBuf> },
    #[error("training I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("log write: {0}")]
    Csv(#[from] csv::Error),
}

/// One preloaded training example in tensor form.
struct Example {
    rainy: Array4<f32>,
    clear: Array4<f32>,
    depth: Array2<f32>,
}

fn load_examples(root: &Path) -> Result<Vec<Example>, TrainError> {
    let manifest = load_manifest(root)?;
    let mut examples = Vec::with_capacity(manifest.len());
    for entry in &manifest {
        let (rainy, clear, depth) = load_triple(root, &entry.id)?;
        examples.push(Example {
            rainy: batch_to_tensor(&[&rainy]),
            clear: batch_to_tensor(&[&clear]),
            depth: depth.into_values(),
        });
    }
    Ok(examples)
}

fn stack_batch(examples: &[Example], idx: &[usize]) -> (Array4<f32>, Array4<f32>, Array4<f32>, Array4<f32>) {
    let (_, _, h, w) = examples[0].rainy.dim();
    let n = idx.len();
    let mut rainy = Array4::<f32>::zeros((n, 3, h, w));
    let mut clear = Array4::<f32>::zeros((n, 3, h, w));
    let depths: Vec<&Array2<f32>> = idx.iter().map(|&i| &examples[i].depth).collect();
    for (row, &i) in idx.iter().enumerate() {
        rainy
            .slice_mut(ndarray::s![row..row + 1, .., .., ..])
            .assign(&examples[i].rainy);
        clear
            .slice_mut(ndarray::s![row..row + 1, .., .., ..])
            .assign(&examples[i].clear);
    }
    let depth_full = depth_batch_to_tensor(&depths);
    let halves: Vec<Array2<f32>> = depths.iter().map(|d| area_downsample_2x(d)).collect();
    let half_refs: Vec<&Array2<f32>> = halves.iter().collect();
    let depth_half = depth_batch_to_tensor(&half_refs);
    (rainy, clear, depth_full, depth_half)
}

/// One optimizer update on one batch: [`loss_and_grads`] followed by an
/// Adam step over the trainable set. Returns the pre-update breakdown.
pub fn train_step(
    bundle: &mut ModelBundle,
    adam: &mut Adam,
    rainy: &Array4<f32>,
    clear: &Array4<f32>,
    depth_gt: &Array4<f32>,
    depth_gt_half: &Array4<f32>,
    weights: &LossWeights,
) -> Result<LossBreakdown, TrainError> {
    let breakdown = loss_and_grads(bundle, rainy, clear, depth_gt, depth_gt_half, weights)?;
    if !breakdown.total.is_finite() {
        return Err(TrainError::NonFinite { step: adam.t + 1, last_checkpoint: None });
    }
    adam.step(bundle);
    Ok(breakdown)
}

/// Forward pass, five-term loss, and full backward pass on one batch.
/// Zeroes gradients first and leaves the weighted parameter gradients
/// accumulated in the bundle; each path's gradient is scaled by its term
/// weight so the result matches the weighted total.
pub fn loss_and_grads(
    bundle: &mut ModelBundle,
    rainy: &Array4<f32>,
    clear: &Array4<f32>,
    depth_gt: &Array4<f32>,
    depth_gt_half: &Array4<f32>,
    weights: &LossWeights,
) -> Result<LossBreakdown, TrainError> {
    let ablation = bundle.ablation;
    zero_grads(bundle);

    // Depth encoder over the rainy batch, needed for concatenation
    // features and for ground-truth depth supervision.
    let need_rainy_depth = ablation.concatenation_on || ablation.gt_depth_on;
    let depth_enc_rainy = need_rainy_depth.then(|| bundle.depth.encode_no_grad(rainy));
    let depth_feats: &[Array4<f32>] = match (&depth_enc_rainy, ablation.concatenation_on) {
        (Some(enc), true) => &enc.features,
        _ => &[],
    };
    let (derained, latent, derain_cache) = bundle.derain.forward(rainy, depth_feats)?;

    // Ground-truth depth supervision through the trainable decoder.
    let (depth_term, dec_backprop) = if ablation.gt_depth_on {
        let enc = depth_enc_rainy.as_ref().expect("encoded when supervision is on");
        let (disps, dec_cache) = bundle.depth.decode(enc);
        let (l0, g0) = mse_loss_grad(&disps[0], depth_gt)?;
        let (l1, g1) = mse_loss_grad(&disps[1], depth_gt_half)?;
        let term = 0.5 * (l0 as f64 + l1 as f64);
        let mut grads = vec![g0.mapv(|v| v * 0.5), g1.mapv(|v| v * 0.5)];
        for extra in disps.iter().skip(2) {
            grads.push(Array4::zeros(extra.raw_dim()));
        }
        (term, Some((dec_cache, grads)))
    } else {
        (0.0, None)
    };

    // Perceptual supervision on the derained estimate.
    let (pred_taps, perc_cache) = bundle.perceptual.forward(&derained);
    let target_taps = bundle.perceptual.forward_no_grad(clear);
    let (perc_term, dperc_taps) =
        perceptual_loss_grad(&target_taps, &pred_taps, &weights.perceptual_layers)?;

    // Latent consistency terms.
    let (derain_term, d_latent, fc_backprop) = if ablation.derain_latent_on {
        let (clear_latent, fc_cache) = bundle.latent_sup.encode(clear);
        let mut term_sum = 0.0f64;
        let n = latent.dim().0;
        let mut d_latent = Array2::<f32>::zeros(latent.raw_dim());
        let mut d_clear_latent = Array2::<f32>::zeros(clear_latent.raw_dim());
        for i in 0..n {
            let (l, ga, gb) = consistency_loss_grad(
                &latent.row(i).to_owned(),
                &clear_latent.row(i).to_owned(),
            )?;
            term_sum += l as f64;
            let scale = 1.0 / n as f32;
            for (dst, g) in d_latent.row_mut(i).iter_mut().zip(ga.iter()) {
                *dst = g * scale;
            }
            for (dst, g) in d_clear_latent.row_mut(i).iter_mut().zip(gb.iter()) {
                *dst = g * scale;
            }
        }
        (term_sum / n as f64, Some(d_latent), Some((fc_cache, d_clear_latent)))
    } else {
        (0.0, None, None)
    };

    let (depth_consist_term, d_derained_from_depth) = if ablation.depth_latent_on {
        let (enc_derained, enc_cache_derained) = bundle.depth.encode(&derained);
        let d_r = bundle.depth.latent_from_bottom(&enc_derained.bottom);
        let enc_clear = bundle.depth.encode_no_grad(clear);
        let d_c = bundle.depth.latent_from_bottom(&enc_clear.bottom);
        let n = d_r.dim().0;
        let mut term_sum = 0.0f64;
        let mut d_dr = Array2::<f32>::zeros(d_r.raw_dim());
        for i in 0..n {
            let (l, ga, _) =
                consistency_loss_grad(&d_r.row(i).to_owned(), &d_c.row(i).to_owned())?;
            term_sum += l as f64;
            let scale = 1.0 / n as f32;
            for (dst, g) in d_dr.row_mut(i).iter_mut().zip(ga.iter()) {
                *dst = g * scale;
            }
        }
        let effective = weights.depth_consist as f32;
        let d_bottom = bundle
            .depth
            .latent_backward(&enc_derained.bottom, &d_dr.mapv(|v| v * effective));
        let d_derained = bundle.depth.encode_backward(&enc_cache_derained, &d_bottom);
        (term_sum / n as f64, Some(d_derained))
    } else {
        (0.0, None)
    };

    // Direct reconstruction term.
    let (derain_mse_term, d_derained_mse) = mse_loss_grad(&derained, clear)?;

    let terms = TermValues {
        perceptual: perc_term as f64,
        depth_consist: depth_consist_term,
        derain_consist: derain_term,
        derain_mse: derain_mse_term as f64,
        depth_mse: depth_term,
    };
    let breakdown = composite_loss(&terms, weights, &ablation)?;

    // Backward. Each path's gradient is scaled by its term weight here so
    // the accumulated parameter gradients match the weighted total.
    let mut d_derained = Array4::<f32>::zeros(derained.raw_dim());
    let scaled_perc: Vec<Array4<f32>> = dperc_taps
        .iter()
        .map(|g| g.mapv(|v| v * weights.perceptual as f32))
        .collect();
    d_derained += &bundle.perceptual.backward(&perc_cache, &scaled_perc);
    if let Some(dd) = d_derained_from_depth {
        d_derained += &dd;
    }
    d_derained += &d_derained_mse.mapv(|v| v * weights.derain_mse as f32);

    let d_latent_scaled = d_latent
        .map(|g| g.mapv(|v| v * weights.derain_consist as f32))
        .unwrap_or_else(|| Array2::zeros(latent.raw_dim()));
    bundle.derain.backward(&derain_cache, &d_derained, &d_latent_scaled);

    if let Some((fc_cache, d_clear_latent)) = fc_backprop {
        bundle
            .latent_sup
            .projection_backward(&fc_cache, &d_clear_latent.mapv(|v| v * weights.derain_consist as f32));
    }

    if let Some((dec_cache, mut grads)) = dec_backprop {
        for g in &mut grads {
            g.mapv_inplace(|v| v * weights.depth_mse as f32);
        }
        bundle.depth.decode_backward(&dec_cache, &grads);
    }

    Ok(breakdown)
}

/// Artifacts of a finished (or resumed-and-finished) training run.
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub steps: u64,
    pub final_loss: f64,
}

/// Trains from scratch: builds the bundle from the dataset resolution,
/// iterates `epochs` over seeded shuffles, logs every step, and writes
/// periodic plus final checkpoints.
pub fn train(
    cfg: &TrainConfig,
    ablation: AblationConfig,
    weights: &LossWeights,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let examples = load_examples(&cfg.dataset_root)?;
    let (_, _, h, w) = examples[0].rainy.dim();
    let bundle = ModelBundle::build(
        crate::model::DerainAeConfig::for_resolution(h, w),
        crate::model::DepthNetConfig::default(),
        ablation,
        cfg.seed,
    )?;
    let adam = Adam::new(cfg.lr);
    let state = TrainState {
        bundle,
        adam,
        step: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        train_cfg: cfg.clone(),
        weights: weights.clone(),
    };
    run_loop(state, &examples, false)
}

/// Resumes a checkpointed run to its configured epoch count. The restored
/// optimizer, RNG, and step counter make the continuation bit-identical to
/// an uninterrupted run.
pub fn resume(checkpoint_path: &Path) -> Result<TrainOutcome, TrainError> {
    let state = checkpoint::load_checkpoint(checkpoint_path)?;
    let examples = load_examples(&state.train_cfg.dataset_root)?;
    run_loop(state, &examples, true)
}

fn run_loop(
    mut state: TrainState,
    examples: &[Example],
    resumed: bool,
) -> Result<TrainOutcome, TrainError> {
    let cfg = state.train_cfg.clone();
    std::fs::create_dir_all(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join("train_log.csv");
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;

    let mut log = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(open_log(&log_path, resumed)?);
    if !resumed {
        log.write_record([
            "step",
            "perceptual",
            "depth_consist",
            "derain_consist",
            "derain_mse",
            "depth_mse",
            "total",
        ])?;
    }

    let mut last_checkpoint = None;
    let mut final_loss = f64::NAN;
    while state.step < total_steps {
        let epoch = state.step / steps_per_epoch;
        if cfg.decay_mode == DecayMode::LrSchedule {
            state.adam.lr = cfg.lr * cfg.decay.powi(epoch as i32);
        } else {
            state.adam.lr = cfg.lr;
            state.adam.l2 = cfg.decay;
        }
        let order = epoch_order(examples.len(), cfg.seed, epoch);
        let within = (state.step % steps_per_epoch) as usize;
        let start = within * cfg.batch_size;
        let idx = &order[start..(start + cfg.batch_size).min(order.len())];
        let (rainy, clear, depth, depth_half) = stack_batch(examples, idx);

        let breakdown = train_step(
            &mut state.bundle,
            &mut state.adam,
            &rainy,
            &clear,
            &depth,
            &depth_half,
            &state.weights,
        )
        .map_err(|e| match e {
            TrainError::NonFinite { step, .. } => {
                TrainError::NonFinite { step, last_checkpoint: last_checkpoint.clone() }
            }
            TrainError::Loss(crate::loss::LossError::NonFinite(_)) => TrainError::NonFinite {
                step: state.step + 1,
                last_checkpoint: last_checkpoint.clone(),
            },
            other => other,
        })?;
        state.step += 1;
        final_loss = breakdown.total;
        log.write_record([
            state.step.to_string(),
            format!("{:.9e}", breakdown.perceptual),
            format!("{:.9e}", breakdown.depth_consist),
            format!("{:.9e}", breakdown.derain_consist),
            format!("{:.9e}", breakdown.derain_mse),
            format!("{:.9e}", breakdown.depth_mse),
            format!("{:.9e}", breakdown.total),
        ])?;

        if cfg.checkpoint_interval > 0
            && state.step.is_multiple_of(cfg.checkpoint_interval as u64)
            && state.step < total_steps
        {
            let path = cfg.out_dir.join(format!("ckpt_step{}.drck", state.step));
            checkpoint::save_checkpoint(&path, &mut state)?;
            last_checkpoint = Some(path);
        }
    }
    log.flush()?;
    drop(log);

    let final_path = cfg.out_dir.join("final.drck");
    checkpoint::save_checkpoint(&final_path, &mut state)?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        log_path,
        steps: state.step,
        final_loss,
    })
}

fn open_log(path: &Path, append: bool) -> Result<std::fs::File, std::io::Error> {
    std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
}

/// Fixed shuffle for one epoch, a pure function of (seed, epoch).
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}
