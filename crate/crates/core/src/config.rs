//! Flat key=value run configuration covering the training setup, the
//! ablation switchboard, and the loss weights.
//!
//! One seam handles both sources: config files apply their lines in file
//! order, then command-line overrides apply on top, so later assignments
//! win and files lose to flags. Unknown keys are rejected wherever they
//! come from. [`resolved_lines`] renders the final configuration in a
//! fixed key order for logging and provenance.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::loss::LossWeights;
use crate::train::{AblationConfig, AblationPreset, DecayMode, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config read at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: expected key=value, got {text:?}")]
    NotAnAssignment { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {why}")]
    BadValue { key: String, value: String, why: String },
}

/// Everything one run needs: training setup, switchboard, loss weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub weights: LossWeights,
}

fn bad(key: &str, value: &str, why: impl ToString) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), why: why.to_string() }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

/// Applies one `key = value` assignment. The `preset` key rewrites all four
/// switchboard booleans at once; later per-flag assignments can still flip
/// individual bits.
pub fn apply_override(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    match key {
        "batch_size" => cfg.train.batch_size = parse_num(key, value)?,
        "lr" => cfg.train.lr = parse_num(key, value)?,
        "decay" => cfg.train.decay = parse_num(key, value)?,
        "decay_mode" => {
            cfg.train.decay_mode = match value {
                "lr_schedule" => DecayMode::LrSchedule,
                "l2" => DecayMode::L2,
                _ => return Err(bad(key, value, "expected lr_schedule or l2")),
            }
        }
        "epochs" => cfg.train.epochs = parse_num(key, value)?,
        "seed" => cfg.train.seed = parse_num(key, value)?,
        "dataset_root" => cfg.train.dataset_root = PathBuf::from(value),
        "out_dir" => cfg.train.out_dir = PathBuf::from(value),
        "checkpoint_interval" => cfg.train.checkpoint_interval = parse_num(key, value)?,
        "preset" => {
            let preset: AblationPreset =
                value.parse().map_err(|e: crate::train::TrainError| bad(key, value, e))?;
            cfg.ablation = crate::train::apply_ablation(preset);
        }
        "depth_latent_on" => cfg.ablation.depth_latent_on = parse_bool(key, value)?,
        "derain_latent_on" => cfg.ablation.derain_latent_on = parse_bool(key, value)?,
        "gt_depth_on" => cfg.ablation.gt_depth_on = parse_bool(key, value)?,
        "concatenation_on" => cfg.ablation.concatenation_on = parse_bool(key, value)?,
        "w_perceptual" => cfg.weights.perceptual = parse_num(key, value)?,
        "w_depth_consist" => cfg.weights.depth_consist = parse_num(key, value)?,
        "w_derain_consist" => cfg.weights.derain_consist = parse_num(key, value)?,
        "w_derain_mse" => cfg.weights.derain_mse = parse_num(key, value)?,
        "w_depth_mse" => cfg.weights.depth_mse = parse_num(key, value)?,
        "perceptual_layers" => {
            let layers: Result<Vec<f32>, _> = value
                .split(',')
                .map(|v| v.trim().parse::<f32>().map_err(|e| bad(key, value, e)))
                .collect();
            let layers = layers?;
            if layers.is_empty() {
                return Err(bad(key, value, "needs at least one layer weight"));
            }
            cfg.weights.perceptual_layers = layers;
        }
        _ => return Err(ConfigError::UnknownKey(key.into())),
    }
    Ok(())
}

/// Splits `key=value` (one `=` required) and applies it.
pub fn apply_assignment(cfg: &mut RunConfig, text: &str, line: usize) -> Result<(), ConfigError> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| ConfigError::NotAnAssignment { line, text: text.into() })?;
    apply_override(cfg, key.trim(), value.trim())
}

/// Parses config text onto the defaults. Blank lines and `#` comments are
/// skipped; assignments apply top to bottom.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        apply_assignment(&mut cfg, line, i + 1)?;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_config(&text)
}

/// The full resolved configuration as config-file text, one key per line in
/// fixed order. Parsing it back reproduces the same configuration.
pub fn resolved_lines(cfg: &RunConfig) -> String {
    let t = &cfg.train;
    let a = &cfg.ablation;
    let w = &cfg.weights;
    let layers: Vec<String> = w.perceptual_layers.iter().map(|v| v.to_string()).collect();
    let decay_mode = match t.decay_mode {
        DecayMode::LrSchedule => "lr_schedule",
        DecayMode::L2 => "l2",
    };
    format!(
        "batch_size = {}\nlr = {}\ndecay = {}\ndecay_mode = {}\nepochs = {}\nseed = {}\n\
         dataset_root = {}\nout_dir = {}\ncheckpoint_interval = {}\n\
         depth_latent_on = {}\nderain_latent_on = {}\ngt_depth_on = {}\nconcatenation_on = {}\n\
         w_perceptual = {}\nw_depth_consist = {}\nw_derain_consist = {}\n\
         w_derain_mse = {}\nw_depth_mse = {}\nperceptual_layers = {}\n",
        t.batch_size,
        t.lr,
        t.decay,
        decay_mode,
        t.epochs,
        t.seed,
        t.dataset_root.display(),
        t.out_dir.display(),
        t.checkpoint_interval,
        a.depth_latent_on,
        a.derain_latent_on,
        a.gt_depth_on,
        a.concatenation_on,
        w.perceptual,
        w.depth_consist,
        w.derain_consist,
        w.derain_mse,
        w.depth_mse,
        layers.join(","),
    )
}
