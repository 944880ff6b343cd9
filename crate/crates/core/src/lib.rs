//! Depth-guided single-image deraining at desk scale.
//!
//! The pipeline runs fully offline: synthesize paired (rainy, clear, depth)
//! data, train a derain autoencoder against frozen feature and latent
//! supervisors plus a depth branch, then evaluate PSNR/SSIM and timing.
//! Everything is seeded and bit-reproducible on one CPU core.

pub mod config;
pub mod eval;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use crate::config::{load_config, parse_config, resolved_lines, RunConfig};
pub use crate::eval::{benchmark_inference, compare_runs, evaluate_dataset, EvalRun, TimingReport};
pub use crate::image::{DepthMap, Image};
pub use crate::loss::{LossBreakdown, LossWeights};
pub use crate::metrics::{aggregate_metrics, psnr, ssim, MetricsReport};
pub use crate::model::{DepthNetConfig, DerainAeConfig, ModelBundle, UpsampleMode};
pub use crate::train::{apply_ablation, AblationConfig, AblationPreset, TrainConfig};
