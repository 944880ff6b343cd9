//! The four-network bundle: a trainable derain autoencoder, a depth
//! network with frozen encoder and trainable decoder, and two frozen
//! supervisors (perceptual features and a clean-image latent). One build
//! call constructs all of them from a single seed so runs are repeatable.

pub mod checkpoint;
mod derain_ae;
mod depth_net;
mod perceptual;
mod vae;

pub use derain_ae::{DerainAe, DerainCache};
pub use depth_net::{DepthDecCache, DepthEncCache, DepthEncOut, DepthNet};
pub use perceptual::{PercCache, PerceptualNet};
pub use vae::LatentSupervisor;

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{DepthMap, Image};
use crate::nn::{ParamRef, Visit};
use crate::train::AblationConfig;

/// Encoder/decoder depth shared by the derain and depth networks; each
/// level halves spatial resolution.
pub const LEVELS: usize = 4;

/// Spatial divisor implied by [`LEVELS`] halvings.
pub const RESOLUTION_DIVISOR: usize = 1 << LEVELS;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("input resolution {got:?} does not match the model's {expected:?}")]
    BadResolution { expected: (usize, usize), got: (usize, usize) },
    #[error("incompatible feature shapes: {0}")]
    FeatureMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerainAeConfig {
    pub widths: [usize; LEVELS],
    /// Channel width between the last decoder level and the RGB head.
    pub head_width: usize,
    pub latent_len: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl Default for DerainAeConfig {
    fn default() -> Self {
        Self::for_resolution(64, 64)
    }
}

impl DerainAeConfig {
    pub fn for_resolution(input_h: usize, input_w: usize) -> Self {
        Self { widths: [32, 64, 128, 256], head_width: 16, latent_len: 150, input_h, input_w }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.contains(&0) || self.head_width == 0 {
            return Err(ModelError::BadConfig("channel widths must be nonzero".into()));
        }
        if self.latent_len == 0 {
            return Err(ModelError::BadConfig("latent length must be nonzero".into()));
        }
        for (axis, v) in [("height", self.input_h), ("width", self.input_w)] {
            if v == 0 || v % RESOLUTION_DIVISOR != 0 {
                return Err(ModelError::BadConfig(format!(
                    "input {axis} {v} is not a positive multiple of {RESOLUTION_DIVISOR}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum UpsampleMode {
    #[default]
    Transposed,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthNetConfig {
    pub widths: [usize; LEVELS],
    /// Number of disparity heads; head k emits at 1/2^k of input
    /// resolution, and at least the full and half scales are required.
    pub heads: usize,
    pub upsample: UpsampleMode,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 64, 128], heads: 2, upsample: UpsampleMode::Transposed }
    }
}

impl DepthNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.contains(&0) {
            return Err(ModelError::BadConfig("channel widths must be nonzero".into()));
        }
        if self.heads < 2 || self.heads > LEVELS {
            return Err(ModelError::BadConfig(format!(
                "head count must be between 2 and {LEVELS}, got {}",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Default supervisor widths; the perceptual pyramid has one tap per entry.
pub const SUPERVISOR_WIDTHS: [usize; 3] = [16, 32, 64];

pub struct ModelBundle {
    pub derain: DerainAe,
    pub depth: DepthNet,
    pub perceptual: PerceptualNet,
    pub latent_sup: LatentSupervisor,
    pub derain_cfg: DerainAeConfig,
    pub depth_cfg: DepthNetConfig,
    pub ablation: AblationConfig,
    pub build_seed: u64,
}

impl ModelBundle {
    /// Builds all four networks from one seed, in a fixed order, so equal
    /// inputs give bitwise-equal parameters. When the ablation disables
    /// concatenation the derain encoder is built image-only and its level
    /// widths shrink accordingly.
    pub fn build(
        derain_cfg: DerainAeConfig,
        depth_cfg: DepthNetConfig,
        ablation: AblationConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        derain_cfg.validate()?;
        depth_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let concat = ablation.concatenation_on.then_some(depth_cfg.widths);
        let derain = DerainAe::new(&mut rng, &derain_cfg, concat);
        let depth = DepthNet::new(&mut rng, &depth_cfg);
        let perceptual = PerceptualNet::new(&mut rng, &SUPERVISOR_WIDTHS);
        let latent_sup = LatentSupervisor::new(
            &mut rng,
            &SUPERVISOR_WIDTHS,
            derain_cfg.input_h,
            derain_cfg.input_w,
            derain_cfg.latent_len,
        );
        Ok(Self {
            derain,
            depth,
            perceptual,
            latent_sup,
            derain_cfg,
            depth_cfg,
            ablation,
            build_seed: seed,
        })
    }

    pub fn check_resolution(&self, h: usize, w: usize) -> Result<(), ModelError> {
        if (h, w) != (self.derain_cfg.input_h, self.derain_cfg.input_w) {
            return Err(ModelError::BadResolution {
                expected: (self.derain_cfg.input_h, self.derain_cfg.input_w),
                got: (h, w),
            });
        }
        Ok(())
    }

    /// Depth prediction for a batch: disparity maps per head plus the depth
    /// latent vector.
    pub fn depth_forward(&self, x: &Array4<f32>) -> Result<(Vec<Array4<f32>>, Array2<f32>), ModelError> {
        self.check_resolution(x.dim().2, x.dim().3)?;
        let enc = self.depth.encode_no_grad(x);
        let latent = self.depth.latent_from_bottom(&enc.bottom);
        let (disps, _) = self.depth.decode(&enc);
        Ok((disps, latent))
    }

    /// Derained batch plus the derain latent. Runs the depth encoder for
    /// concatenation features when the ablation calls for them; never
    /// touches either supervisor.
    pub fn derain_forward(&self, rainy: &Array4<f32>) -> Result<(Array4<f32>, Array2<f32>), ModelError> {
        self.check_resolution(rainy.dim().2, rainy.dim().3)?;
        let feats = if self.ablation.concatenation_on {
            self.depth.encode_no_grad(rainy).features
        } else {
            Vec::new()
        };
        let (derained, latent, _) = self.derain.forward(rainy, &feats)?;
        Ok((derained, latent))
    }

    /// Single-image inference from a rainy input alone.
    pub fn infer(&self, rainy: &Image) -> Result<Image, ModelError> {
        let x = batch_to_tensor(&[rainy]);
        let (derained, _) = self.derain_forward(&x)?;
        Ok(tensor_to_images(&derained).pop().expect("one image in, one out"))
    }

    /// Clean-image latent from the supervisor, discarding the gradient
    /// cache. Counted as a supervisor access.
    pub fn encode_clear_latent(&self, clear: &Array4<f32>) -> Result<Array2<f32>, ModelError> {
        self.check_resolution(clear.dim().2, clear.dim().3)?;
        Ok(self.latent_sup.encode(clear).0)
    }

    /// Total forward passes through the two frozen supervisors since the
    /// last reset. Inference must leave this untouched.
    pub fn supervisor_access_count(&self) -> u64 {
        self.perceptual.access_count() + self.latent_sup.access_count()
    }

    pub fn reset_supervisor_access(&self) {
        self.perceptual.reset_access();
        self.latent_sup.reset_access();
    }
}

impl Visit for ModelBundle {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.derain.visit_params(&crate::nn::join_name(prefix, "derain"), f);
        self.depth.visit_params(&crate::nn::join_name(prefix, "depth"), f);
        self.perceptual.visit_params(&crate::nn::join_name(prefix, "perceptual"), f);
        self.latent_sup.visit_params(&crate::nn::join_name(prefix, "latent"), f);
    }
}

/// Stacks images into an `(N, 3, H, W)` tensor.
pub fn batch_to_tensor(images: &[&Image]) -> Array4<f32> {
    assert!(!images.is_empty(), "batch must be non-empty");
    let (h, w) = (images[0].height(), images[0].width());
    let mut out = Array4::<f32>::zeros((images.len(), 3, h, w));
    for (i, img) in images.iter().enumerate() {
        assert_eq!((img.height(), img.width()), (h, w), "uniform batch resolution");
        let px = img.pixels();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[i, c, y, x]] = px[[y, x, c]];
                }
            }
        }
    }
    out
}

/// Unstacks an `(N, 3, H, W)` tensor into images, clamping float fuzz.
pub fn tensor_to_images(t: &Array4<f32>) -> Vec<Image> {
    let (n, c, h, w) = t.dim();
    assert_eq!(c, 3, "RGB tensor expected");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut px = ndarray::Array3::<f32>::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    px[[y, x, ch]] = t[[i, ch, y, x]];
                }
            }
        }
        out.push(Image::clamped(px).expect("finite network output"));
    }
    out
}

/// Stacks single-channel depth maps into an `(N, 1, H, W)` tensor.
pub fn depth_batch_to_tensor(depths: &[&ndarray::Array2<f32>]) -> Array4<f32> {
    assert!(!depths.is_empty(), "batch must be non-empty");
    let (h, w) = depths[0].dim();
    let mut out = Array4::<f32>::zeros((depths.len(), 1, h, w));
    for (i, d) in depths.iter().enumerate() {
        assert_eq!(d.dim(), (h, w), "uniform batch resolution");
        out.slice_mut(ndarray::s![i, 0, .., ..]).assign(d);
    }
    out
}

/// Depth map from a single-image `(1, 1, H, W)` head output.
pub fn tensor_to_depth(t: &Array4<f32>) -> DepthMap {
    let (n, c, _, _) = t.dim();
    assert_eq!((n, c), (1, 1), "single disparity map expected");
    let plane = t.index_axis(ndarray::Axis(0), 0);
    let plane = plane.index_axis(ndarray::Axis(0), 0);
    DepthMap::new(plane.to_owned()).expect("finite non-negative disparity")
}
