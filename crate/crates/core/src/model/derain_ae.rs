//! Derain autoencoder: a strided convolutional encoder that optionally
//! concatenates depth features at every level, a fully connected latent
//! bottleneck, and a skip-connected decoder ending in a sigmoid RGB head.

use ndarray::{Array2, Array4};
use rand::Rng;

use crate::nn::conv::Conv2dCache;
use crate::nn::linear::LinearCache;
use crate::nn::ops::{
    concat_channels, relu, relu_backward, sigmoid, sigmoid_backward, split_channels,
    upsample_nearest_2x, upsample_nearest_2x_backward,
};
use crate::nn::{join_name, Conv2d, Linear, ParamRef, Visit};

use super::{DerainAeConfig, ModelError, LEVELS};

pub struct DerainAe {
    enc: Vec<Conv2d>,
    fc_down: Linear,
    fc_up: Linear,
    dec_convs: Vec<Conv2d>,
    out_conv: Conv2d,
    pub(crate) cfg: DerainAeConfig,
    /// Depth feature widths appended per encoder level; `None` when
    /// concatenation is disabled and the encoder runs image-only.
    pub(crate) concat_widths: Option<[usize; LEVELS]>,
}

pub struct DerainCache {
    enc_caches: Vec<Conv2dCache>,
    enc_relu: Vec<Array4<f32>>,
    enc_split: Option<Vec<[usize; 2]>>,
    fc_down_cache: LinearCache,
    fc_up_cache: LinearCache,
    fc_up_relu: Array2<f32>,
    bottom_dim: (usize, usize, usize),
    dec_conv_caches: Vec<Conv2dCache>,
    dec_relu: Vec<Array4<f32>>,
    dec_split: Vec<[usize; 2]>,
    out_cache: Conv2dCache,
    out_sigmoid: Array4<f32>,
}

impl DerainAe {
    pub fn new<R: Rng>(
        rng: &mut R,
        cfg: &DerainAeConfig,
        concat_widths: Option<[usize; LEVELS]>,
    ) -> Self {
        let w = cfg.widths;
        let extra = concat_widths.unwrap_or([0; LEVELS]);
        let mut enc = Vec::with_capacity(LEVELS);
        let mut in_c = 3;
        for k in 0..LEVELS {
            enc.push(Conv2d::new(rng, in_c + extra[k], w[k], 3, 2, 1));
            in_c = w[k];
        }
        let (bh, bw) = (cfg.input_h >> LEVELS, cfg.input_w >> LEVELS);
        let flat = w[LEVELS - 1] * bh * bw;
        let fc_down = Linear::new(rng, flat, cfg.latent_len);
        let fc_up = Linear::new(rng, cfg.latent_len, flat);
        let mut dec_convs = Vec::with_capacity(LEVELS);
        for lvl in 0..LEVELS {
            // Entering level `lvl` the running map has w[lvl] channels: the
            // bottleneck reshape at the deepest level, the level-above
            // decoder output everywhere else.
            let up_c = w[lvl];
            let (skip_c, out_c) = if lvl == 0 { (3, cfg.head_width) } else { (w[lvl - 1], w[lvl - 1]) };
            dec_convs.push(Conv2d::new(rng, up_c + skip_c, out_c, 3, 1, 1));
        }
        let out_conv = Conv2d::new(rng, cfg.head_width, 3, 3, 1, 1);
        Self { enc, fc_down, fc_up, dec_convs, out_conv, cfg: cfg.clone(), concat_widths }
    }

    /// Input channel count of each encoder level, including concatenated
    /// depth channels when configured.
    pub fn encoder_input_channels(&self) -> Vec<usize> {
        self.enc.iter().map(|c| c.in_channels()).collect()
    }

    /// Full forward pass. `depth_feats` must hold one pre-pool depth map
    /// per level when concatenation is configured and is ignored otherwise.
    /// Returns the derained image, the latent vector, and the backward
    /// cache.
    pub fn forward(
        &self,
        rainy: &Array4<f32>,
        depth_feats: &[Array4<f32>],
    ) -> Result<(Array4<f32>, Array2<f32>, DerainCache), ModelError> {
        let (n, c, h, w) = rainy.dim();
        if c != 3 || h != self.cfg.input_h || w != self.cfg.input_w {
            return Err(ModelError::BadResolution {
                expected: (self.cfg.input_h, self.cfg.input_w),
                got: (h, w),
            });
        }
        if self.concat_widths.is_some() && depth_feats.len() != LEVELS {
            return Err(ModelError::FeatureMismatch(format!(
                "expected {LEVELS} depth feature levels, got {}",
                depth_feats.len()
            )));
        }

        let mut enc_caches = Vec::with_capacity(LEVELS);
        let mut enc_relu = Vec::with_capacity(LEVELS);
        let mut enc_split = self.concat_widths.map(|_| Vec::with_capacity(LEVELS));
        let mut cur = rainy.clone();
        for (k, conv) in self.enc.iter().enumerate() {
            let input = if let Some(widths) = self.concat_widths {
                let feat = &depth_feats[k];
                let (fn_, fc, fh, fw) = feat.dim();
                let (ch, cw) = (cur.dim().2, cur.dim().3);
                if fn_ != n || fc != widths[k] || fh != ch || fw != cw {
                    return Err(ModelError::FeatureMismatch(format!(
                        "level {k} depth feature is {fn_}x{fc}x{fh}x{fw}, expected {n}x{}x{ch}x{cw}",
                        widths[k]
                    )));
                }
                enc_split
                    .as_mut()
                    .expect("split sizes tracked when concatenating")
                    .push([cur.dim().1, widths[k]]);
                concat_channels(&[cur.view(), feat.view()])
            } else {
                cur.clone()
            };
            let (y, cache) = conv.forward(&input);
            cur = relu(&y);
            enc_caches.push(cache);
            enc_relu.push(cur.clone());
        }

        let (_, bc, bh, bw) = cur.dim();
        let flat = cur
            .to_shape((n, bc * bh * bw))
            .expect("contiguous bottom")
            .to_owned();
        let (latent, fc_down_cache) = self.fc_down.forward(&flat);
        let (up_flat, fc_up_cache) = self.fc_up.forward(&latent);
        let fc_up_relu = relu(&up_flat);
        let mut g = fc_up_relu
            .to_shape((n, bc, bh, bw))
            .expect("contiguous reshape")
            .to_owned();

        let mut dec_conv_caches_rev = Vec::with_capacity(LEVELS);
        let mut dec_relu_rev = Vec::with_capacity(LEVELS);
        let mut dec_split_rev = Vec::with_capacity(LEVELS);
        for lvl in (0..LEVELS).rev() {
            let u = upsample_nearest_2x(&g);
            let skip = if lvl == 0 { rainy } else { &enc_relu[lvl - 1] };
            dec_split_rev.push([u.dim().1, skip.dim().1]);
            let cat = concat_channels(&[u.view(), skip.view()]);
            let (y, cache) = self.dec_convs[lvl].forward(&cat);
            g = relu(&y);
            dec_conv_caches_rev.push(cache);
            dec_relu_rev.push(g.clone());
        }
        dec_conv_caches_rev.reverse();
        dec_relu_rev.reverse();
        dec_split_rev.reverse();

        let (y, out_cache) = self.out_conv.forward(&g);
        let derained = sigmoid(&y);

        let cache = DerainCache {
            enc_caches,
            enc_relu,
            enc_split,
            fc_down_cache,
            fc_up_cache,
            fc_up_relu,
            bottom_dim: (bc, bh, bw),
            dec_conv_caches: dec_conv_caches_rev,
            dec_relu: dec_relu_rev,
            dec_split: dec_split_rev,
            out_cache,
            out_sigmoid: derained.clone(),
        };
        Ok((derained, latent, cache))
    }

    /// Backpropagates an image-space gradient and an additional latent
    /// gradient (from the latent consistency term) into the parameters.
    /// Gradients reaching the rainy input or the depth features are
    /// discarded.
    pub fn backward(&mut self, cache: &DerainCache, d_derained: &Array4<f32>, d_latent: &Array2<f32>) {
        let d_y = sigmoid_backward(d_derained, &cache.out_sigmoid);
        let mut d_g = self
            .out_conv
            .backward(&cache.out_cache, &d_y, true)
            .expect("dx requested");

        let mut d_skip: Vec<Option<Array4<f32>>> = (0..LEVELS).map(|_| None).collect();
        for lvl in 0..LEVELS {
            let d_y = relu_backward(&d_g, &cache.dec_relu[lvl]);
            let d_cat = self.dec_convs[lvl]
                .backward(&cache.dec_conv_caches[lvl], &d_y, true)
                .expect("dx requested");
            let mut parts = split_channels(&d_cat, &cache.dec_split[lvl]);
            let d_skip_part = parts.pop().expect("skip gradient");
            let d_u = parts.pop().expect("upsample gradient");
            if lvl > 0 {
                d_skip[lvl - 1] = Some(d_skip_part);
            }
            d_g = upsample_nearest_2x_backward(&d_u);
        }

        let (bc, bh, bw) = cache.bottom_dim;
        let n = d_g.dim().0;
        let d_up_relu = d_g
            .to_shape((n, bc * bh * bw))
            .expect("contiguous gradient")
            .to_owned();
        let d_up_flat = relu_backward(&d_up_relu, &cache.fc_up_relu);
        let d_z_dec = self
            .fc_up
            .backward(&cache.fc_up_cache, &d_up_flat, true)
            .expect("dx requested");
        let d_z = &d_z_dec + d_latent;
        let d_flat = self
            .fc_down
            .backward(&cache.fc_down_cache, &d_z, true)
            .expect("dx requested");
        let mut d_e = d_flat
            .to_shape((n, bc, bh, bw))
            .expect("contiguous reshape")
            .to_owned();

        for k in (0..LEVELS).rev() {
            let mut d = d_e;
            if let Some(extra) = d_skip[k].take() {
                d += &extra;
            }
            let d_y = relu_backward(&d, &cache.enc_relu[k]);
            let d_in = self.enc[k].backward(&cache.enc_caches[k], &d_y, k > 0);
            if k == 0 {
                break;
            }
            let d_in = d_in.expect("dx requested");
            d_e = match &cache.enc_split {
                Some(sizes) => split_channels(&d_in, &sizes[k]).swap_remove(0),
                None => d_in,
            };
        }
    }
}

impl Visit for DerainAe {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        for (k, conv) in self.enc.iter_mut().enumerate() {
            conv.visit_params(&join_name(prefix, &format!("enc{k}")), f);
        }
        self.fc_down.visit_params(&join_name(prefix, "fc_down"), f);
        self.fc_up.visit_params(&join_name(prefix, "fc_up"), f);
        for (lvl, conv) in self.dec_convs.iter_mut().enumerate() {
            conv.visit_params(&join_name(prefix, &format!("dec{lvl}")), f);
        }
        self.out_conv.visit_params(&join_name(prefix, "out"), f);
    }
}
