//! Depth estimation network: a frozen four-level encoder whose pre-pool
//! features are shared with the derain autoencoder, a trainable decoder
//! with skip connections, and sigmoid disparity heads at one or more
//! output scales.

use ndarray::{Array2, Array4};
use rand::Rng;

use crate::nn::conv::Conv2dCache;
use crate::nn::ops::{
    concat_channels, global_avg_pool, global_avg_pool_backward, maxpool2x2, maxpool2x2_backward,
    relu, relu_backward, sigmoid, sigmoid_backward, split_channels, upsample_nearest_2x,
    upsample_nearest_2x_backward, MaxPoolCache,
};
use crate::nn::{join_name, Conv2d, ConvTranspose2d, ParamRef, Visit};

use super::{DepthNetConfig, UpsampleMode, LEVELS};

/// Two stacked 3x3 convolutions with ReLU, the unit of the encoder.
struct EncBlock {
    a: Conv2d,
    b: Conv2d,
}

enum Up {
    Transposed(Box<ConvTranspose2d>),
    Nearest,
}

enum UpCache {
    Transposed(crate::nn::conv::ConvTranspose2dCache),
    Nearest,
}

pub struct DepthNet {
    blocks: Vec<EncBlock>,
    ups: Vec<Up>,
    dec_convs: Vec<Conv2d>,
    heads: Vec<Conv2d>,
    pub(crate) cfg: DepthNetConfig,
}

/// Encoder outputs: pre-pool feature maps per level (the tensors shared
/// with the derain encoder) and the post-pool bottom map.
pub struct DepthEncOut {
    pub features: Vec<Array4<f32>>,
    pub bottom: Array4<f32>,
}

pub struct DepthEncCache {
    a_caches: Vec<Conv2dCache>,
    a_relu: Vec<Array4<f32>>,
    b_caches: Vec<Conv2dCache>,
    b_relu: Vec<Array4<f32>>,
    pool_caches: Vec<MaxPoolCache>,
}

pub struct DepthDecCache {
    up_caches: Vec<UpCache>,
    conv_caches: Vec<Conv2dCache>,
    g_relu: Vec<Array4<f32>>,
    split_sizes: Vec<[usize; 2]>,
    head_caches: Vec<Conv2dCache>,
    head_sigmoid: Vec<Array4<f32>>,
}

impl DepthNet {
    pub fn new<R: Rng>(rng: &mut R, cfg: &DepthNetConfig) -> Self {
        let w = cfg.widths;
        let mut blocks = Vec::with_capacity(LEVELS);
        let mut in_c = 3;
        for &out_c in &w {
            let mut a = Conv2d::new(rng, in_c, out_c, 3, 1, 1);
            let mut b = Conv2d::new(rng, out_c, out_c, 3, 1, 1);
            a.trainable = false;
            b.trainable = false;
            blocks.push(EncBlock { a, b });
            in_c = out_c;
        }
        let mut ups = Vec::with_capacity(LEVELS);
        let mut dec_convs = Vec::with_capacity(LEVELS);
        for lvl in 0..LEVELS {
            let up_c = if lvl == LEVELS - 1 { w[LEVELS - 1] } else { w[lvl + 1] };
            ups.push(match cfg.upsample {
                UpsampleMode::Transposed => {
                    Up::Transposed(Box::new(ConvTranspose2d::new(rng, up_c, up_c, 2)))
                }
                UpsampleMode::Nearest => Up::Nearest,
            });
            dec_convs.push(Conv2d::new(rng, up_c + w[lvl], w[lvl], 3, 1, 1));
        }
        let heads = (0..cfg.heads).map(|k| Conv2d::new(rng, w[k], 1, 3, 1, 1)).collect();
        Self { blocks, ups, dec_convs, heads, cfg: cfg.clone() }
    }

    /// Pre-pool feature channel widths, level by level, for cross-network
    /// channel arithmetic.
    pub fn feature_widths(&self) -> [usize; LEVELS] {
        self.cfg.widths
    }

    pub fn encode(&self, x: &Array4<f32>) -> (DepthEncOut, DepthEncCache) {
        assert_eq!(x.dim().1, 3, "depth encoder expects RGB input");
        let mut features = Vec::with_capacity(LEVELS);
        let mut cache = DepthEncCache {
            a_caches: Vec::with_capacity(LEVELS),
            a_relu: Vec::with_capacity(LEVELS),
            b_caches: Vec::with_capacity(LEVELS),
            b_relu: Vec::with_capacity(LEVELS),
            pool_caches: Vec::with_capacity(LEVELS),
        };
        let mut cur = x.clone();
        for block in &self.blocks {
            let (ya, ca) = block.a.forward(&cur);
            let ra = relu(&ya);
            let (yb, cb) = block.b.forward(&ra);
            let f = relu(&yb);
            let (pooled, pc) = maxpool2x2(&f);
            features.push(f.clone());
            cache.a_caches.push(ca);
            cache.a_relu.push(ra);
            cache.b_caches.push(cb);
            cache.b_relu.push(f);
            cache.pool_caches.push(pc);
            cur = pooled;
        }
        (DepthEncOut { features, bottom: cur }, cache)
    }

    pub fn encode_no_grad(&self, x: &Array4<f32>) -> DepthEncOut {
        self.encode(x).0
    }

    /// Backpropagates a bottom-map gradient to the input image. Encoder
    /// weights are frozen, so only the input gradient is produced; this is
    /// the path that lets latent agreement steer the derain output.
    pub fn encode_backward(&mut self, cache: &DepthEncCache, d_bottom: &Array4<f32>) -> Array4<f32> {
        let mut d = d_bottom.clone();
        for lvl in (0..LEVELS).rev() {
            let d_f = maxpool2x2_backward(&cache.pool_caches[lvl], &d);
            let d_yb = relu_backward(&d_f, &cache.b_relu[lvl]);
            let d_ra = self.blocks[lvl]
                .b
                .backward(&cache.b_caches[lvl], &d_yb, true)
                .expect("dx requested");
            let d_ya = relu_backward(&d_ra, &cache.a_relu[lvl]);
            d = self.blocks[lvl]
                .a
                .backward(&cache.a_caches[lvl], &d_ya, true)
                .expect("dx requested");
        }
        d
    }

    /// Global average pool of the bottom map: the depth latent vector.
    pub fn latent_from_bottom(&self, bottom: &Array4<f32>) -> Array2<f32> {
        global_avg_pool(bottom)
    }

    pub fn latent_backward(&self, bottom: &Array4<f32>, d_latent: &Array2<f32>) -> Array4<f32> {
        let (_, _, h, w) = bottom.dim();
        global_avg_pool_backward(d_latent, h, w)
    }

    /// Runs the decoder over encoder outputs. Returns one disparity map per
    /// head, index 0 at input resolution and each further head at half the
    /// previous scale.
    pub fn decode(&self, enc: &DepthEncOut) -> (Vec<Array4<f32>>, DepthDecCache) {
        let w = self.cfg.widths;
        let mut g_levels: Vec<Array4<f32>> = Vec::with_capacity(LEVELS);
        let mut up_caches_rev = Vec::with_capacity(LEVELS);
        let mut conv_caches_rev = Vec::with_capacity(LEVELS);
        let mut g_relu_rev = Vec::with_capacity(LEVELS);
        let mut split_rev = Vec::with_capacity(LEVELS);
        let mut g = enc.bottom.clone();
        for lvl in (0..LEVELS).rev() {
            let (u, uc) = match &self.ups[lvl] {
                Up::Transposed(t) => {
                    let (u, c) = t.forward(&g);
                    (u, UpCache::Transposed(c))
                }
                Up::Nearest => (upsample_nearest_2x(&g), UpCache::Nearest),
            };
            let skip = &enc.features[lvl];
            let up_c = u.dim().1;
            let cat = concat_channels(&[u.view(), skip.view()]);
            let (y, cc) = self.dec_convs[lvl].forward(&cat);
            g = relu(&y);
            up_caches_rev.push(uc);
            conv_caches_rev.push(cc);
            g_relu_rev.push(g.clone());
            split_rev.push([up_c, w[lvl]]);
            g_levels.push(g.clone());
        }
        // Reverse so every per-level vector is indexed by level.
        up_caches_rev.reverse();
        conv_caches_rev.reverse();
        g_relu_rev.reverse();
        split_rev.reverse();
        g_levels.reverse();
        let mut cache = DepthDecCache {
            up_caches: up_caches_rev,
            conv_caches: conv_caches_rev,
            g_relu: g_relu_rev,
            split_sizes: split_rev,
            head_caches: Vec::with_capacity(self.heads.len()),
            head_sigmoid: Vec::with_capacity(self.heads.len()),
        };

        let mut disps = Vec::with_capacity(self.heads.len());
        for (k, head) in self.heads.iter().enumerate() {
            let (y, hc) = head.forward(&g_levels[k]);
            let d = sigmoid(&y);
            cache.head_caches.push(hc);
            cache.head_sigmoid.push(d.clone());
            disps.push(d);
        }
        (disps, cache)
    }

    /// Backpropagates per-head disparity gradients into the decoder's
    /// trainable parameters. Gradients reaching encoder features stop
    /// there.
    pub fn decode_backward(&mut self, cache: &DepthDecCache, d_disps: &[Array4<f32>]) {
        assert_eq!(d_disps.len(), self.heads.len(), "one gradient per head");
        let mut d_g: Vec<Option<Array4<f32>>> = (0..LEVELS).map(|_| None).collect();
        for (k, head) in self.heads.iter_mut().enumerate() {
            let d_y = sigmoid_backward(&d_disps[k], &cache.head_sigmoid[k]);
            let d = head
                .backward(&cache.head_caches[k], &d_y, true)
                .expect("dx requested");
            accumulate(&mut d_g[k], d);
        }
        for lvl in 0..LEVELS {
            let Some(d) = d_g[lvl].take() else { continue };
            let d_y = relu_backward(&d, &cache.g_relu[lvl]);
            let d_cat = self.dec_convs[lvl]
                .backward(&cache.conv_caches[lvl], &d_y, true)
                .expect("dx requested");
            let parts = split_channels(&d_cat, &cache.split_sizes[lvl]);
            let d_u = &parts[0];
            let d_below = match (&mut self.ups[lvl], &cache.up_caches[lvl]) {
                (Up::Transposed(t), UpCache::Transposed(c)) => {
                    t.backward(c, d_u, true).expect("dx requested")
                }
                (Up::Nearest, UpCache::Nearest) => upsample_nearest_2x_backward(d_u),
                _ => unreachable!("upsample cache kind matches config"),
            };
            if lvl + 1 < LEVELS {
                accumulate(&mut d_g[lvl + 1], d_below);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Array4<f32>>, value: Array4<f32>) {
    match slot {
        Some(existing) => *existing += &value,
        None => *slot = Some(value),
    }
}

impl Visit for DepthNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        for (k, block) in self.blocks.iter_mut().enumerate() {
            block.a.visit_params(&join_name(prefix, &format!("enc{k}.a")), f);
            block.b.visit_params(&join_name(prefix, &format!("enc{k}.b")), f);
        }
        for (lvl, up) in self.ups.iter_mut().enumerate() {
            if let Up::Transposed(t) = up {
                t.visit_params(&join_name(prefix, &format!("up{lvl}")), f);
            }
        }
        for (lvl, conv) in self.dec_convs.iter_mut().enumerate() {
            conv.visit_params(&join_name(prefix, &format!("dec{lvl}")), f);
        }
        for (k, head) in self.heads.iter_mut().enumerate() {
            head.visit_params(&join_name(prefix, &format!("head{k}")), f);
        }
    }
}
