//! Frozen perceptual feature extractor: a short stack of strided
//! convolutions whose post-ReLU activations form the feature pyramid the
//! perceptual loss compares. Every forward pass bumps an access counter so
//! tests can prove the inference path never touches it.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array4;
use rand::Rng;

use crate::nn::conv::Conv2dCache;
use crate::nn::ops::{relu, relu_backward};
use crate::nn::{join_name, Conv2d, ParamRef, Visit};

pub struct PerceptualNet {
    convs: Vec<Conv2d>,
    access: AtomicU64,
}

pub struct PercCache {
    conv_caches: Vec<Conv2dCache>,
    relu_outs: Vec<Array4<f32>>,
}

impl PerceptualNet {
    pub fn new<R: Rng>(rng: &mut R, widths: &[usize]) -> Self {
        let mut convs = Vec::with_capacity(widths.len());
        let mut in_c = 3;
        for &out_c in widths {
            let mut conv = Conv2d::new(rng, in_c, out_c, 3, 2, 1);
            conv.trainable = false;
            convs.push(conv);
            in_c = out_c;
        }
        Self { convs, access: AtomicU64::new(0) }
    }

    pub fn taps(&self) -> usize {
        self.convs.len()
    }

    /// Feature pyramid plus backward cache, for the prediction side whose
    /// gradient must flow back into the derain network.
    pub fn forward(&self, x: &Array4<f32>) -> (Vec<Array4<f32>>, PercCache) {
        self.access.fetch_add(1, Ordering::Relaxed);
        let mut taps = Vec::with_capacity(self.convs.len());
        let mut cache = PercCache {
            conv_caches: Vec::with_capacity(self.convs.len()),
            relu_outs: Vec::with_capacity(self.convs.len()),
        };
        let mut cur = x.clone();
        for conv in &self.convs {
            let (y, c) = conv.forward(&cur);
            cur = relu(&y);
            cache.conv_caches.push(c);
            cache.relu_outs.push(cur.clone());
            taps.push(cur.clone());
        }
        (taps, cache)
    }

    /// Feature pyramid only, for the target side.
    pub fn forward_no_grad(&self, x: &Array4<f32>) -> Vec<Array4<f32>> {
        self.forward(x).0
    }

    /// Backpropagates one gradient per tap to the input image. Parameters
    /// are frozen, so this only routes supervision.
    pub fn backward(&mut self, cache: &PercCache, d_taps: &[Array4<f32>]) -> Array4<f32> {
        assert_eq!(d_taps.len(), self.convs.len(), "one gradient per tap");
        let mut d: Option<Array4<f32>> = None;
        for lvl in (0..self.convs.len()).rev() {
            let mut d_tap = d_taps[lvl].clone();
            if let Some(from_above) = d {
                d_tap += &from_above;
            }
            let d_y = relu_backward(&d_tap, &cache.relu_outs[lvl]);
            d = Some(
                self.convs[lvl]
                    .backward(&cache.conv_caches[lvl], &d_y, true)
                    .expect("dx requested"),
            );
        }
        d.expect("at least one tap")
    }

    pub fn access_count(&self) -> u64 {
        self.access.load(Ordering::Relaxed)
    }

    pub fn reset_access(&self) {
        self.access.store(0, Ordering::Relaxed);
    }
}

impl Visit for PerceptualNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        for (k, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&join_name(prefix, &format!("conv{k}")), f);
        }
    }
}
