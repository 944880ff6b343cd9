//! Latent supervisor: a small variational autoencoder over clean images.
//! In the training graph only its mean-projection layer is trainable; the
//! rest stays frozen, and the latent it produces anchors the derain
//! bottleneck through the consistency loss. An offline pretrainer exists so
//! tests can produce a supervisor with meaningful reconstructions.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::linear::LinearCache;
use crate::nn::ops::{
    relu, relu_backward, sigmoid, sigmoid_backward, upsample_nearest_2x,
    upsample_nearest_2x_backward,
};
use crate::nn::{join_name, zero_grads, Adam, Conv2d, Linear, ParamRef, Visit};

const KL_WEIGHT: f32 = 1e-4;

pub struct LatentSupervisor {
    enc_convs: Vec<Conv2d>,
    fc_mu: Linear,
    fc_logvar: Linear,
    fc_dec: Linear,
    dec_convs: Vec<Conv2d>,
    out_conv: Conv2d,
    widths: Vec<usize>,
    input_h: usize,
    input_w: usize,
    access: AtomicU64,
}

impl LatentSupervisor {
    pub fn new<R: Rng>(
        rng: &mut R,
        widths: &[usize],
        input_h: usize,
        input_w: usize,
        latent_len: usize,
    ) -> Self {
        let levels = widths.len();
        let mut enc_convs = Vec::with_capacity(levels);
        let mut in_c = 3;
        for &out_c in widths {
            enc_convs.push(Conv2d::new(rng, in_c, out_c, 3, 2, 1));
            in_c = out_c;
        }
        let (bh, bw) = (input_h >> levels, input_w >> levels);
        let flat = widths[levels - 1] * bh * bw;
        let fc_mu = Linear::new(rng, flat, latent_len);
        let fc_logvar = Linear::new(rng, flat, latent_len);
        let fc_dec = Linear::new(rng, latent_len, flat);
        let mut dec_convs = Vec::with_capacity(levels - 1);
        for k in (1..levels).rev() {
            dec_convs.push(Conv2d::new(rng, widths[k], widths[k - 1], 3, 1, 1));
        }
        let out_conv = Conv2d::new(rng, widths[0], 3, 3, 1, 1);
        let mut this = Self {
            enc_convs,
            fc_mu,
            fc_logvar,
            fc_dec,
            dec_convs,
            out_conv,
            widths: widths.to_vec(),
            input_h,
            input_w,
            access: AtomicU64::new(0),
        };
        this.set_training(false);
        this
    }

    /// Freeze policy: everything frozen except the mean projection, unless
    /// the offline pretrainer temporarily opens the whole network.
    fn set_training(&mut self, training: bool) {
        for c in &mut self.enc_convs {
            c.trainable = training;
        }
        self.fc_mu.trainable = true;
        self.fc_logvar.trainable = training;
        self.fc_dec.trainable = training;
        for c in &mut self.dec_convs {
            c.trainable = training;
        }
        self.out_conv.trainable = training;
    }

    pub fn latent_len(&self) -> usize {
        self.fc_mu.out_dim()
    }

    fn encode_flat(&self, x: &Array4<f32>) -> Array2<f32> {
        let mut cur = x.clone();
        for conv in &self.enc_convs {
            let (y, _) = conv.forward(&cur);
            cur = relu(&y);
        }
        let (n, c, h, w) = cur.dim();
        cur.to_shape((n, c * h * w)).expect("contiguous bottom").to_owned()
    }

    /// Mean latent for a batch of clean images, plus the projection cache
    /// needed to route consistency gradients into the trainable layer.
    pub fn encode(&self, x: &Array4<f32>) -> (Array2<f32>, LinearCache) {
        self.access.fetch_add(1, Ordering::Relaxed);
        assert_eq!(
            (x.dim().2, x.dim().3),
            (self.input_h, self.input_w),
            "latent supervisor input resolution"
        );
        let flat = self.encode_flat(x);
        self.fc_mu.forward(&flat)
    }

    /// Applies a latent gradient to the mean projection only. The frozen
    /// backbone below it receives nothing.
    pub fn projection_backward(&mut self, cache: &LinearCache, d_mu: &Array2<f32>) {
        self.fc_mu.backward(cache, d_mu, false);
    }

    /// Deterministic reconstruction through the mean latent.
    pub fn reconstruct(&self, x: &Array4<f32>) -> Array4<f32> {
        let flat = self.encode_flat(x);
        let (mu, _) = self.fc_mu.forward(&flat);
        self.decode(&mu)
    }

    fn decode(&self, z: &Array2<f32>) -> Array4<f32> {
        let levels = self.widths.len();
        let (bh, bw) = (self.input_h >> levels, self.input_w >> levels);
        let n = z.dim().0;
        let (flat, _) = self.fc_dec.forward(z);
        let mut cur = relu(&flat)
            .to_shape((n, self.widths[levels - 1], bh, bw))
            .expect("contiguous reshape")
            .to_owned();
        for conv in &self.dec_convs {
            cur = upsample_nearest_2x(&cur);
            let (y, _) = conv.forward(&cur);
            cur = relu(&y);
        }
        cur = upsample_nearest_2x(&cur);
        let (y, _) = self.out_conv.forward(&cur);
        sigmoid(&y)
    }

    pub fn access_count(&self) -> u64 {
        self.access.load(Ordering::Relaxed)
    }

    pub fn reset_access(&self) {
        self.access.store(0, Ordering::Relaxed);
    }

    /// Offline variational training on a fixed image set: reconstruction
    /// MSE plus a lightly weighted KL term, full backprop, then the freeze
    /// policy is restored. Returns the final reconstruction MSE.
    pub fn pretrain(&mut self, images: &Array4<f32>, steps: usize, lr: f32, rng: &mut ChaCha8Rng) -> f32 {
        self.set_training(true);
        let mut adam = Adam::new(lr);
        let mut last_recon = f32::INFINITY;
        let levels = self.widths.len();
        let (bh, bw) = (self.input_h >> levels, self.input_w >> levels);
        let bc = self.widths[levels - 1];
        let n = images.dim().0;
        for _ in 0..steps {
            zero_grads(self);

            let mut cur = images.clone();
            let mut enc_caches = Vec::with_capacity(levels);
            let mut enc_relu = Vec::with_capacity(levels);
            for conv in &self.enc_convs {
                let (y, c) = conv.forward(&cur);
                cur = relu(&y);
                enc_caches.push(c);
                enc_relu.push(cur.clone());
            }
            let flat = cur.to_shape((n, bc * bh * bw)).expect("contiguous").to_owned();
            let (mu, mu_cache) = self.fc_mu.forward(&flat);
            let (logvar, lv_cache) = self.fc_logvar.forward(&flat);
            let eps = Array2::from_shape_simple_fn(mu.raw_dim(), || {
                <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng)
            });
            let std = logvar.mapv(|v| (0.5 * v).exp());
            let z = &mu + &(&std * &eps);

            let (dec_flat, dec_fc_cache) = self.fc_dec.forward(&z);
            let dec_flat_relu = relu(&dec_flat);
            let mut g = dec_flat_relu
                .to_shape((n, bc, bh, bw))
                .expect("contiguous reshape")
                .to_owned();
            let mut dec_caches = Vec::with_capacity(self.dec_convs.len());
            let mut dec_relu = Vec::with_capacity(self.dec_convs.len());
            for conv in &self.dec_convs {
                g = upsample_nearest_2x(&g);
                let (y, c) = conv.forward(&g);
                g = relu(&y);
                dec_caches.push(c);
                dec_relu.push(g.clone());
            }
            g = upsample_nearest_2x(&g);
            let (y, out_cache) = self.out_conv.forward(&g);
            let recon = sigmoid(&y);

            let count = recon.len() as f32;
            let diff = &recon - images;
            last_recon = diff.iter().map(|v| v * v).sum::<f32>() / count;
            let d_recon = diff.mapv(|v| 2.0 * v / count);

            let d_y = sigmoid_backward(&d_recon, &recon);
            let mut d = self
                .out_conv
                .backward(&out_cache, &d_y, true)
                .expect("dx requested");
            d = upsample_nearest_2x_backward(&d);
            for k in (0..self.dec_convs.len()).rev() {
                let d_y = relu_backward(&d, &dec_relu[k]);
                d = self.dec_convs[k]
                    .backward(&dec_caches[k], &d_y, true)
                    .expect("dx requested");
                d = upsample_nearest_2x_backward(&d);
            }
            let d_dec_relu = d.to_shape((n, bc * bh * bw)).expect("contiguous").to_owned();
            let d_dec_flat = relu_backward(&d_dec_relu, &dec_flat_relu);
            let dz = self
                .fc_dec
                .backward(&dec_fc_cache, &d_dec_flat, true)
                .expect("dx requested");

            let batch = n as f32;
            let d_mu = &dz + &mu.mapv(|m| KL_WEIGHT * m / batch);
            let d_logvar = &(&dz * &eps * &std).mapv(|v| 0.5 * v)
                + &logvar.mapv(|v| KL_WEIGHT * 0.5 * (v.exp() - 1.0) / batch);
            let d_flat_mu = self
                .fc_mu
                .backward(&mu_cache, &d_mu, true)
                .expect("dx requested");
            let d_flat_lv = self
                .fc_logvar
                .backward(&lv_cache, &d_logvar, true)
                .expect("dx requested");
            let d_flat = &d_flat_mu + &d_flat_lv;

            let mut d_e = d_flat.to_shape((n, bc, bh, bw)).expect("contiguous").to_owned();
            for k in (0..levels).rev() {
                let d_y = relu_backward(&d_e, &enc_relu[k]);
                let d_in = self.enc_convs[k].backward(&enc_caches[k], &d_y, k > 0);
                if k == 0 {
                    break;
                }
                d_e = d_in.expect("dx requested");
            }

            adam.step(self);
        }
        self.set_training(false);
        last_recon
    }
}

impl Visit for LatentSupervisor {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        for (k, conv) in self.enc_convs.iter_mut().enumerate() {
            conv.visit_params(&join_name(prefix, &format!("enc{k}")), f);
        }
        self.fc_mu.visit_params(&join_name(prefix, "fc_mu"), f);
        self.fc_logvar.visit_params(&join_name(prefix, "fc_logvar"), f);
        self.fc_dec.visit_params(&join_name(prefix, "fc_dec"), f);
        for (k, conv) in self.dec_convs.iter_mut().enumerate() {
            conv.visit_params(&join_name(prefix, &format!("dec{k}")), f);
        }
        self.out_conv.visit_params(&join_name(prefix, "out"), f);
    }
}
