//! Shared fixtures for integration tests: brute-force metric references and
//! random-image builders. The references are written independently of the
//! library (direct 2D window loops, no separable filtering) so agreement is
//! evidence, not tautology.

#![allow(dead_code)]

use derain_core::image::Image;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(Array3::from_shape_fn((h, w, 3), |_| rng.gen::<f32>())).unwrap()
}

/// Reference PSNR: naive triple loop, MAX = 1.
pub fn psnr_reference(pred: &Image, target: &Image) -> f64 {
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

/// Reference SSIM: explicit 2D Gaussian weights (normalized over all 121
/// entries) and direct weighted moments per window position.
pub fn ssim_reference(pred: &Image, target: &Image) -> f64 {
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
                let value = ((2.0 * mu1 * mu2 + C1) * (2.0 * cov + C2))
                    / ((mu1 * mu1 + mu2 * mu2 + C1) * (var1 + var2 + C2));
                total += value;
                n += 1;
            }
        }
    }
    total / n as f64
}
