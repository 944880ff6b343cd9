//! Full-reference image quality: PSNR and SSIM with Ave/Max/Min aggregation.
//!
//! All internals run in f64 regardless of the f32 pixel storage. PSNR on a
//! zero-error pair returns `f64::INFINITY` as a sentinel; aggregation excludes
//! such images from the PSNR statistics and counts them separately.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;

/// SSIM stabilizer C1 = (K1 L)^2 with K1 = 0.01, L = 1.
pub const SSIM_C1: f64 = 1.0e-4;
/// SSIM stabilizer C2 = (K2 L)^2 with K2 = 0.03, L = 1.
pub const SSIM_C2: f64 = 9.0e-4;
/// Side length of the SSIM Gaussian window.
pub const SSIM_WINDOW: usize = 11;
/// Standard deviation of the SSIM Gaussian window.
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: ({0}, {1}) vs ({2}, {3})")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmallForWindow { h: usize, w: usize },
    #[error("empty metric list")]
    EmptyList,
}

/// Per-image metric pair, keyed by the dataset image id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Exact arithmetic mean, maximum, and minimum of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ave: f64,
    pub max: f64,
    pub min: f64,
}

/// Dataset-level metric summary: per-image scores plus Ave/Max/Min.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageScore>,
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    pub count: usize,
    /// Images with zero error (PSNR sentinel +inf), excluded from `psnr`.
    pub perfect_count: usize,
}

fn check_shapes(pred: &Image, target: &Image) -> Result<(), MetricError> {
    if pred.height() != target.height() || pred.width() != target.width() {
        return Err(MetricError::ShapeMismatch(
            pred.height(),
            pred.width(),
            target.height(),
            target.width(),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all pixels and channels, MAX = 1.
///
/// Returns `f64::INFINITY` when the images are identical (MSE = 0).
pub fn psnr(pred: &Image, target: &Image) -> Result<f64, MetricError> {
    check_shapes(pred, target)?;
    let mut se = 0.0f64;
    for (&a, &b) in pred.pixels().iter().zip(target.pixels().iter()) {
        let d = a as f64 - b as f64;
        se += d * d;
    }
    let mse = se / pred.pixels().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn gaussian_kernel_1d() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode filtering with a separable kernel: output is
/// `(H - 10) x (W - 10)`, each entry a Gaussian-weighted window sum.
fn filter_valid(input: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = input.dim();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut mid = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * input[[y, x + i]];
            }
            mid[[y, x]] = s;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                s += kv * mid[[y + j, x]];
            }
            out[[y, x]] = s;
        }
    }
    out
}

fn channel_f64(img: &Image, c: usize) -> Array2<f64> {
    let (h, w, _) = img.pixels().dim();
    Array2::from_shape_fn((h, w), |(y, x)| img.pixels()[[y, x, c]] as f64)
}

/// Structural similarity: 11x11 Gaussian window (sigma 1.5), valid-mode
/// positions, per channel then averaged; result in [-1, 1], 1 at identity.
pub fn ssim(pred: &Image, target: &Image) -> Result<f64, MetricError> {
    check_shapes(pred, target)?;
    let (h, w) = (pred.height(), pred.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmallForWindow { h, w });
    }
    let k = gaussian_kernel_1d();
    let mut total = 0.0f64;
    let mut n = 0usize;
    for c in 0..3 {
        let a = channel_f64(pred, c);
        let b = channel_f64(target, c);
        let mu1 = filter_valid(&a, &k);
        let mu2 = filter_valid(&b, &k);
        let m11 = filter_valid(&(&a * &a), &k);
        let m22 = filter_valid(&(&b * &b), &k);
        let m12 = filter_valid(&(&a * &b), &k);
        for ((((&u1, &u2), &s11), &s22), &s12) in mu1
            .iter()
            .zip(mu2.iter())
            .zip(m11.iter())
            .zip(m22.iter())
            .zip(m12.iter())
        {
            let var1 = s11 - u1 * u1;
            let var2 = s22 - u2 * u2;
            let cov = s12 - u1 * u2;
            let luminance = (2.0 * u1 * u2 + SSIM_C1) / (u1 * u1 + u2 * u2 + SSIM_C1);
            let contrast = (2.0 * cov + SSIM_C2) / (var1 + var2 + SSIM_C2);
            total += luminance * contrast;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Ave/Max/Min per metric over a non-empty score list.
///
/// PSNR aggregates skip infinite entries (zero-error images); when every
/// image is perfect all three PSNR aggregates are the +inf sentinel.
pub fn aggregate_metrics(per_image: Vec<ImageScore>) -> Result<MetricsReport, MetricError> {
    if per_image.is_empty() {
        return Err(MetricError::EmptyList);
    }
    let count = per_image.len();
    let finite_psnr: Vec<f64> = per_image
        .iter()
        .map(|s| s.psnr)
        .filter(|v| v.is_finite())
        .collect();
    let perfect_count = count - finite_psnr.len();
    let psnr_agg = if finite_psnr.is_empty() {
        Aggregate { ave: f64::INFINITY, max: f64::INFINITY, min: f64::INFINITY }
    } else {
        aggregate_values(&finite_psnr)
    };
    let ssim_values: Vec<f64> = per_image.iter().map(|s| s.ssim).collect();
    let ssim_agg = aggregate_values(&ssim_values);
    Ok(MetricsReport { per_image, psnr: psnr_agg, ssim: ssim_agg, count, perfect_count })
}

fn aggregate_values(values: &[f64]) -> Aggregate {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let sum: f64 = values.iter().sum();
    // The exact mean lies in [min, max]; clamping strips summation rounding
    // so the min <= ave <= max invariant holds bitwise.
    let ave = (sum / values.len() as f64).clamp(min, max);
    Aggregate { ave, max, min }
}
