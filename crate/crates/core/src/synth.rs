//! Paired (rainy, clear, depth) data synthesis.
//!
//! Three formation models turn a clear background into a rainy observation:
//! linear `O = B + R`, region-masked `O = B + R * mask`, and the physical
//! composite `O = B(1 - R - F) + R + f0 * F` with a depth-driven fog layer
//! `F(d) = 1 - exp(-beta * d)`. The toy dataset generator renders procedural
//! clear scenes with smooth depth, degrades them with the physical model, and
//! writes a manifest from which every rainy image is bit-exactly recomputable.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{
    load_depth, load_image, quantize_u16, save_depth_png16, save_image, snap_to_u8_grid,
    DepthMap, Image, ImageError,
};

/// Uniform jitter applied around the global streak angle, in degrees.
const ANGLE_JITTER_DEG: f32 = 2.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("zero-area canvas: {0}x{1}")]
    EmptyCanvas(usize, usize),
    #[error("invalid synthesis parameter: {0}")]
    InvalidParams(String),
    #[error("layer shape ({0}, {1}) does not match image ({2}, {3})")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("streak mask contains non-binary value {0}")]
    NonBinaryMask(f32),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error("inconsistent dataset: {0}")]
    BadDataset(String),
}

/// Procedural streak-layer controls. Identical params produce identical
/// layers; `density` is in streaks per megapixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreakParams {
    pub density: f32,
    pub length: f32,
    pub angle_deg: f32,
    pub intensity: f32,
    pub seed: u64,
}

impl StreakParams {
    /// Defaults for the toy dataset: visible but recoverable streaks.
    pub fn toy_default() -> Self {
        Self { density: 150.0, length: 12.0, angle_deg: 10.0, intensity: 0.6, seed: 0 }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if !self.density.is_finite() || self.density < 0.0 {
            return Err(SynthError::InvalidParams(format!("density {}", self.density)));
        }
        if !self.length.is_finite() || self.length < 0.0 {
            return Err(SynthError::InvalidParams(format!("length {}", self.length)));
        }
        if !self.intensity.is_finite() || !(0.0..=1.0).contains(&self.intensity) {
            return Err(SynthError::InvalidParams(format!("intensity {}", self.intensity)));
        }
        if !self.angle_deg.is_finite() {
            return Err(SynthError::InvalidParams("angle must be finite".into()));
        }
        Ok(())
    }
}

/// Fog controls: attenuation per unit normalized depth plus the global
/// atmospheric light.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FogParams {
    pub beta: f32,
    pub f0: f32,
}

impl FogParams {
    pub fn toy_default() -> Self {
        Self { beta: 1.0, f0: 0.8 }
    }
}

/// The ingredients of one rainy observation under the physical model.
#[derive(Debug, Clone)]
pub struct RainSceneComponents {
    pub background: Image,
    pub streaks: Array2<f32>,
    pub streak_mask: Array2<f32>,
    pub fog: Array2<f32>,
    pub atmospheric: f32,
}

impl RainSceneComponents {
    /// Validates the mask/streak coupling: mask binary, streaks positive
    /// exactly where the mask is set.
    pub fn new(
        background: Image,
        streaks: Array2<f32>,
        streak_mask: Array2<f32>,
        fog: Array2<f32>,
        atmospheric: f32,
    ) -> Result<Self, SynthError> {
        if !(0.0..=1.0).contains(&atmospheric) {
            return Err(SynthError::InvalidParams(format!("f0 {atmospheric}")));
        }
        for (&r, &m) in streaks.iter().zip(streak_mask.iter()) {
            if m != 0.0 && m != 1.0 {
                return Err(SynthError::NonBinaryMask(m));
            }
            if (r > 0.0) != (m == 1.0) {
                return Err(SynthError::InvalidParams(
                    "streak mask must be the indicator of positive streak values".into(),
                ));
            }
        }
        Ok(Self { background, streaks, streak_mask, fog, atmospheric })
    }

    pub fn compose(&self) -> Result<Image, SynthError> {
        compose_physical(&self.background, &self.streaks, &self.fog, self.atmospheric)
    }
}

/// Renders anti-aliased rain streaks: line segments at the global angle plus
/// per-streak jitter, linear intensity falloff toward both ends, max-blended.
/// Returns the streak layer and its binary support mask.
pub fn generate_streak_layer(
    h: usize,
    w: usize,
    params: &StreakParams,
) -> Result<(Array2<f32>, Array2<f32>), SynthError> {
    if h == 0 || w == 0 {
        return Err(SynthError::EmptyCanvas(h, w));
    }
    params.validate()?;
    let mut layer = Array2::<f32>::zeros((h, w));
    let count = (params.density as f64 * (h * w) as f64 / 1e6).round() as usize;
    let half_len = params.length / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for _ in 0..count {
        let cx = rng.gen::<f32>() * w as f32;
        let cy = rng.gen::<f32>() * h as f32;
        let jitter = rng.gen_range(-ANGLE_JITTER_DEG..=ANGLE_JITTER_DEG);
        if half_len <= 0.0 || params.intensity == 0.0 {
            continue;
        }
        let theta = (params.angle_deg + jitter).to_radians();
        let (ux, uy) = (theta.sin(), theta.cos());
        let reach = half_len + 1.5;
        let x_lo = ((cx - reach).floor().max(0.0)) as usize;
        let x_hi = ((cx + reach).ceil().min(w as f32 - 1.0)) as usize;
        let y_lo = ((cy - reach).floor().max(0.0)) as usize;
        let y_hi = ((cy + reach).ceil().min(h as f32 - 1.0)) as usize;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let px = x as f32 + 0.5 - cx;
                let py = y as f32 + 0.5 - cy;
                let along = (px * ux + py * uy).clamp(-half_len, half_len);
                let dx = px - along * ux;
                let dy = py - along * uy;
                let perp = (dx * dx + dy * dy).sqrt();
                if perp >= 1.0 {
                    continue;
                }
                let falloff = 1.0 - along.abs() / half_len;
                let value = params.intensity * falloff * (1.0 - perp);
                if value > layer[[y, x]] {
                    layer[[y, x]] = value;
                }
            }
        }
    }
    let mask = layer.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    Ok((layer, mask))
}

/// Beer-Lambert fog from depth: `F(d) = 1 - exp(-beta * d)`, zero at zero
/// depth and monotone in depth for fixed beta.
pub fn fog_from_depth(depth: &DepthMap, params: &FogParams) -> Result<Array2<f32>, SynthError> {
    if !params.beta.is_finite() || params.beta < 0.0 {
        return Err(SynthError::InvalidParams(format!("beta {}", params.beta)));
    }
    Ok(depth.values().mapv(|d| 1.0 - (-params.beta * d).exp()))
}

fn check_layer(img: &Image, layer: &Array2<f32>) -> Result<(), SynthError> {
    let (lh, lw) = layer.dim();
    if lh != img.height() || lw != img.width() {
        return Err(SynthError::ShapeMismatch(lh, lw, img.height(), img.width()));
    }
    Ok(())
}

/// `O = B + R`, clamped to [0, 1]. Returns `B` exactly when `R` is zero.
pub fn compose_linear(background: &Image, streaks: &Array2<f32>) -> Result<Image, SynthError> {
    check_layer(background, streaks)?;
    let mut out = background.pixels().clone();
    for ((y, x, _), v) in out.indexed_iter_mut() {
        *v = (*v + streaks[[y, x]]).clamp(0.0, 1.0);
    }
    Ok(Image::new(out)?)
}

/// `O = B + R * mask` with a binary mask: streaks only where mask = 1.
pub fn compose_region(
    background: &Image,
    streaks: &Array2<f32>,
    mask: &Array2<f32>,
) -> Result<Image, SynthError> {
    check_layer(background, streaks)?;
    check_layer(background, mask)?;
    for &m in mask.iter() {
        if m != 0.0 && m != 1.0 {
            return Err(SynthError::NonBinaryMask(m));
        }
    }
    let mut out = background.pixels().clone();
    for ((y, x, _), v) in out.indexed_iter_mut() {
        *v = (*v + streaks[[y, x]] * mask[[y, x]]).clamp(0.0, 1.0);
    }
    Ok(Image::new(out)?)
}

/// `O = B(1 - R - F) + R + f0 * F`, clamped to [0, 1]. With no rain this
/// blends `B` toward the atmospheric light `f0` with weight `F`.
pub fn compose_physical(
    background: &Image,
    streaks: &Array2<f32>,
    fog: &Array2<f32>,
    f0: f32,
) -> Result<Image, SynthError> {
    if !(0.0..=1.0).contains(&f0) {
        return Err(SynthError::InvalidParams(format!("f0 {f0}")));
    }
    check_layer(background, streaks)?;
    check_layer(background, fog)?;
    let mut out = background.pixels().clone();
    for ((y, x, _), v) in out.indexed_iter_mut() {
        let r = streaks[[y, x]];
        let f = fog[[y, x]];
        *v = (*v * (1.0 - r - f) + r + f0 * f).clamp(0.0, 1.0);
    }
    Ok(Image::new(out)?)
}

/// One manifest row: everything needed to regenerate the rainy image from
/// the stored clear and depth files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub beta: f32,
    pub f0: f32,
    pub density: f32,
    pub length: f32,
    pub angle_deg: f32,
    pub intensity: f32,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn streak_params(&self) -> StreakParams {
        StreakParams {
            density: self.density,
            length: self.length,
            angle_deg: self.angle_deg,
            intensity: self.intensity,
            seed: self.seed,
        }
    }

    pub fn fog_params(&self) -> FogParams {
        FogParams { beta: self.beta, f0: self.f0 }
    }
}

pub fn rainy_path(root: &Path, id: &str) -> PathBuf {
    root.join("rainy").join(format!("{id}.png"))
}

pub fn clear_path(root: &Path, id: &str) -> PathBuf {
    root.join("clear").join(format!("{id}.png"))
}

pub fn depth_path(root: &Path, id: &str) -> PathBuf {
    root.join("depth").join(format!("{id}.png16"))
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.csv")
}

/// Writes `n` paired (rainy, clear, depth) triples plus `manifest.csv` under
/// `out_dir`. Per-image seeds are `seed + index`, so generation is identical
/// whether images are produced serially or in parallel.
pub fn make_toy_dataset(
    n: usize,
    h: usize,
    w: usize,
    streak: &StreakParams,
    fog: &FogParams,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>, SynthError> {
    if n == 0 {
        return Err(SynthError::InvalidParams("dataset needs at least one image".into()));
    }
    if h == 0 || w == 0 {
        return Err(SynthError::EmptyCanvas(h, w));
    }
    streak.validate()?;
    if !(0.0..=1.0).contains(&fog.f0) {
        return Err(SynthError::InvalidParams(format!("f0 {}", fog.f0)));
    }
    std::fs::create_dir_all(out_dir.join("rainy"))?;
    std::fs::create_dir_all(out_dir.join("clear"))?;
    std::fs::create_dir_all(out_dir.join("depth"))?;

    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let derived = seed.wrapping_add(i as u64);
        let id = format!("{i:04}");
        let (clear, depth) = generate_clear_scene(h, w, derived)?;
        let params = StreakParams { seed: derived, ..*streak };
        let (streak_layer, _) = generate_streak_layer(h, w, &params)?;
        let fog_layer = fog_from_depth(&depth, fog)?;
        let rainy = compose_physical(&clear, &streak_layer, &fog_layer, fog.f0)?;
        save_image(&clear, clear_path(out_dir, &id))?;
        save_depth_png16(&depth, depth_path(out_dir, &id))?;
        save_image(&rainy, rainy_path(out_dir, &id))?;
        entries.push(ManifestEntry {
            id,
            beta: fog.beta,
            f0: fog.f0,
            density: params.density,
            length: params.length,
            angle_deg: params.angle_deg,
            intensity: params.intensity,
            seed: derived,
        });
    }
    let mut writer = csv::Writer::from_path(manifest_path(out_dir))?;
    for e in &entries {
        writer.serialize(e)?;
    }
    writer.flush()?;
    Ok(entries)
}

/// Reads `manifest.csv` back into entries, in file order.
pub fn load_manifest(root: &Path) -> Result<Vec<ManifestEntry>, SynthError> {
    let path = manifest_path(root);
    if !path.exists() {
        return Err(SynthError::BadDataset(format!("missing {}", path.display())));
    }
    let mut reader = csv::Reader::from_path(&path)?;
    let mut entries = Vec::new();
    for row in reader.deserialize() {
        entries.push(row?);
    }
    if entries.is_empty() {
        return Err(SynthError::BadDataset("manifest has no rows".into()));
    }
    Ok(entries)
}

/// Loads the (rainy, clear, depth) triple for one manifest entry, checking
/// that all three share one resolution.
pub fn load_triple(root: &Path, id: &str) -> Result<(Image, Image, DepthMap), SynthError> {
    let rainy = load_image(rainy_path(root, id))?;
    let clear = load_image(clear_path(root, id))?;
    let depth = load_depth(depth_path(root, id))?;
    if rainy.height() != clear.height()
        || rainy.width() != clear.width()
        || !depth.matches(&rainy)
    {
        return Err(SynthError::BadDataset(format!("resolution mismatch in triple {id}")));
    }
    Ok((rainy, clear, depth))
}

/// Recomputes the rainy image of one entry from its stored clear and depth
/// files plus the logged parameters. Used by tests to prove the manifest is
/// a complete record.
pub fn regenerate_rainy(root: &Path, entry: &ManifestEntry) -> Result<Image, SynthError> {
    let clear = load_image(clear_path(root, &entry.id))?;
    let depth = load_depth(depth_path(root, &entry.id))?;
    let (streaks, _) =
        generate_streak_layer(clear.height(), clear.width(), &entry.streak_params())?;
    let fog = fog_from_depth(&depth, &entry.fog_params())?;
    compose_physical(&clear, &streaks, &fog, entry.f0)
}

/// Procedural clear scene: gradient background, a few soft shapes at their
/// own depths over a far-to-near vertical depth ramp, plus low-frequency
/// texture. Values are snapped to the 8-bit (image) and 16-bit (depth) file
/// grids so later composition is exact under save/load.
fn generate_clear_scene(h: usize, w: usize, seed: u64) -> Result<(Image, DepthMap), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let c0: [f32; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let c1: [f32; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let psi = rng.gen_range(0.0..std::f32::consts::TAU);
    let (gx, gy) = (psi.cos(), psi.sin());
    let diag = ((h * h + w * w) as f32).sqrt();
    let d_far = rng.gen_range(0.6..0.95);
    let d_near = rng.gen_range(0.05..0.3);

    let mut color = ndarray::Array3::<f32>::zeros((h, w, 3));
    let mut depth = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        let ramp = y as f32 / (h - 1).max(1) as f32;
        for x in 0..w {
            let t = ((x as f32 * gx + y as f32 * gy) / diag + 1.0) / 2.0;
            for c in 0..3 {
                color[[y, x, c]] = c0[c] + (c1[c] - c0[c]) * t;
            }
            depth[[y, x]] = d_far + (d_near - d_far) * ramp;
        }
    }

    let shape_count = rng.gen_range(3..=6);
    for _ in 0..shape_count {
        let is_circle = rng.gen_bool(0.5);
        let cx = rng.gen_range(0.0..w as f32);
        let cy = rng.gen_range(0.0..h as f32);
        let extent = rng.gen_range(0.08..0.25) * h.min(w) as f32;
        let shade: [f32; 3] =
            [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let shape_depth = rng.gen_range(0.1..0.9);
        let aspect = rng.gen_range(0.5..1.5);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f32 + 0.5 - cx).abs();
                let dy = (y as f32 + 0.5 - cy).abs();
                let coverage = if is_circle {
                    (extent - (dx * dx + dy * dy).sqrt()).clamp(0.0, 1.0)
                } else {
                    (extent - dx).clamp(0.0, 1.0).min((extent * aspect - dy).clamp(0.0, 1.0))
                };
                if coverage > 0.0 {
                    for c in 0..3 {
                        let v = &mut color[[y, x, c]];
                        *v += (shade[c] - *v) * coverage;
                    }
                    let d = &mut depth[[y, x]];
                    *d += (shape_depth - *d) * coverage;
                }
            }
        }
    }

    // Low-frequency texture: a coarse noise grid upsampled bilinearly.
    const GRID: usize = 8;
    let mut grid = [[0.0f32; GRID]; GRID];
    for row in grid.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
    }
    for y in 0..h {
        for x in 0..w {
            let fy = y as f32 / (h - 1).max(1) as f32 * (GRID - 1) as f32;
            let fx = x as f32 / (w - 1).max(1) as f32 * (GRID - 1) as f32;
            let (y0, x0) = (fy as usize, fx as usize);
            let (y1, x1) = ((y0 + 1).min(GRID - 1), (x0 + 1).min(GRID - 1));
            let (wy, wx) = (fy - y0 as f32, fx - x0 as f32);
            let noise = grid[y0][x0] * (1.0 - wy) * (1.0 - wx)
                + grid[y0][x1] * (1.0 - wy) * wx
                + grid[y1][x0] * wy * (1.0 - wx)
                + grid[y1][x1] * wy * wx;
            for c in 0..3 {
                color[[y, x, c]] = (color[[y, x, c]] + noise).clamp(0.0, 1.0);
            }
        }
    }

    for _ in 0..2 {
        depth = box_blur_3x3(&depth);
    }
    let depth = depth.mapv(|v| quantize_u16(v) as f32 / 65535.0);
    let clear = snap_to_u8_grid(&Image::clamped(color)?);
    Ok((clear, DepthMap::new(depth)?))
}

fn box_blur_3x3(input: &Array2<f32>) -> Array2<f32> {
    let (h, w) = input.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut sum = 0.0;
        let mut n = 0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = y as i64 + dy;
                let xx = x as i64 + dx;
                if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                    sum += input[[yy as usize, xx as usize]];
                    n += 1;
                }
            }
        }
        sum / n as f32
    })
}
