//! Image and depth-map types with file I/O.
//!
//! Images live in `[0,1]` float throughout the pipeline; quantization to
//! 8-bit (images) or 16-bit (depth) happens only at file I/O. Depth maps can
//! also round-trip through a grayscale PFM float map (`Pf`, little-endian).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};
use ndarray::{Array2, Array3};
use thiserror::Error;

/// Minimum height/width: covers the 11x11 SSIM window and 4-level encoders.
pub const MIN_SIDE: usize = 16;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("file not found: {0}")]
    Missing(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image data in {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("cannot write {path}: {reason}")]
    Unwritable { path: String, reason: String },
    #[error("invalid pixel data: {0}")]
    InvalidData(String),
    #[error("image too small: {h}x{w} (minimum {MIN_SIDE}x{MIN_SIDE})")]
    TooSmall { h: usize, w: usize },
}

/// An RGB image as an `(H, W, 3)` float array with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    /// Wraps an `(H, W, 3)` array, validating finiteness, range, and size.
    pub fn new(data: Array3<f32>) -> Result<Self, ImageError> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(ImageError::InvalidData(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(ImageError::TooSmall { h, w });
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(ImageError::InvalidData(format!("value {v} outside [0,1]")));
            }
        }
        Ok(Self { data })
    }

    /// Wraps an array after clamping every value into `[0, 1]`.
    ///
    /// Non-finite values are rejected rather than clamped; they signal a bug
    /// upstream (divergence), not an out-of-range composition.
    pub fn clamped(mut data: Array3<f32>) -> Result<Self, ImageError> {
        for v in data.iter_mut() {
            if !v.is_finite() {
                return Err(ImageError::InvalidData("non-finite value".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(data)
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self, ImageError> {
        Self::new(Array3::zeros((h, w, 3)))
    }

    pub fn constant(h: usize, w: usize, value: f32) -> Result<Self, ImageError> {
        Self::new(Array3::from_elem((h, w, 3), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// The `(H, W, 3)` pixel array.
    pub fn pixels(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.data
    }
}

/// A per-pixel depth (or disparity) map: `(H, W)` floats, normalized `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    data: Array2<f32>,
}

impl DepthMap {
    pub fn new(data: Array2<f32>) -> Result<Self, ImageError> {
        for &v in data.iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(ImageError::InvalidData(format!("depth value {v} invalid")));
            }
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn into_values(self) -> Array2<f32> {
        self.data
    }

    /// Checks the map pairs with `img` (same H and W).
    pub fn matches(&self, img: &Image) -> bool {
        self.height() == img.height() && self.width() == img.width()
    }
}

fn classify_open_error(path: &Path, err: image::ImageError) -> ImageError {
    let p = path.display().to_string();
    match err {
        image::ImageError::IoError(e) if e.kind() == std::io::ErrorKind::NotFound => {
            ImageError::Missing(p)
        }
        image::ImageError::Unsupported(e) => {
            ImageError::UnsupportedFormat(format!("{p}: {e}"))
        }
        other => ImageError::Corrupt { path: p, reason: other.to_string() },
    }
}

/// Loads an 8- or 16-bit RGB raster into `[0, 1]` floats.
///
/// Deterministic byte-for-byte: the same file always yields the same array.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(ImageError::Missing(path.display().to_string()));
    }
    // Guess format from content, not extension: depth files carry a
    // non-standard `.png16` suffix by contract.
    let reader = ImageReader::open(path)
        .map_err(|e| ImageError::Corrupt {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .with_guessed_format()
        .map_err(|e| ImageError::Corrupt {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let img = reader.decode().map_err(|e| classify_open_error(path, e))?;
    let (data, h, w) = match img {
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut arr = Array3::<f32>::zeros((h, w, 3));
            for (x, y, px) in buf.enumerate_pixels() {
                for c in 0..3 {
                    arr[[y as usize, x as usize, c]] = px.0[c] as f32 / 255.0;
                }
            }
            (arr, h, w)
        }
        DynamicImage::ImageRgb16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut arr = Array3::<f32>::zeros((h, w, 3));
            for (x, y, px) in buf.enumerate_pixels() {
                for c in 0..3 {
                    arr[[y as usize, x as usize, c]] = px.0[c] as f32 / 65535.0;
                }
            }
            (arr, h, w)
        }
        other => {
            return Err(ImageError::UnsupportedFormat(format!(
                "{}: {:?} (want 8/16-bit RGB)",
                path.display(),
                other.color()
            )))
        }
    };
    let _ = (h, w);
    Image::new(data)
}

/// Saves an image as 8-bit RGB PNG. Round-trips within 1/255 per channel.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let (h, w) = (img.height(), img.width());
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            px.0[c] = quantize_u8(img.pixels()[[y as usize, x as usize, c]]);
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| ImageError::Unwritable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
}

/// Quantizes a `[0,1]` value to the 8-bit grid.
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Quantizes a `[0,1]` value to the 16-bit grid.
pub fn quantize_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Snaps every channel to the 8-bit grid in-place semantics (returns a copy).
///
/// Composing from snapped inputs makes the on-disk regeneration check exact:
/// save + load of the result reproduces it bit-for-bit.
pub fn snap_to_u8_grid(img: &Image) -> Image {
    let data = img.pixels().mapv(|v| quantize_u8(v) as f32 / 255.0);
    Image::new(data).expect("snapped values stay in range")
}

/// Loads a depth map from a 16-bit grayscale PNG (`value/65535`) or a
/// grayscale PFM float map, detected by content.
pub fn load_depth(path: impl AsRef<Path>) -> Result<DepthMap, ImageError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(ImageError::Missing(path.display().to_string()));
    }
    let mut head = [0u8; 2];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map_err(|e| ImageError::Corrupt {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    if &head == b"Pf" {
        return load_depth_pfm(path);
    }
    let reader = ImageReader::open(path)
        .map_err(|e| ImageError::Corrupt {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .with_guessed_format()
        .map_err(|e| ImageError::Corrupt {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let img = reader.decode().map_err(|e| classify_open_error(path, e))?;
    match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut arr = Array2::<f32>::zeros((h, w));
            for (x, y, px) in buf.enumerate_pixels() {
                arr[[y as usize, x as usize]] = px.0[0] as f32 / 65535.0;
            }
            DepthMap::new(arr)
        }
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut arr = Array2::<f32>::zeros((h, w));
            for (x, y, px) in buf.enumerate_pixels() {
                arr[[y as usize, x as usize]] = px.0[0] as f32 / 255.0;
            }
            DepthMap::new(arr)
        }
        other => Err(ImageError::UnsupportedFormat(format!(
            "{}: {:?} (want single-channel grayscale)",
            path.display(),
            other.color()
        ))),
    }
}

/// Saves a depth map as 16-bit grayscale PNG (`value/65535` scale).
pub fn save_depth_png16(depth: &DepthMap, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let (h, w) = (depth.height(), depth.width());
    let mut buf = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        px.0[0] = quantize_u16(depth.values()[[y as usize, x as usize]]);
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| ImageError::Unwritable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
}

/// Saves a depth map as grayscale PFM: 3-line ASCII header (`Pf`, `W H`,
/// scale) then row-major little-endian f32. Negative scale marks LE.
pub fn save_depth_pfm(depth: &DepthMap, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| ImageError::Unwritable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut w = BufWriter::new(file);
    let write_err = |e: std::io::Error| ImageError::Unwritable {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    write!(w, "Pf\n{} {}\n-1.0\n", depth.width(), depth.height()).map_err(write_err)?;
    // PFM stores rows bottom-to-top.
    for y in (0..depth.height()).rev() {
        for x in 0..depth.width() {
            w.write_all(&depth.values()[[y, x]].to_le_bytes()).map_err(write_err)?;
        }
    }
    w.flush().map_err(write_err)
}

fn load_depth_pfm(path: &Path) -> Result<DepthMap, ImageError> {
    let p = path.display().to_string();
    let corrupt = |reason: &str| ImageError::Corrupt { path: p.clone(), reason: reason.into() };
    let file = File::open(path).map_err(|e| ImageError::Corrupt {
        path: p.clone(),
        reason: e.to_string(),
    })?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|_| corrupt("missing magic line"))?;
    if line.trim() != "Pf" {
        return Err(ImageError::UnsupportedFormat(format!("{p}: not a grayscale PFM")));
    }
    line.clear();
    r.read_line(&mut line).map_err(|_| corrupt("missing dimensions line"))?;
    let mut it = line.split_whitespace();
    let w: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| corrupt("bad width"))?;
    let h: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| corrupt("bad height"))?;
    line.clear();
    r.read_line(&mut line).map_err(|_| corrupt("missing scale line"))?;
    let scale: f32 = line.trim().parse().map_err(|_| corrupt("bad scale"))?;
    if scale >= 0.0 {
        return Err(ImageError::UnsupportedFormat(format!("{p}: big-endian PFM not supported")));
    }
    let mut raw = vec![0u8; h * w * 4];
    r.read_exact(&mut raw).map_err(|_| corrupt("truncated float data"))?;
    let mut arr = Array2::<f32>::zeros((h, w));
    let mut i = 0;
    for y in (0..h).rev() {
        for x in 0..w {
            let bytes = [raw[i], raw[i + 1], raw[i + 2], raw[i + 3]];
            arr[[y, x]] = f32::from_le_bytes(bytes) / -scale;
            i += 4;
        }
    }
    DepthMap::new(arr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scale_endpoints_and_midpoint() {
        // 255 -> 1.0, 0 -> 0.0, 128 -> 128/255
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(16, 16);
        for (x, _y, px) in buf.enumerate_pixels_mut() {
            let v = match x % 3 {
                0 => 255,
                1 => 0,
                _ => 128,
            };
            px.0 = [v, v, v];
        }
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.pixels()[[0, 0, 0]], 1.0);
        assert_eq!(img.pixels()[[0, 1, 0]], 0.0);
        let mid = img.pixels()[[0, 2, 0]];
        assert!((mid - 128.0 / 255.0).abs() < 1e-7, "got {mid}");
    }

    #[test]
    fn save_load_zeros_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.png");
        let img = Image::zeros(32, 32).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn save_load_random_within_quantization_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = Array3::from_shape_fn((24, 31, 3), |_| rng.gen::<f32>());
        let img = Image::new(data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        let max_diff = img
            .pixels()
            .iter()
            .zip(back.pixels().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 1.0 / 255.0 + 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn missing_file_is_distinct_error() {
        match load_image("/nonexistent/sub/no.png") {
            Err(ImageError::Missing(_)) => {}
            other => panic!("expected Missing, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_file_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"\x89PNG\r\n\x1a\nnot really a png").unwrap();
        match load_image(&path) {
            Err(ImageError::Corrupt { .. }) | Err(ImageError::UnsupportedFormat(_)) => {}
            other => panic!("expected Corrupt/Unsupported, got {other:?}"),
        }
    }

    #[test]
    fn unwritable_path_errors() {
        let img = Image::zeros(16, 16).unwrap();
        match save_image(&img, "/nonexistent-dir-xyz/out.png") {
            Err(ImageError::Unwritable { .. }) => {}
            other => panic!("expected Unwritable, got {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_range_and_tiny() {
        let mut data = Array3::<f32>::zeros((16, 16, 3));
        data[[0, 0, 0]] = 1.5;
        assert!(matches!(Image::new(data), Err(ImageError::InvalidData(_))));
        assert!(matches!(Image::zeros(8, 32), Err(ImageError::TooSmall { .. })));
    }

    #[test]
    fn depth_png16_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = ndarray::Array2::from_shape_fn((20, 26), |_| rng.gen::<f32>());
        let depth = DepthMap::new(data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png16");
        save_depth_png16(&depth, &path).unwrap();
        let back = load_depth(&path).unwrap();
        let max_diff = depth
            .values()
            .iter()
            .zip(back.values().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 1.0 / 65535.0 + 1e-7, "max diff {max_diff}");
    }

    #[test]
    fn depth_pfm_roundtrip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data = ndarray::Array2::from_shape_fn((17, 23), |_| rng.gen::<f32>());
        let depth = DepthMap::new(data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        save_depth_pfm(&depth, &path).unwrap();
        let back = load_depth(&path).unwrap();
        assert_eq!(depth, back);
    }
}
