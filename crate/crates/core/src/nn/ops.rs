//! Parameter-free operations: activations, pooling, upsampling, channel
//! concatenation. Each forward has a matching backward taking the same
//! auxiliary data the forward produced.

use ndarray::{s, Array, Array2, Array4, ArrayView4, Axis, Dimension};

pub fn relu<D: Dimension>(x: &Array<f32, D>) -> Array<f32, D> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward<D: Dimension>(dy: &Array<f32, D>, y: &Array<f32, D>) -> Array<f32, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| {
        if yv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid<D: Dimension>(x: &Array<f32, D>) -> Array<f32, D> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward<D: Dimension>(dy: &Array<f32, D>, y: &Array<f32, D>) -> Array<f32, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| *d *= yv * (1.0 - yv));
    dx
}

/// Records which corner of each 2x2 window held the maximum.
pub struct MaxPoolCache {
    argmax: Array4<u8>,
    input_hw: (usize, usize),
}

/// 2x2 max pooling, stride 2. Requires even spatial dims.
pub fn maxpool2x2(x: &Array4<f32>) -> (Array4<f32>, MaxPoolCache) {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool needs even dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<f32>::zeros((n, c, oh, ow));
    let mut argmax = Array4::<u8>::zeros((n, c, oh, ow));
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for k in 0..4u8 {
                        let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                        let v = x[[i, ch, oy * 2 + dy, ox * 2 + dx]];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    out[[i, ch, oy, ox]] = best;
                    argmax[[i, ch, oy, ox]] = best_k;
                }
            }
        }
    }
    (out, MaxPoolCache { argmax, input_hw: (h, w) })
}

pub fn maxpool2x2_backward(cache: &MaxPoolCache, dy: &Array4<f32>) -> Array4<f32> {
    let (n, c, oh, ow) = dy.dim();
    let (h, w) = cache.input_hw;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let k = cache.argmax[[i, ch, oy, ox]];
                    let (ky, kx) = ((k / 2) as usize, (k % 2) as usize);
                    dx[[i, ch, oy * 2 + ky, ox * 2 + kx]] += dy[[i, ch, oy, ox]];
                }
            }
        }
    }
    dx
}

pub fn upsample_nearest_2x(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h * 2, w * 2), |(i, ch, y, xx)| x[[i, ch, y / 2, xx / 2]])
}

pub fn upsample_nearest_2x_backward(dy: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = dy.dim();
    let mut dx = Array4::<f32>::zeros((n, c, h2 / 2, w2 / 2));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    dx[[i, ch, y / 2, x / 2]] += dy[[i, ch, y, x]];
                }
            }
        }
    }
    dx
}

/// Mean over the spatial axes: `(N, C, H, W)` to `(N, C)`.
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let mut out = Array2::<f32>::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            out[[i, ch]] = x.slice(s![i, ch, .., ..]).sum() / (h * w) as f32;
        }
    }
    out
}

pub fn global_avg_pool_backward(dy: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
    let (n, c) = dy.dim();
    let scale = 1.0 / (h * w) as f32;
    Array4::from_shape_fn((n, c, h, w), |(i, ch, _, _)| dy[[i, ch]] * scale)
}

/// Stacks feature maps along the channel axis.
pub fn concat_channels(parts: &[ArrayView4<f32>]) -> Array4<f32> {
    ndarray::concatenate(Axis(1), parts).expect("compatible concat shapes")
}

/// Splits a channel-axis gradient back into per-part gradients.
pub fn split_channels(dy: &Array4<f32>, sizes: &[usize]) -> Vec<Array4<f32>> {
    assert_eq!(sizes.iter().sum::<usize>(), dy.dim().1, "split sizes");
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &sz in sizes {
        out.push(dy.slice(s![.., start..start + sz, .., ..]).to_owned());
        start += sz;
    }
    out
}

/// 2x area downsampling by averaging 2x2 blocks. Used for half-resolution
/// supervision targets, so it has no backward.
pub fn area_downsample_2x(x: &Array2<f32>) -> Array2<f32> {
    let (h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "area downsample needs even dims");
    Array2::from_shape_fn((h / 2, w / 2), |(y, xx)| {
        (x[[y * 2, xx * 2]]
            + x[[y * 2, xx * 2 + 1]]
            + x[[y * 2 + 1, xx * 2]]
            + x[[y * 2 + 1, xx * 2 + 1]])
            / 4.0
    })
}
