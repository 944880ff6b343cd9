//! Convolution layers via im2col plus GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{join_name, ParamRef, Visit};

pub(crate) fn he_weights<R: Rng>(rng: &mut R, count: usize, fan_in: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
    (0..count).map(|_| normal.sample(rng)).collect()
}

/// 2D convolution: weight `(out_c, in_c, k, k)`, square kernel, symmetric
/// zero padding.
pub struct Conv2d {
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub grad_weight: Array4<f32>,
    pub grad_bias: Array1<f32>,
    pub stride: usize,
    pub padding: usize,
    pub trainable: bool,
}

pub struct Conv2dCache {
    input: Array4<f32>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight =
            Array4::from_shape_vec((out_c, in_c, kernel, kernel), he_weights(rng, out_c * fan_in, fan_in))
                .expect("weight shape");
        Self {
            grad_weight: Array4::zeros(weight.raw_dim()),
            weight,
            bias: Array1::zeros(out_c),
            grad_bias: Array1::zeros(out_c),
            stride,
            padding,
            trainable: true,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, Conv2dCache) {
        let (n, ic, h, w) = x.dim();
        assert_eq!(ic, self.in_channels(), "conv input channels");
        let (oc, k) = (self.out_channels(), self.kernel());
        let (oh, ow) = self.out_size(h, w);
        let w2 = self.weight.to_shape((oc, ic * k * k)).expect("contiguous weight");
        let mut out = Array4::<f32>::zeros((n, oc, oh, ow));
        for i in 0..n {
            let padded = pad_sample(&x.slice(s![i, .., .., ..]), self.padding);
            let cols = im2col(&padded, k, self.stride, oh, ow);
            let mut out2 = out
                .slice_mut(s![i, .., .., ..])
                .into_shape_with_order((oc, oh * ow))
                .expect("contiguous out");
            general_mat_mul(1.0, &w2.view(), &cols.view(), 0.0, &mut out2);
            for (c, mut row) in out2.outer_iter_mut().enumerate() {
                row += self.bias[c];
            }
        }
        (out, Conv2dCache { input: x.clone() })
    }

    /// Accumulates weight/bias gradients (when trainable) and returns the
    /// input gradient when `compute_dx` is set.
    pub fn backward(
        &mut self,
        cache: &Conv2dCache,
        dy: &Array4<f32>,
        compute_dx: bool,
    ) -> Option<Array4<f32>> {
        let x = &cache.input;
        let (n, ic, h, w) = x.dim();
        let (oc, k) = (self.out_channels(), self.kernel());
        let (oh, ow) = self.out_size(h, w);
        assert_eq!(dy.dim(), (n, oc, oh, ow), "conv dy shape");
        let w2 = self.weight.to_shape((oc, ic * k * k)).expect("contiguous weight");
        let mut dx = compute_dx.then(|| Array4::<f32>::zeros((n, ic, h, w)));
        let mut gw2 = self
            .grad_weight
            .view_mut()
            .into_shape_with_order((oc, ic * k * k))
            .expect("contiguous grad");
        for i in 0..n {
            let dy2 = dy
                .slice(s![i, .., .., ..])
                .into_shape_with_order((oc, oh * ow))
                .expect("contiguous dy");
            if self.trainable {
                let padded = pad_sample(&x.slice(s![i, .., .., ..]), self.padding);
                let cols = im2col(&padded, k, self.stride, oh, ow);
                general_mat_mul(1.0, &dy2, &cols.t(), 1.0, &mut gw2);
                for (c, row) in dy2.outer_iter().enumerate() {
                    self.grad_bias[c] += row.sum();
                }
            }
            if let Some(dx) = dx.as_mut() {
                let mut dcols = Array2::<f32>::zeros((ic * k * k, oh * ow));
                general_mat_mul(1.0, &w2.t(), &dy2, 0.0, &mut dcols.view_mut());
                let mut dpadded =
                    Array3::<f32>::zeros((ic, h + 2 * self.padding, w + 2 * self.padding));
                col2im_add(&dcols, &mut dpadded, k, self.stride, oh, ow);
                let p = self.padding;
                dx.slice_mut(s![i, .., .., ..])
                    .assign(&dpadded.slice(s![.., p..p + h, p..p + w]));
            }
        }
        dx
    }
}

impl Visit for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        f(ParamRef {
            name: join_name(prefix, "weight"),
            dims: self.weight.shape().to_vec(),
            data: self.weight.as_slice_mut().expect("standard layout"),
            grad: self.grad_weight.as_slice_mut().expect("standard layout"),
            trainable: self.trainable,
        });
        f(ParamRef {
            name: join_name(prefix, "bias"),
            dims: self.bias.shape().to_vec(),
            data: self.bias.as_slice_mut().expect("standard layout"),
            grad: self.grad_bias.as_slice_mut().expect("standard layout"),
            trainable: self.trainable,
        });
    }
}

fn pad_sample(x: &ArrayView3<f32>, padding: usize) -> Array3<f32> {
    if padding == 0 {
        return x.to_owned();
    }
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h + 2 * padding, w + 2 * padding));
    out.slice_mut(s![.., padding..padding + h, padding..padding + w]).assign(x);
    out
}

/// Unfolds a padded `(C, H, W)` sample into `(C*k*k, oh*ow)` patch columns.
fn im2col(padded: &Array3<f32>, k: usize, stride: usize, oh: usize, ow: usize) -> Array2<f32> {
    let (c, _, _) = padded.dim();
    let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let mut col_row = cols.row_mut(row);
                let mut idx = 0;
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    for ox in 0..ow {
                        col_row[idx] = padded[[ch, iy, ox * stride + kx]];
                        idx += 1;
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds patch-column gradients back onto the padded sample grid.
fn col2im_add(
    dcols: &Array2<f32>,
    dpadded: &mut Array3<f32>,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let (c, _, _) = dpadded.dim();
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let col_row = dcols.row(row);
                let mut idx = 0;
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    for ox in 0..ow {
                        dpadded[[ch, iy, ox * stride + kx]] += col_row[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Transposed convolution restricted to kernel = stride (non-overlapping
/// tiles), the exact 2x upsampling case. Weight is `(in_c, out_c, k, k)`.
pub struct ConvTranspose2d {
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub grad_weight: Array4<f32>,
    pub grad_bias: Array1<f32>,
    pub trainable: bool,
}

pub struct ConvTranspose2dCache {
    input: Array4<f32>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(rng: &mut R, in_c: usize, out_c: usize, kernel: usize) -> Self {
        let weight = Array4::from_shape_vec(
            (in_c, out_c, kernel, kernel),
            he_weights(rng, in_c * out_c * kernel * kernel, in_c),
        )
        .expect("weight shape");
        Self {
            grad_weight: Array4::zeros(weight.raw_dim()),
            weight,
            bias: Array1::zeros(out_c),
            grad_bias: Array1::zeros(out_c),
            trainable: true,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, ConvTranspose2dCache) {
        let (n, ic, h, w) = x.dim();
        assert_eq!(ic, self.weight.dim().0, "tconv input channels");
        let (oc, k) = (self.weight.dim().1, self.kernel());
        let w2 = self.weight.to_shape((ic, oc * k * k)).expect("contiguous weight");
        let mut out = Array4::<f32>::zeros((n, oc, h * k, w * k));
        for i in 0..n {
            let x2 = x
                .slice(s![i, .., .., ..])
                .into_shape_with_order((ic, h * w))
                .expect("contiguous x");
            let mut cols = Array2::<f32>::zeros((oc * k * k, h * w));
            general_mat_mul(1.0, &w2.t(), &x2, 0.0, &mut cols.view_mut());
            let mut out_i = out.slice_mut(s![i, .., .., ..]);
            for c in 0..oc {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (c * k + ky) * k + kx;
                        let col_row = cols.row(row);
                        let mut idx = 0;
                        for y in 0..h {
                            for x_ in 0..w {
                                out_i[[c, y * k + ky, x_ * k + kx]] = col_row[idx] + self.bias[c];
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
        (out, ConvTranspose2dCache { input: x.clone() })
    }

    pub fn backward(
        &mut self,
        cache: &ConvTranspose2dCache,
        dy: &Array4<f32>,
        compute_dx: bool,
    ) -> Option<Array4<f32>> {
        let x = &cache.input;
        let (n, ic, h, w) = x.dim();
        let (oc, k) = (self.weight.dim().1, self.kernel());
        assert_eq!(dy.dim(), (n, oc, h * k, w * k), "tconv dy shape");
        let w2 = self.weight.to_shape((ic, oc * k * k)).expect("contiguous weight");
        let mut gw2 = self
            .grad_weight
            .view_mut()
            .into_shape_with_order((ic, oc * k * k))
            .expect("contiguous grad");
        let mut dx = compute_dx.then(|| Array4::<f32>::zeros((n, ic, h, w)));
        for i in 0..n {
            let dy_i = dy.slice(s![i, .., .., ..]);
            let mut dcols = Array2::<f32>::zeros((oc * k * k, h * w));
            for c in 0..oc {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (c * k + ky) * k + kx;
                        let mut col_row = dcols.row_mut(row);
                        let mut idx = 0;
                        for y in 0..h {
                            for x_ in 0..w {
                                col_row[idx] = dy_i[[c, y * k + ky, x_ * k + kx]];
                                idx += 1;
                            }
                        }
                    }
                }
            }
            if self.trainable {
                let x2 = x
                    .slice(s![i, .., .., ..])
                    .into_shape_with_order((ic, h * w))
                    .expect("contiguous x");
                general_mat_mul(1.0, &x2, &dcols.t(), 1.0, &mut gw2);
                for c in 0..oc {
                    self.grad_bias[c] += dy_i.slice(s![c, .., ..]).sum();
                }
            }
            if let Some(dx) = dx.as_mut() {
                let mut dx2 = dx
                    .slice_mut(s![i, .., .., ..])
                    .into_shape_with_order((ic, h * w))
                    .expect("contiguous dx");
                general_mat_mul(1.0, &w2.view(), &dcols.view(), 0.0, &mut dx2);
            }
        }
        dx
    }
}

impl Visit for ConvTranspose2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        f(ParamRef {
            name: join_name(prefix, "weight"),
            dims: self.weight.shape().to_vec(),
            data: self.weight.as_slice_mut().expect("standard layout"),
            grad: self.grad_weight.as_slice_mut().expect("standard layout"),
            trainable: self.trainable,
        });
        f(ParamRef {
            name: join_name(prefix, "bias"),
            dims: self.bias.shape().to_vec(),
            data: self.bias.as_slice_mut().expect("standard layout"),
            grad: self.grad_bias.as_slice_mut().expect("standard layout"),
            trainable: self.trainable,
        });
    }
}
