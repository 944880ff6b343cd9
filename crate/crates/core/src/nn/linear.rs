//! Fully connected layer over `(batch, features)` activations.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2};
use rand::Rng;

use super::conv::he_weights;
use super::{join_name, ParamRef, Visit};

/// Affine map `y = x W^T + b`, weight `(out, in)`.
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub grad_weight: Array2<f32>,
    pub grad_bias: Array1<f32>,
    pub trainable: bool,
}

pub struct LinearCache {
    input: Array2<f32>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        let weight =
            Array2::from_shape_vec((out_dim, in_dim), he_weights(rng, out_dim * in_dim, in_dim))
                .expect("weight shape");
        Self {
            grad_weight: Array2::zeros(weight.raw_dim()),
            weight,
            bias: Array1::zeros(out_dim),
            grad_bias: Array1::zeros(out_dim),
            trainable: true,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim().0
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LinearCache) {
        assert_eq!(x.dim().1, self.in_dim(), "linear input width");
        let mut y = Array2::<f32>::zeros((x.dim().0, self.out_dim()));
        general_mat_mul(1.0, &x.view(), &self.weight.t(), 0.0, &mut y.view_mut());
        y += &self.bias;
        (y, LinearCache { input: x.clone() })
    }

    pub fn backward(
        &mut self,
        cache: &LinearCache,
        dy: &Array2<f32>,
        compute_dx: bool,
    ) -> Option<Array2<f32>> {
        assert_eq!(dy.dim(), (cache.input.dim().0, self.out_dim()), "linear dy shape");
        if self.trainable {
            general_mat_mul(
                1.0,
                &dy.t(),
                &cache.input.view(),
                1.0,
                &mut self.grad_weight.view_mut(),
            );
            self.grad_bias += &dy.sum_axis(ndarray::Axis(0));
        }
        compute_dx.then(|| {
            let mut dx = Array2::<f32>::zeros(cache.input.raw_dim());
            general_mat_mul(1.0, &dy.view(), &self.weight.view(), 0.0, &mut dx.view_mut());
            dx
        })
    }
}

impl Visit for Linear {
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

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut fc = Linear::new(&mut rng, 2, 2);
        fc.weight = array![[1.0, 2.0], [3.0, 4.0]];
        fc.bias = array![0.5, -0.5];
        let x = array![[1.0, 1.0], [2.0, 0.0]];
        let (y, _) = fc.forward(&x);
        assert_eq!(y, array![[3.5, 6.5], [2.5, 5.5]]);
    }

    #[test]
    fn backward_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut fc = Linear::new(&mut rng, 2, 1);
        fc.weight = array![[2.0, -1.0]];
        fc.bias = array![0.0];
        let x = array![[3.0, 4.0]];
        let (_, cache) = fc.forward(&x);
        let dy = array![[1.0]];
        let dx = fc.backward(&cache, &dy, true).unwrap();
        assert_eq!(dx, array![[2.0, -1.0]]);
        assert_eq!(fc.grad_weight, array![[3.0, 4.0]]);
        assert_eq!(fc.grad_bias, array![1.0]);
    }
}
