//! The five training-loss terms: perceptual distance, two latent-cosine
//! consistency terms, and two reconstruction MSEs, plus their weighted
//! combination under the ablation switches.
//!
//! Term functions are generic over the float type so the f64 gradient
//! checks exercise exactly the code the f32 trainer runs.

use ndarray::{Array, Array1, Dimension};
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::train::AblationConfig;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op} expected {expected} feature maps, got {got}")]
    TapCountMismatch { op: &'static str, expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Scalar weights for the five terms, in the order they enter the total.
/// `perceptual_layers` weights the individual taps inside the perceptual
/// term before the outer weight applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub perceptual: f64,
    pub depth_consist: f64,
    pub derain_consist: f64,
    pub derain_mse: f64,
    pub depth_mse: f64,
    pub perceptual_layers: Vec<f32>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 1.0,
            depth_consist: 0.5,
            derain_consist: 0.5,
            derain_mse: 10.0,
            depth_mse: 2.0,
            perceptual_layers: vec![1.0, 1.0, 1.0],
        }
    }
}

/// Raw (unweighted) values of the five terms for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermValues {
    pub perceptual: f64,
    pub depth_consist: f64,
    pub derain_consist: f64,
    pub derain_mse: f64,
    pub depth_mse: f64,
}

/// Per-term values after ablation gating, plus the weighted total.
/// Disabled terms appear as exactly 0.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub perceptual: f64,
    pub depth_consist: f64,
    pub derain_consist: f64,
    pub derain_mse: f64,
    pub depth_mse: f64,
    pub total: f64,
}

fn ensure_finite<F: Float, D: Dimension>(
    op: &'static str,
    arrays: &[&Array<F, D>],
) -> Result<(), LossError> {
    for a in arrays {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(LossError::NonFinite(op));
        }
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse_loss<F: Float, D: Dimension>(
    pred: &Array<F, D>,
    target: &Array<F, D>,
) -> Result<F, LossError> {
    Ok(mse_loss_grad(pred, target)?.0)
}

/// MSE and its gradient with respect to `pred`: `2 (pred - target) / n`.
pub fn mse_loss_grad<F: Float, D: Dimension>(
    pred: &Array<F, D>,
    target: &Array<F, D>,
) -> Result<(F, Array<F, D>), LossError> {
    if pred.shape() != target.shape() {
        return Err(LossError::ShapeMismatch {
            op: "mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    ensure_finite("mse_loss", &[pred, target])?;
    let n = F::from(pred.len()).unwrap();
    let two = F::from(2.0).unwrap();
    let mut sum = F::zero();
    let mut grad = pred.clone();
    for (g, t) in grad.iter_mut().zip(target.iter()) {
        let diff = *g - *t;
        sum = sum + diff * diff;
        *g = two * diff / n;
    }
    Ok((sum / n, grad))
}

/// Latent agreement as `1 - cos(a, b)`, so 0 means aligned and the term
/// pulls toward alignment when minimized. A zero-norm input has no defined
/// direction: the term reports its worst-case-adjacent value 1 with zero
/// gradient and logs a warning.
pub fn consistency_loss<F: Float + std::fmt::Debug>(
    a: &Array1<F>,
    b: &Array1<F>,
) -> Result<F, LossError> {
    Ok(consistency_loss_grad(a, b)?.0)
}

/// Consistency loss and its gradients with respect to both inputs.
pub fn consistency_loss_grad<F: Float + std::fmt::Debug>(
    a: &Array1<F>,
    b: &Array1<F>,
) -> Result<(F, Array1<F>, Array1<F>), LossError> {
    if a.len() != b.len() {
        return Err(LossError::ShapeMismatch {
            op: "consistency_loss",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    ensure_finite("consistency_loss", &[a, b])?;
    let dot = a.iter().zip(b.iter()).fold(F::zero(), |s, (&x, &y)| s + x * y);
    let na2 = a.iter().fold(F::zero(), |s, &x| s + x * x);
    let nb2 = b.iter().fold(F::zero(), |s, &x| s + x * x);
    if na2 == F::zero() || nb2 == F::zero() {
        log::warn!("consistency_loss: zero-norm latent, reporting loss 1 with zero gradient");
        return Ok((F::one(), Array1::zeros(a.len()), Array1::zeros(b.len())));
    }
    let na = na2.sqrt();
    let nb = nb2.sqrt();
    let cos = dot / (na * nb);
    let mut ga = Array1::zeros(a.len());
    let mut gb = Array1::zeros(b.len());
    for i in 0..a.len() {
        ga[i] = -(b[i] / (na * nb) - cos * a[i] / na2);
        gb[i] = -(a[i] / (na * nb) - cos * b[i] / nb2);
    }
    Ok((F::one() - cos, ga, gb))
}

/// Weighted sum over feature taps of the per-tap mean squared difference.
/// `target` carries the clean image's features and receives no gradient.
pub fn perceptual_loss<F: Float, D: Dimension>(
    target: &[Array<F, D>],
    pred: &[Array<F, D>],
    layer_weights: &[F],
) -> Result<F, LossError> {
    Ok(perceptual_loss_grad(target, pred, layer_weights)?.0)
}

/// Perceptual loss and its gradient with respect to each predicted tap.
pub fn perceptual_loss_grad<F: Float, D: Dimension>(
    target: &[Array<F, D>],
    pred: &[Array<F, D>],
    layer_weights: &[F],
) -> Result<(F, Vec<Array<F, D>>), LossError> {
    if target.len() != pred.len() {
        return Err(LossError::TapCountMismatch {
            op: "perceptual_loss",
            expected: target.len(),
            got: pred.len(),
        });
    }
    if layer_weights.len() != pred.len() {
        return Err(LossError::TapCountMismatch {
            op: "perceptual_loss weights",
            expected: pred.len(),
            got: layer_weights.len(),
        });
    }
    let mut total = F::zero();
    let mut grads = Vec::with_capacity(pred.len());
    for ((t, p), &lw) in target.iter().zip(pred.iter()).zip(layer_weights.iter()) {
        let (tap_loss, tap_grad) = mse_loss_grad(p, t)?;
        total = total + lw * tap_loss;
        grads.push(tap_grad.mapv(|g| g * lw));
    }
    Ok((total, grads))
}

/// Applies the ablation gates and combines the surviving terms under the
/// five weights. The total is exactly the weighted sum of the gated values.
pub fn composite_loss(
    terms: &TermValues,
    weights: &LossWeights,
    ablation: &AblationConfig,
) -> Result<LossBreakdown, LossError> {
    let gated = LossBreakdown {
        perceptual: terms.perceptual,
        depth_consist: if ablation.depth_latent_on { terms.depth_consist } else { 0.0 },
        derain_consist: if ablation.derain_latent_on { terms.derain_consist } else { 0.0 },
        derain_mse: terms.derain_mse,
        depth_mse: if ablation.gt_depth_on { terms.depth_mse } else { 0.0 },
        total: 0.0,
    };
    for (name, value) in [
        ("perceptual", gated.perceptual),
        ("depth_consist", gated.depth_consist),
        ("derain_consist", gated.derain_consist),
        ("derain_mse", gated.derain_mse),
        ("depth_mse", gated.depth_mse),
    ] {
        if !value.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    let total = weights.perceptual * gated.perceptual
        + weights.depth_consist * gated.depth_consist
        + weights.derain_consist * gated.derain_consist
        + weights.derain_mse * gated.derain_mse
        + weights.depth_mse * gated.depth_mse;
    Ok(LossBreakdown { total, ..gated })
}
