//! Minimal neural-network substrate with explicit backward passes.
//!
//! Layers own their parameters and gradients. `forward` returns the output
//! plus a cache; `backward` consumes that cache and the output gradient,
//! accumulates parameter gradients unless the layer is frozen, and returns
//! the input gradient on request. Frozen layers still propagate input
//! gradients, which is how supervision flows through fixed supervisors into
//! the trainable networks.
//!
//! The [`Visit`] trait walks every parameter in construction order under
//! hierarchical dot-joined names; the optimizer, checkpointing, hashing, and
//! freeze-policy tests are all built on that single walk.

pub mod adam;
pub mod conv;
pub mod linear;
pub mod ops;

pub use adam::{Adam, AdamSlot};
pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;

use sha2::{Digest, Sha256};

/// A named view of one parameter tensor during a [`Visit`] walk.
pub struct ParamRef<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a mut [f32],
    pub grad: &'a mut [f32],
    pub trainable: bool,
}

/// Walks parameters in a fixed order, handing each to `f` with its full
/// dot-joined name under `prefix`.
pub trait Visit {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>));
}

pub fn join_name(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

pub fn zero_grads(model: &mut dyn Visit) {
    model.visit_params("", &mut |p| p.grad.fill(0.0));
}

pub fn param_count(model: &mut dyn Visit) -> usize {
    let mut n = 0;
    model.visit_params("", &mut |p| n += p.data.len());
    n
}

pub fn trainable_param_count(model: &mut dyn Visit) -> usize {
    let mut n = 0;
    model.visit_params("", &mut |p| {
        if p.trainable {
            n += p.data.len();
        }
    });
    n
}

/// SHA-256 over every parameter's name, dims, and little-endian values, in
/// walk order. Bitwise-identical models hash identically.
pub fn param_hash(model: &mut dyn Visit) -> [u8; 32] {
    let mut hasher = Sha256::new();
    model.visit_params("", &mut |p| {
        hasher.update(p.name.as_bytes());
        for d in &p.dims {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in p.data.iter() {
            hasher.update(v.to_le_bytes());
        }
    });
    hasher.finalize().into()
}

/// A full value snapshot of every parameter, for before/after comparisons.
pub fn snapshot(model: &mut dyn Visit) -> Vec<(String, Vec<f32>, bool)> {
    let mut out = Vec::new();
    model.visit_params("", &mut |p| {
        out.push((p.name.clone(), p.data.to_vec(), p.trainable));
    });
    out
}

/// Sum of squared gradient entries per parameter, keyed by name.
pub fn grad_norms(model: &mut dyn Visit) -> Vec<(String, f32)> {
    let mut out = Vec::new();
    model.visit_params("", &mut |p| {
        let sq: f32 = p.grad.iter().map(|g| g * g).sum();
        out.push((p.name.clone(), sq));
    });
    out
}
