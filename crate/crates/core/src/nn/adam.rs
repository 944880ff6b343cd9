//! Adam optimizer over a [`Visit`]-walkable model.

use std::collections::BTreeMap;

use super::Visit;

/// First/second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam with optional L2 regularization. Slots are keyed by parameter name
/// in a sorted map so serialization order is deterministic. Only parameters
/// marked trainable are updated or given state.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Additive L2 coefficient; zero under the default decay-as-schedule
    /// reading (the trainer shrinks `lr` instead).
    pub l2: f32,
    pub t: u64,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, l2: 0.0, t: 0, slots: BTreeMap::new() }
    }

    /// One update over every trainable parameter from its accumulated grads.
    pub fn step(&mut self, model: &mut dyn Visit) {
        self.t += 1;
        let (lr, b1, b2, eps, l2) = (self.lr, self.beta1, self.beta2, self.eps, self.l2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let slots = &mut self.slots;
        model.visit_params("", &mut |p| {
            if !p.trainable {
                return;
            }
            let slot = slots.entry(p.name.clone()).or_insert_with(|| AdamSlot {
                m: vec![0.0; p.data.len()],
                v: vec![0.0; p.data.len()],
            });
            assert_eq!(slot.m.len(), p.data.len(), "optimizer slot shape for {}", p.name);
            for i in 0..p.data.len() {
                let g = p.grad[i] + l2 * p.data[i];
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }

    pub fn slots(&self) -> impl Iterator<Item = (&String, &AdamSlot)> {
        self.slots.iter()
    }

    pub fn insert_slot(&mut self, name: String, slot: AdamSlot) {
        self.slots.insert(name, slot);
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }
}
