use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamKey, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{NDArray, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok =
            self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

struct Slot<T> {
    m: NDArray<T>,
    v: NDArray<T>,
    t: i32,
}

/// Adam with moment slots created on a parameter's first update.
pub struct OptimizerState<T: Scalar = f32> {
    pub config: AdamConfig,
    slots: BTreeMap<ParamKey, Slot<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, slots: BTreeMap::new() }
    }

    /// Applies and clears the gradient of every trainable parameter in
    /// `store` that has one.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one, eps) = (T::one(), T::from_f64(c.eps));
        let keys: Vec<_> = store.iter().map(|(id, _)| (id, store.key(id))).collect();
        for (id, key) in keys {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let Some(g) = p.grad.take() else { continue };
            let slot = self.slots.entry(key).or_insert_with(|| Slot {
                m: NDArray::zeros(p.value.shape()),
                v: NDArray::zeros(p.value.shape()),
                t: 0,
            });
            slot.t += 1;
            let step = T::from_f64(c.lr * (1.0 - c.beta2.powi(slot.t)).sqrt() / (1.0 - c.beta1.powi(slot.t)));
            let eps = eps * T::from_f64((1.0 - c.beta2.powi(slot.t)).sqrt());
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w - step * *m / (v.sqrt() + eps);
            }
        }
    }

    /// Drops every moment slot.
    pub fn clear(&mut self) {
        self.slots.clear();
    }

    /// Drops the slots of parameters in `store` that are no longer trainable.
    pub fn retain_trainable(&mut self, store: &ParamStore<T>) {
        let tag = store.tag();
        self.slots.retain(|k, _| k.store != tag || store.get(k.id).trainable);
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Bytes of both moment buffers over all slots.
    pub fn bytes(&self) -> u64 {
        self.slots.values().map(|s| s.m.bytes() + s.v.bytes()).sum()
    }
}
