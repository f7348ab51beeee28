use crate::error::{Error, Result};
use crate::nn::Gradients;
use std::collections::BTreeMap;

/// Parameter groups with independently configurable learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Weights,
    Scores,
    /// Rank-dimension scores on factored layers (the Σ analogue).
    Sigma,
    Heads,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("head.") {
            ParamGroup::Heads
        } else if name.ends_with(".rank_scores") {
            ParamGroup::Sigma
        } else if name.ends_with(".scores") {
            ParamGroup::Scores
        } else {
            ParamGroup::Weights
        }
    }
}

/// Learning-rate assignment per parameter group.
#[derive(Debug, Clone, Default)]
pub struct LrMap {
    rates: BTreeMap<ParamGroup, f64>,
}

impl LrMap {
    pub fn new(weights: f64, scores: f64, sigma: f64, heads: f64) -> Self {
        let mut rates = BTreeMap::new();
        rates.insert(ParamGroup::Weights, weights);
        rates.insert(ParamGroup::Scores, scores);
        rates.insert(ParamGroup::Sigma, sigma);
        rates.insert(ParamGroup::Heads, heads);
        LrMap { rates }
    }

    pub fn empty() -> Self {
        LrMap::default()
    }

    pub fn with(mut self, group: ParamGroup, lr: f64) -> Self {
        self.rates.insert(group, lr);
        self
    }

    pub fn get(&self, group: ParamGroup) -> Result<f64> {
        self.rates
            .get(&group)
            .copied()
            .ok_or_else(|| Error::Config(format!("lr_map missing group {group:?}")))
    }
}

struct Slot {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with per-group learning rates and per-tensor step counts
/// (tensors that only sometimes receive gradients, like task heads,
/// keep their own bias-correction clock).
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    slots: BTreeMap<String, Slot>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, slots: BTreeMap::new() }
    }

    /// Apply one update for every parameter that has a gradient.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut [f64])>,
        grads: &Gradients,
        lr_map: &LrMap,
    ) -> Result<()> {
        for (name, values) in params {
            let Some(grad) = grads.get(&name) else { continue };
            assert_eq!(grad.len(), values.len(), "gradient/parameter length mismatch for {name}");
            let lr = lr_map.get(ParamGroup::of(&name))?;
            let slot = self.slots.entry(name).or_insert_with(|| Slot {
                t: 0,
                m: vec![0.0; values.len()],
                v: vec![0.0; values.len()],
            });
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            for i in 0..values.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * grad[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                values[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Rewrite a slot's moment vectors, used when a factored tensor is
    /// compacted and its shape changes.
    pub fn remap_slot<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        if let Some(slot) = self.slots.get_mut(name) {
            slot.m = f(&slot.m);
            slot.v = f(&slot.v);
        }
    }
}
