//! A small pre-norm-free transformer-style encoder with task heads,
//! hand-written reverse-mode gradients, and an Adam optimizer with
//! per-group learning rates. This is the substrate being pruned.

mod adam;
mod encoder;
mod layer;

pub use adam::{Adam, LrMap, ParamGroup};
pub use encoder::{Batch, Encoder, EncoderConfig, EncoderLayer, Labels, LayerNorm, TaskHead, WeightStructure};
pub use layer::{FactoredLayer, LayerStorage, PrunableLayer};

use std::collections::BTreeMap;

/// Named gradient accumulator; keys mirror parameter names in the model.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, values: &[f64]) {
        let slot = self.map.entry(name).or_insert_with(|| vec![0.0; values.len()]);
        assert_eq!(slot.len(), values.len(), "gradient shape changed mid-accumulation");
        for (s, v) in slot.iter_mut().zip(values) {
            *s += v;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.map.values_mut() {
            for x in v.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn remove(&mut self, name: &str) -> Option<Vec<f64>> {
        self.map.remove(name)
    }

    pub fn insert(&mut self, name: String, values: Vec<f64>) {
        self.map.insert(name, values);
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.map.values().flat_map(|v| v.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }
}
