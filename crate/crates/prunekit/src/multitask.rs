//! Multitask extension: task registry, uniform task sampling, the three
//! mask-sharing modes, and the per-step gradient routing that keeps task
//! heads isolated.

use crate::error::{Error, Result};
use crate::nn::{Adam, Batch, Encoder, LayerStorage, LrMap};
use crate::pruning::{self, PruneConfig, Scope, Selector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// One synthetic task: what it predicts and how its data is planted.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub train_size: usize,
    #[serde(default = "default_dev")]
    pub dev_size: usize,
    pub seed: u64,
    pub shared_fraction: f64,
}

fn default_classes() -> usize {
    3
}

fn default_dev() -> usize {
    1024
}

impl TaskSpec {
    pub fn num_outputs(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.num_classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.dev_size == 0 {
            return Err(Error::Config(format!("task {}: empty split", self.id)));
        }
        if self.kind == TaskKind::Classification && self.num_classes < 2 {
            return Err(Error::Config(format!("task {}: needs >= 2 classes", self.id)));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::Config(format!("task {}: shared_fraction out of [0,1]", self.id)));
        }
        Ok(())
    }
}

/// Ordered collection of tasks with unique ids.
#[derive(Debug, Clone, Default)]
pub struct TaskRegistry {
    specs: Vec<TaskSpec>,
}

impl TaskRegistry {
    pub fn new(specs: Vec<TaskSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::EmptyInput("TaskRegistry"));
        }
        for (i, s) in specs.iter().enumerate() {
            s.validate()?;
            if specs[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::Config(format!("duplicate task id {}", s.id)));
            }
        }
        Ok(TaskRegistry { specs })
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.specs
    }

    pub fn get(&self, id: &str) -> Result<&TaskSpec> {
        self.specs.iter().find(|s| s.id == id).ok_or_else(|| Error::UnknownTask(id.into()))
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// Uniform draw over registered tasks.
pub fn sample_task<'a, R: Rng>(registry: &'a TaskRegistry, rng: &mut R) -> Result<&'a TaskSpec> {
    if registry.is_empty() {
        return Err(Error::EmptyInput("sample_task"));
    }
    let idx = rng.random_range(0..registry.len());
    Ok(&registry.specs[idx])
}

/// How movement scores are shared across tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Shared,
    Separate,
    Hybrid,
}

/// Mask for one task over a single score pool: Top_k of the shared
/// scores, of the task scores, or the entrywise max of the two masks.
pub fn task_mask(
    mode: MaskMode,
    shared_scores: &[f64],
    task_scores: Option<&[f64]>,
    k: f64,
) -> Result<Vec<f64>> {
    let top = |s: &[f64]| -> Result<Vec<f64>> {
        Ok(pruning::topk_mask(&[s], k, Scope::Local)?.remove(0))
    };
    match mode {
        MaskMode::Shared => top(shared_scores),
        MaskMode::Separate => {
            let st = task_scores.ok_or_else(|| Error::Config("separate mode needs task scores".into()))?;
            top(st)
        }
        MaskMode::Hybrid => {
            let st = task_scores.ok_or_else(|| Error::Config("hybrid mode needs task scores".into()))?;
            if st.len() != shared_scores.len() {
                return Err(Error::shape("task_mask", "score shape mismatch"));
            }
            let a = top(shared_scores)?;
            let b = top(st)?;
            Ok(a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect())
        }
    }
}

/// Per-task movement score tensors, keyed by prunable layer name.
#[derive(Debug, Clone, Default)]
pub struct TaskScores {
    pub tensors: BTreeMap<String, Vec<f64>>,
}

/// Training-time state for Separate/Hybrid masking.
#[derive(Debug, Clone)]
pub struct MultitaskState {
    pub mode: MaskMode,
    pub task_scores: BTreeMap<String, TaskScores>,
}

impl MultitaskState {
    /// Task scores start as copies of the model's shared scores.
    pub fn new(mode: MaskMode, model: &Encoder, registry: &TaskRegistry) -> Self {
        let mut task_scores = BTreeMap::new();
        if mode != MaskMode::Shared {
            for spec in registry.specs() {
                let mut ts = TaskScores::default();
                for layer in model.prunable_layers() {
                    let scores = match &layer.storage {
                        LayerStorage::Dense { scores: Some(s), .. } => s.data().to_vec(),
                        LayerStorage::Factored { scores: Some(s), .. } => s.clone(),
                        _ => continue,
                    };
                    ts.tensors.insert(layer.name.clone(), scores);
                }
                task_scores.insert(spec.id.clone(), ts);
            }
        }
        MultitaskState { mode, task_scores }
    }

    fn param_name(task_id: &str, layer_name: &str) -> String {
        format!("task.{task_id}.{layer_name}.scores")
    }
}

/// Write the sampled task's masks into the model for Separate/Hybrid
/// movement pruning (Shared masks are set by the regular prune step).
pub fn set_task_masks(
    model: &mut Encoder,
    state: &MultitaskState,
    task_id: &str,
    k: f64,
    scope: Scope,
) -> Result<()> {
    if state.mode == MaskMode::Shared {
        return Ok(());
    }
    let ts = state
        .task_scores
        .get(task_id)
        .ok_or_else(|| Error::UnknownTask(task_id.into()))?;
    // Collect shared and task score pools in layer order.
    let mut names = Vec::new();
    let mut shared_pools: Vec<Vec<f64>> = Vec::new();
    let mut task_pools: Vec<Vec<f64>> = Vec::new();
    for layer in model.prunable_layers() {
        let shared = match &layer.storage {
            LayerStorage::Dense { scores: Some(s), .. } => s.data().to_vec(),
            LayerStorage::Factored { scores: Some(s), .. } => s.clone(),
            _ => return Err(Error::Config(format!("layer {} has no scores", layer.name))),
        };
        let task = ts
            .tensors
            .get(&layer.name)
            .ok_or_else(|| Error::Config(format!("missing task scores for {}", layer.name)))?
            .clone();
        names.push(layer.name.clone());
        shared_pools.push(shared);
        task_pools.push(task);
    }
    let masks: Vec<Vec<f64>> = match state.mode {
        MaskMode::Shared => unreachable!(),
        MaskMode::Separate => {
            let pools: Vec<&[f64]> = task_pools.iter().map(|p| p.as_slice()).collect();
            pruning::topk_mask(&pools, k, scope)?
        }
        MaskMode::Hybrid => {
            let sp: Vec<&[f64]> = shared_pools.iter().map(|p| p.as_slice()).collect();
            let tp: Vec<&[f64]> = task_pools.iter().map(|p| p.as_slice()).collect();
            let ms = pruning::topk_mask(&sp, k, scope)?;
            let mt = pruning::topk_mask(&tp, k, scope)?;
            ms.into_iter()
                .zip(mt)
                .map(|(a, b)| a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect())
                .collect()
        }
    };
    for (layer, mask) in model.prunable_layers_mut().into_iter().zip(masks) {
        match &mut layer.storage {
            LayerStorage::Dense { mask: m, .. } => m.data_mut().copy_from_slice(&mask),
            LayerStorage::Factored { mask: m, .. } => m.copy_from_slice(&mask),
        }
    }
    Ok(())
}

/// One multitask training step on an already-sampled task: forward,
/// backward, score-gradient routing per mask mode, Adam update.
///
/// Exactly one head receives gradient; shared scores update except in
/// Separate mode; task scores update only for the sampled task.
#[allow(clippy::too_many_arguments)]
pub fn multitask_step(
    model: &mut Encoder,
    adam: &mut Adam,
    state: &mut MultitaskState,
    batch: &Batch,
    task_id: &str,
    config: &PruneConfig,
    k: f64,
    lr: &LrMap,
) -> Result<f64> {
    if config.selector == Selector::Movement {
        set_task_masks(model, state, task_id, k, config.scope)?;
    }
    let (loss, mut grads) = model.loss_and_backward(batch, task_id, config.update_masked_weights)?;

    // Route score gradients according to the mask mode. Under the
    // straight-through estimator the same dL/dM flows to every score set
    // whose Top_k contributed to the applied mask.
    if state.mode != MaskMode::Shared {
        let names: Vec<String> =
            grads.iter().map(|(n, _)| n.clone()).filter(|n| is_score_name(n)).collect();
        for name in names {
            let layer_name = score_layer_name(&name);
            let g = match state.mode {
                MaskMode::Separate => grads.remove(&name).expect("score grad present"),
                MaskMode::Hybrid => grads.get(&name).expect("score grad present").to_vec(),
                MaskMode::Shared => unreachable!(),
            };
            grads.insert(MultitaskState::param_name(task_id, &layer_name), g);
        }
    }

    let mut params = model.params_mut();
    if let Some(ts) = state.task_scores.get_mut(task_id) {
        for (layer_name, scores) in ts.tensors.iter_mut() {
            params.push((MultitaskState::param_name(task_id, layer_name), scores.as_mut_slice()));
        }
    }
    adam.step(params, &grads, lr)?;
    Ok(loss)
}

fn is_score_name(name: &str) -> bool {
    !name.starts_with("task.")
        && !name.starts_with("head.")
        && (name.ends_with(".scores") || name.ends_with(".rank_scores"))
}

fn score_layer_name(grad_name: &str) -> String {
    grad_name
        .strip_suffix(".rank_scores")
        .or_else(|| grad_name.strip_suffix(".scores"))
        .expect("score gradient name")
        .to_string()
}
