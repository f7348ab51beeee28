//! The eight pruning settings: {magnitude, movement} × {element-wise, rank}
//! × {global, local}, the cubic sparsity schedule, the straight-through
//! estimator, and parameter accounting.

mod schedule;

pub use schedule::{schedule_density, SparsitySchedule};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Adam, FactoredLayer, LayerStorage, PrunableLayer};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Magnitude,
    Movement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    ElementWise,
    Rank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    Local,
}

/// One point in the 2×2×2 settings grid plus schedule parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub selector: Selector,
    pub structure: Structure,
    pub scope: Scope,
    pub final_density: f64,
    #[serde(rename = "epochs")]
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub cooldown_epochs: usize,
    #[serde(default = "default_sigma_lr")]
    pub sigma_lr: f64,
    #[serde(default)]
    pub update_masked_weights: bool,
}

fn default_sigma_lr() -> f64 {
    5e-3
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_density > 0.0 && self.final_density <= 1.0) {
            return Err(Error::Config(format!(
                "final_density must be in (0, 1], got {}",
                self.final_density
            )));
        }
        if self.warmup_epochs + self.cooldown_epochs >= self.total_epochs {
            return Err(Error::Config(
                "warmup_epochs + cooldown_epochs must be < total_epochs".into(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> SparsitySchedule {
        SparsitySchedule {
            k_final: self.final_density,
            warmup_steps: self.warmup_epochs * steps_per_epoch,
            cooldown_steps: self.cooldown_epochs * steps_per_epoch,
            total_steps: self.total_epochs * steps_per_epoch,
        }
    }
}

/// Kept count per pool: never empties a pool entirely.
pub fn kept_count(k: f64, pool_size: usize) -> usize {
    ((k * pool_size as f64).round() as usize).clamp(1, pool_size)
}

/// Binary mask keeping the `keep` largest scores, ties broken by
/// smallest flat index.
fn topk_flat(scores: &[f64], keep: usize) -> Vec<f64> {
    let n = scores.len();
    let keep = keep.min(n);
    let mut idx: Vec<(f64, usize)> = scores.iter().copied().zip(0..n).collect();
    if keep < n {
        idx.select_nth_unstable_by(keep, |a, b| {
            b.0.partial_cmp(&a.0).expect("non-finite pruning score").then(a.1.cmp(&b.1))
        });
    }
    let mut mask = vec![0.0; n];
    for &(_, i) in &idx[..keep] {
        mask[i] = 1.0;
    }
    mask
}

/// Top-k masks over one or many score pools. Local treats each slice as
/// its own pool; Global concatenates them.
pub fn topk_mask(pools: &[&[f64]], k: f64, scope: Scope) -> Result<Vec<Vec<f64>>> {
    if pools.is_empty() || pools.iter().any(|p| p.is_empty()) {
        return Err(Error::EmptyInput("topk_mask"));
    }
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Config(format!("kept fraction must be in (0, 1], got {k}")));
    }
    match scope {
        Scope::Local => Ok(pools.iter().map(|p| topk_flat(p, kept_count(k, p.len()))).collect()),
        Scope::Global => {
            let flat: Vec<f64> = pools.iter().flat_map(|p| p.iter().copied()).collect();
            let mask = topk_flat(&flat, kept_count(k, flat.len()));
            let mut out = Vec::with_capacity(pools.len());
            let mut off = 0;
            for p in pools {
                out.push(mask[off..off + p.len()].to_vec());
                off += p.len();
            }
            Ok(out)
        }
    }
}

/// Selection scores for magnitude pruning: |W| entrywise, or per-rank
/// magnitudes on factored layers.
pub fn magnitude_scores(layer: &PrunableLayer) -> Vec<f64> {
    match &layer.storage {
        LayerStorage::Dense { weight, .. } => weight.data().iter().map(|v| v.abs()).collect(),
        LayerStorage::Factored { factors, .. } => factors.rank_magnitudes(),
    }
}

/// Current selection scores for the configured heuristic.
pub fn selection_scores(layer: &PrunableLayer, selector: Selector) -> Result<Vec<f64>> {
    match selector {
        Selector::Magnitude => Ok(magnitude_scores(layer)),
        Selector::Movement => match &layer.storage {
            LayerStorage::Dense { scores: Some(s), .. } => Ok(s.data().to_vec()),
            LayerStorage::Factored { scores: Some(s), .. } => Ok(s.clone()),
            _ => Err(Error::Config(format!("layer {} has no movement scores", layer.name))),
        },
    }
}

/// STE split of dL/d(W⊙M): weight gradient stays masked unless
/// `update_masked_weights`; score gradient treats Top_k as identity.
pub(crate) fn ste_backward_parts(
    grad_wrt_masked: &Matrix,
    weight: &Matrix,
    mask: &Matrix,
    update_masked_weights: bool,
) -> (Matrix, Matrix) {
    let grad_weight = if update_masked_weights {
        grad_wrt_masked.clone()
    } else {
        grad_wrt_masked.hadamard(mask)
    };
    let grad_scores = grad_wrt_masked.hadamard(weight);
    (grad_weight, grad_scores)
}

/// Straight-through estimator for an element-wise movement layer:
/// returns (grad_weight, grad_scores) from dL/d(W⊙M).
pub fn ste_backward(
    grad_wrt_masked: &Matrix,
    layer: &PrunableLayer,
    update_masked_weights: bool,
) -> Result<(Matrix, Matrix)> {
    match &layer.storage {
        LayerStorage::Dense { weight, mask, .. } => {
            if (grad_wrt_masked.rows(), grad_wrt_masked.cols()) != (weight.rows(), weight.cols()) {
                return Err(Error::shape("ste_backward", "gradient/weight shape mismatch"));
            }
            Ok(ste_backward_parts(grad_wrt_masked, weight, mask, update_masked_weights))
        }
        LayerStorage::Factored { .. } => {
            Err(Error::Config("ste_backward applies to element-wise layers".into()))
        }
    }
}

/// Drop rank dimensions not listed in `keep` (ascending order preserved).
pub fn rank_prune(factors: &FactoredLayer, keep: &[usize]) -> Result<FactoredLayer> {
    if keep.is_empty() {
        return Err(Error::Config("rank_prune: must keep at least one rank".into()));
    }
    if keep.iter().any(|&i| i >= factors.retained_rank) {
        return Err(Error::Config("rank_prune: index out of range".into()));
    }
    Ok(FactoredLayer {
        us: factors.us.select_columns(keep),
        v: factors.v.select_rows(keep),
        retained_rank: keep.len(),
        original_shape: factors.original_shape,
        original_rank: factors.original_rank,
    })
}

/// Parameters a layer contributes at its current mask. Rank layers never
/// cost more than the unfactorized m·n form.
pub fn effective_param_count(layer: &PrunableLayer) -> usize {
    match &layer.storage {
        LayerStorage::Dense { mask, .. } => mask.data().iter().filter(|&&v| v == 1.0).count(),
        LayerStorage::Factored { factors, mask, .. } => {
            let (m, n) = factors.original_shape;
            let live = mask.iter().filter(|&&v| v == 1.0).count();
            (m * n).min(live * (m + n))
        }
    }
}

/// Dense (unpruned) parameter count of a layer's weight.
pub fn dense_param_count(layer: &PrunableLayer) -> usize {
    layer.in_dim() * layer.out_dim()
}

/// Kept rank-dimension sets under a parameter budget of `k` times the
/// dense size. Local budgets each layer independently; Global pools rank
/// scores across layers and fills one shared budget greedily.
pub fn rank_keep_sets(
    shapes: &[(usize, usize)],
    scores: &[Vec<f64>],
    k: f64,
    scope: Scope,
) -> Result<Vec<Vec<usize>>> {
    if shapes.len() != scores.len() || shapes.is_empty() {
        return Err(Error::EmptyInput("rank_keep_sets"));
    }
    match scope {
        Scope::Local => {
            let mut out = Vec::with_capacity(shapes.len());
            for ((m, n), sc) in shapes.iter().zip(scores) {
                let budget = kept_count(k, m * n);
                let kprime = if budget >= m * n {
                    sc.len()
                } else {
                    (budget / (m + n)).clamp(1, sc.len())
                };
                let mask = topk_flat(sc, kprime);
                out.push((0..sc.len()).filter(|&i| mask[i] == 1.0).collect());
            }
            Ok(out)
        }
        Scope::Global => {
            let total_dense: usize = shapes.iter().map(|(m, n)| m * n).sum();
            let budget = kept_count(k, total_dense);
            let cost = |li: usize, r: usize| -> usize {
                let (m, n) = shapes[li];
                (m * n).min(r * (m + n))
            };
            // Every layer keeps its single best rank so no forward pass
            // degenerates; the rest fills greedily by pooled score.
            let mut kept: Vec<Vec<usize>> = Vec::with_capacity(shapes.len());
            let mut counts = vec![1usize; shapes.len()];
            let mut total = 0usize;
            let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
            for (li, sc) in scores.iter().enumerate() {
                let mut order: Vec<usize> = (0..sc.len()).collect();
                order.sort_by(|&a, &b| {
                    sc[b].partial_cmp(&sc[a]).expect("non-finite rank score").then(a.cmp(&b))
                });
                kept.push(vec![order[0]]);
                total += cost(li, 1);
                for &r in &order[1..] {
                    candidates.push((sc[r], li, r));
                }
            }
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
            });
            let mut rejected = vec![false; shapes.len()];
            for (_, li, r) in candidates {
                if rejected[li] {
                    continue;
                }
                let marginal = cost(li, counts[li] + 1) - cost(li, counts[li]);
                if total + marginal <= budget {
                    total += marginal;
                    counts[li] += 1;
                    kept[li].push(r);
                } else {
                    // Marginal cost per layer never shrinks on rejection,
                    // so later dims of this layer cannot fit either.
                    rejected[li] = true;
                }
            }
            for set in kept.iter_mut() {
                set.sort_unstable();
            }
            Ok(kept)
        }
    }
}

/// Recompute masks for the current density. Element-wise masks may regrow;
/// rank masks stay soft (zeroed dimensions keep receiving score gradients)
/// until `compact_factored` hard-prunes them.
pub fn apply_prune_step(
    layers: &mut [&mut PrunableLayer],
    selector: Selector,
    scope: Scope,
    k: f64,
) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::EmptyInput("apply_prune_step"));
    }
    let factored = matches!(layers[0].storage, LayerStorage::Factored { .. });
    let scores: Vec<Vec<f64>> =
        layers.iter().map(|l| selection_scores(l, selector)).collect::<Result<_>>()?;
    if factored {
        let shapes: Vec<(usize, usize)> = layers
            .iter()
            .map(|l| match &l.storage {
                LayerStorage::Factored { factors, .. } => factors.original_shape,
                _ => unreachable!("mixed layer structures in one prune pool"),
            })
            .collect();
        let keep_sets = rank_keep_sets(&shapes, &scores, k, scope)?;
        for (layer, keep) in layers.iter_mut().zip(&keep_sets) {
            if let LayerStorage::Factored { factors, mask, .. } = &mut layer.storage {
                mask.clear();
                mask.resize(factors.retained_rank, 0.0);
                for &i in keep {
                    mask[i] = 1.0;
                }
            }
        }
    } else {
        let pools: Vec<&[f64]> = scores.iter().map(|s| s.as_slice()).collect();
        let masks = topk_mask(&pools, k, scope)?;
        for (layer, new_mask) in layers.iter_mut().zip(masks) {
            if let LayerStorage::Dense { mask, .. } = &mut layer.storage {
                mask.data_mut().copy_from_slice(&new_mask);
            } else {
                unreachable!("mixed layer structures in one prune pool");
            }
        }
    }
    Ok(())
}

/// Hard-compact factored layers to their currently masked ranks, carrying
/// movement scores and Adam moments over to the compacted shapes.
pub fn compact_factored(
    layers: &mut [&mut PrunableLayer],
    mut adam: Option<&mut Adam>,
) -> Result<()> {
    for layer in layers.iter_mut() {
        let name = layer.name.clone();
        if let LayerStorage::Factored { factors, mask, scores } = &mut layer.storage {
            let keep: Vec<usize> =
                (0..factors.retained_rank).filter(|&i| mask[i] == 1.0).collect();
            if keep.len() == factors.retained_rank {
                continue;
            }
            let m = factors.us.rows();
            let k_old = factors.retained_rank;
            let n = factors.v.cols();
            *factors = rank_prune(factors, &keep)?;
            if let Some(s) = scores {
                *s = keep.iter().map(|&i| s[i]).collect();
            }
            mask.clear();
            mask.resize(keep.len(), 1.0);
            if let Some(adam) = adam.as_deref_mut() {
                let keep_us = keep.clone();
                adam.remap_slot(&format!("{name}.us"), move |old| {
                    let mut out = Vec::with_capacity(m * keep_us.len());
                    for i in 0..m {
                        for &j in &keep_us {
                            out.push(old[i * k_old + j]);
                        }
                    }
                    out
                });
                let keep_v = keep.clone();
                adam.remap_slot(&format!("{name}.v"), move |old| {
                    let mut out = Vec::with_capacity(n * keep_v.len());
                    for &i in &keep_v {
                        out.extend_from_slice(&old[i * n..(i + 1) * n]);
                    }
                    out
                });
                let keep_s = keep.clone();
                adam.remap_slot(&format!("{name}.rank_scores"), move |old| {
                    keep_s.iter().map(|&i| old[i]).collect()
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
