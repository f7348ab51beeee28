//! Experiment orchestration: the training loop with iterative pruning,
//! run reports, checkpoints, and the mixture-vs-multitask budget
//! machinery (mixture enumeration, Pareto frontier, budget comparison).

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::linalg::{read_pkmx, write_pkmx, Matrix, DTYPE_F64};
use crate::multitask::{
    self, sample_task, MaskMode, MultitaskState, TaskRegistry, TaskSpec, TaskKind,
};
use crate::nn::{Adam, Batch, Encoder, EncoderConfig, Labels, LayerStorage, LrMap, WeightStructure};
use crate::pruning::{self, PruneConfig, Selector, Structure};
use crate::tasks::{accuracy, generate_task, macro_average, pearson, PlantedTeacher, SyntheticDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub density: f64,
    pub train_loss: BTreeMap<String, f64>,
    pub dev_metric: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AbortInfo {
    pub step: usize,
    pub epoch: usize,
    pub detail: String,
    pub last_good_epoch: Option<usize>,
}

/// Everything a finished (or aborted) run reports. Wall-clock time is
/// carried for CSV summaries but kept out of the JSON so identical
/// config+seed runs serialize to identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub run_id: String,
    pub config_fingerprint: String,
    pub seed: u64,
    pub selector: Selector,
    pub structure: Structure,
    pub scope: crate::pruning::Scope,
    pub mask_mode: MaskMode,
    pub final_density: f64,
    pub epochs: Vec<EpochRecord>,
    pub final_param_fraction: f64,
    pub final_metrics: BTreeMap<String, f64>,
    pub macro_metric: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<AbortInfo>,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

fn fnv64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

pub fn config_fingerprint(config: &ExperimentConfig) -> String {
    // output_dir does not affect what the experiment computes, so two
    // runs differing only in destination fingerprint identically
    let mut canonical = config.clone();
    canonical.output_dir = std::path::PathBuf::new();
    let json = serde_json::to_string(&canonical).expect("config serializes");
    format!("{:016x}", fnv64(&json))
}

fn metric_for(
    model: &Encoder,
    spec: &TaskSpec,
    dev: &SyntheticDataset,
    batch_size: usize,
) -> Result<f64> {
    let mut class_preds = Vec::new();
    let mut reg_preds = Vec::new();
    for chunk in dev.inputs.chunks(batch_size) {
        let cache = model.encoder_forward(chunk)?;
        let logits = model.logits_for(&spec.id, cache.outputs())?;
        for i in 0..logits.rows() {
            match spec.kind {
                TaskKind::Classification => {
                    let row = logits.row(i);
                    let am = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                        .expect("non-empty logits")
                        .0;
                    class_preds.push(am);
                }
                TaskKind::Regression => reg_preds.push(logits.get(i, 0)),
            }
        }
    }
    match (&dev.labels, spec.kind) {
        (Labels::Class(l), TaskKind::Classification) => accuracy(&class_preds, l),
        (Labels::Reg(t), TaskKind::Regression) => pearson(&reg_preds, t),
        _ => Err(Error::Config(format!("label kind mismatch for task {}", spec.id))),
    }
}

/// Dev metric for one task at kept fraction `k`, applying the task's own
/// mask first in Separate/Hybrid movement modes.
fn eval_task(
    model: &mut Encoder,
    state: &MultitaskState,
    prune: &PruneConfig,
    spec: &TaskSpec,
    dev: &SyntheticDataset,
    k: f64,
    batch_size: usize,
) -> Result<f64> {
    if prune.selector == Selector::Movement && state.mode != MaskMode::Shared {
        multitask::set_task_masks(model, state, &spec.id, k, prune.scope)?;
    }
    metric_for(model, spec, dev, batch_size)
}

fn draw_batch<R: Rng>(train: &SyntheticDataset, batch_size: usize, rng: &mut R) -> Batch {
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..train.len())).collect();
    let inputs = idx.iter().map(|&i| train.inputs[i].clone()).collect();
    let labels = match &train.labels {
        Labels::Class(l) => Labels::Class(idx.iter().map(|&i| l[i]).collect()),
        Labels::Reg(l) => Labels::Reg(idx.iter().map(|&i| l[i]).collect()),
    };
    Batch { inputs, labels }
}

/// Write the union of per-task masks into the model so the stored live
/// parameters are what final accounting counts.
fn set_union_masks(model: &mut Encoder, state: &MultitaskState, k: f64, prune: &PruneConfig) -> Result<()> {
    if state.mode == MaskMode::Shared {
        return Ok(());
    }
    let task_ids: Vec<String> = state.task_scores.keys().cloned().collect();
    let mut union: Vec<Vec<f64>> = Vec::new();
    for tid in &task_ids {
        multitask::set_task_masks(model, state, tid, k, prune.scope)?;
        let masks: Vec<Vec<f64>> = model
            .prunable_layers()
            .iter()
            .map(|l| match &l.storage {
                LayerStorage::Dense { mask, .. } => mask.data().to_vec(),
                LayerStorage::Factored { mask, .. } => mask.clone(),
            })
            .collect();
        if union.is_empty() {
            union = masks;
        } else {
            for (u, m) in union.iter_mut().zip(masks) {
                for (a, b) in u.iter_mut().zip(m) {
                    *a = a.max(b);
                }
            }
        }
    }
    for (layer, mask) in model.prunable_layers_mut().into_iter().zip(union) {
        match &mut layer.storage {
            LayerStorage::Dense { mask: m, .. } => m.data_mut().copy_from_slice(&mask),
            LayerStorage::Factored { mask: m, .. } => m.copy_from_slice(&mask),
        }
    }
    Ok(())
}

fn param_fraction(model: &Encoder) -> f64 {
    let mut live = 0usize;
    let mut dense = 0usize;
    for layer in model.prunable_layers() {
        live += pruning::effective_param_count(layer);
        dense += pruning::dense_param_count(layer);
    }
    live as f64 / dense as f64
}

/// Train one configuration end to end with iterative pruning.
///
/// A non-finite loss aborts the run: the report carries the last good
/// epoch and an `aborted` diagnostic instead of final metrics.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let registry = TaskRegistry::new(config.tasks.clone())?;
    let teacher = PlantedTeacher::new(
        config.model.model_dim,
        config.model.seq_len,
        registry.specs(),
        config.training.teacher_seed,
        config.training.noise_level,
    )?;
    let mut data: BTreeMap<String, (SyntheticDataset, SyntheticDataset)> = BTreeMap::new();
    for spec in registry.specs() {
        data.insert(spec.id.clone(), generate_task(spec, &teacher, spec.train_size, spec.dev_size)?);
    }

    let mut prune = config.prune.clone();
    prune.total_epochs = config.epochs();

    let structure = match prune.structure {
        Structure::ElementWise => WeightStructure::Dense,
        Structure::Rank => WeightStructure::Factored,
    };
    let with_scores = prune.selector == Selector::Movement;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.training.seed);
    init_rng.set_stream(0);
    let model_cfg = EncoderConfig { seed: config.training.seed, ..config.model.clone() };
    let mut model = Encoder::new(model_cfg, structure, with_scores, &mut init_rng)?;
    for spec in registry.specs() {
        model.add_head(&spec.id, spec.num_outputs(), &mut init_rng);
    }

    let mut state = MultitaskState::new(config.mask_mode, &model, &registry);
    let mut adam = Adam::new();
    let lr = LrMap::new(
        config.training.lr_weights,
        config.training.lr_scores,
        prune.sigma_lr,
        config.training.lr_heads,
    );

    let total_train: usize = registry.specs().iter().map(|s| s.train_size).sum();
    let steps_per_epoch = total_train.div_ceil(config.training.batch_size).max(1);
    let schedule = prune.schedule(steps_per_epoch);
    let total_steps = schedule.total_steps;
    let cooldown_start = total_steps - schedule.cooldown_steps;

    let mut task_rng = ChaCha8Rng::seed_from_u64(config.training.seed);
    task_rng.set_stream(1);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.training.seed);
    batch_rng.set_stream(2);

    let fingerprint = config_fingerprint(config);
    let mut report = RunReport {
        run_id: format!("{fingerprint}-s{}", config.training.seed),
        config_fingerprint: fingerprint,
        seed: config.training.seed,
        selector: prune.selector,
        structure: prune.structure,
        scope: prune.scope,
        mask_mode: config.mask_mode,
        final_density: prune.final_density,
        epochs: Vec::new(),
        final_param_fraction: 0.0,
        final_metrics: BTreeMap::new(),
        macro_metric: 0.0,
        aborted: None,
        wall_clock_s: 0.0,
    };

    let mut loss_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut compacted = false;
    for t in 0..total_steps {
        let k = schedule.density(t);
        if prune.selector == Selector::Magnitude || state.mode == MaskMode::Shared {
            let mut layers = model.prunable_layers_mut();
            pruning::apply_prune_step(&mut layers, prune.selector, prune.scope, k)?;
        }
        if prune.structure == Structure::Rank && !compacted && t >= cooldown_start {
            let mut layers = model.prunable_layers_mut();
            pruning::compact_factored(&mut layers, Some(&mut adam))?;
            compacted = true;
        }
        let task_id = sample_task(&registry, &mut task_rng)?.id.clone();
        let batch = draw_batch(&data[&task_id].0, config.training.batch_size, &mut batch_rng);
        let loss =
            multitask::multitask_step(&mut model, &mut adam, &mut state, &batch, &task_id, &prune, k, &lr)?;
        if !loss.is_finite() {
            let epoch = t / steps_per_epoch;
            report.aborted = Some(AbortInfo {
                step: t,
                epoch,
                detail: format!("non-finite loss {loss} on task {task_id}"),
                last_good_epoch: report.epochs.last().map(|e| e.epoch),
            });
            report.wall_clock_s = start.elapsed().as_secs_f64();
            return Ok(report);
        }
        let e = loss_sum.entry(task_id).or_insert((0.0, 0));
        e.0 += loss;
        e.1 += 1;

        if (t + 1) % steps_per_epoch == 0 {
            let epoch = t / steps_per_epoch;
            let mut dev_metric = BTreeMap::new();
            for spec in registry.specs() {
                let m = eval_task(
                    &mut model,
                    &state,
                    &prune,
                    spec,
                    &data[&spec.id].1,
                    k,
                    config.training.batch_size,
                )?;
                dev_metric.insert(spec.id.clone(), m);
            }
            let train_loss = loss_sum
                .iter()
                .map(|(id, (s, n))| (id.clone(), if *n > 0 { s / *n as f64 } else { f64::NAN }))
                .collect();
            report.epochs.push(EpochRecord { epoch, density: k, train_loss, dev_metric });
            loss_sum.clear();
        }
    }

    // Final accounting under the end-of-schedule masks.
    let kf = prune.final_density;
    if prune.selector == Selector::Magnitude || state.mode == MaskMode::Shared {
        let mut layers = model.prunable_layers_mut();
        pruning::apply_prune_step(&mut layers, prune.selector, prune.scope, kf)?;
    } else {
        set_union_masks(&mut model, &state, kf, &prune)?;
    }
    report.final_param_fraction = param_fraction(&model);
    let mut metrics = Vec::new();
    for spec in registry.specs() {
        let m = eval_task(
            &mut model,
            &state,
            &prune,
            spec,
            &data[&spec.id].1,
            kf,
            config.training.batch_size,
        )?;
        report.final_metrics.insert(spec.id.clone(), m);
        metrics.push(m);
    }
    report.macro_metric = macro_average(&metrics)?;
    report.wall_clock_s = start.elapsed().as_secs_f64();

    save_checkpoint(&model, &config.output_dir.join(&report.run_id))?;
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: String,
    shape: (usize, usize),
    files: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
}

/// Persist prunable weights (plus masks or factors) as PKMX files with a
/// JSON manifest; enough to recount live parameters offline.
pub fn save_checkpoint(model: &Encoder, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let write = |dir: &Path, file: &str, m: &Matrix| -> Result<()> {
        let tmp = dir.join(format!("{file}.tmp"));
        let mut f = std::fs::File::create(&tmp)?;
        write_pkmx(&mut f, m, DTYPE_F64)?;
        std::fs::rename(tmp, dir.join(file))?;
        Ok(())
    };
    for layer in model.prunable_layers() {
        match &layer.storage {
            LayerStorage::Dense { weight, mask, .. } => {
                let wf = format!("{}.weight.pkmx", layer.name);
                let mf = format!("{}.mask.pkmx", layer.name);
                write(dir, &wf, weight)?;
                write(dir, &mf, mask)?;
                tensors.push(TensorEntry {
                    name: layer.name.clone(),
                    kind: "dense".into(),
                    shape: (weight.rows(), weight.cols()),
                    files: vec![wf, mf],
                });
            }
            LayerStorage::Factored { factors, mask, .. } => {
                let uf = format!("{}.us.pkmx", layer.name);
                let vf = format!("{}.v.pkmx", layer.name);
                write(dir, &uf, &factors.us)?;
                write(dir, &vf, &factors.v)?;
                let live = mask.iter().filter(|&&v| v == 1.0).count();
                tensors.push(TensorEntry {
                    name: layer.name.clone(),
                    kind: "factored".into(),
                    shape: factors.original_shape,
                    files: vec![uf, vf, format!("live={live}")],
                });
            }
        }
    }
    let manifest = Manifest { tensors };
    let tmp = dir.join("manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::rename(tmp, dir.join("manifest.json"))?;
    Ok(())
}

/// Independent recount of the live-parameter fraction from checkpoint
/// bytes alone.
pub fn checkpoint_param_fraction(dir: &Path) -> Result<f64> {
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.tensors.is_empty() {
        return Err(Error::EmptyInput("checkpoint_param_fraction"));
    }
    let mut live = 0usize;
    let mut dense = 0usize;
    for t in &manifest.tensors {
        let (m, n) = t.shape;
        dense += m * n;
        match t.kind.as_str() {
            "dense" => {
                let mut f = std::fs::File::open(dir.join(&t.files[1]))?;
                let mask = read_pkmx(&mut f)?;
                live += mask.data().iter().filter(|&&v| v == 1.0).count();
            }
            "factored" => {
                let live_ranks = t
                    .files
                    .iter()
                    .find_map(|f| f.strip_prefix("live="))
                    .ok_or_else(|| Error::Config("manifest missing live rank count".into()))?
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("bad live count: {e}")))?;
                live += (m * n).min(live_ranks * (m + n));
            }
            other => return Err(Error::Config(format!("unknown tensor kind {other}"))),
        }
    }
    Ok(live as f64 / dense as f64)
}

/// One member run of a mixture: a single-task model sized by its live
/// fraction and scored on its own task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MemberRun {
    pub run_id: String,
    pub task_id: String,
    pub size: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Provenance {
    Multitask { run_id: String },
    Mixture { run_ids: Vec<String> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BudgetPoint {
    pub size: f64,
    pub metric: f64,
    pub provenance: Provenance,
}

/// Cartesian product over one run per task. Mixture size is the sum of
/// member sizes; mixture metric the unweighted mean of own-task metrics.
pub fn enumerate_mixtures(per_task: &[Vec<MemberRun>]) -> Result<Vec<BudgetPoint>> {
    if per_task.is_empty() || per_task.iter().any(|r| r.is_empty()) {
        return Err(Error::EmptyInput("enumerate_mixtures"));
    }
    let mut points = vec![(0.0f64, 0.0f64, Vec::<String>::new())];
    for runs in per_task {
        let mut next = Vec::with_capacity(points.len() * runs.len());
        for (size, metric_sum, ids) in &points {
            for r in runs {
                let mut ids = ids.clone();
                ids.push(r.run_id.clone());
                next.push((size + r.size, metric_sum + r.metric, ids));
            }
        }
        points = next;
    }
    let n = per_task.len() as f64;
    Ok(points
        .into_iter()
        .map(|(size, metric_sum, run_ids)| BudgetPoint {
            size,
            metric: metric_sum / n,
            provenance: Provenance::Mixture { run_ids },
        })
        .collect())
}

/// Non-dominated points, sorted by size ascending, (size, metric) ties
/// deduplicated.
pub fn pareto_frontier(points: &[BudgetPoint]) -> Result<Vec<BudgetPoint>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("pareto_frontier"));
    }
    let mut sorted: Vec<&BudgetPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.size
            .partial_cmp(&b.size)
            .expect("finite sizes")
            .then(b.metric.partial_cmp(&a.metric).expect("finite metrics"))
    });
    let mut out: Vec<BudgetPoint> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for p in sorted {
        if p.metric > best {
            out.push(p.clone());
            best = p.metric;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompareRow {
    pub budget: f64,
    pub multitask_metric: f64,
    pub mixture_size: Option<f64>,
    pub mixture_metric: Option<f64>,
    pub delta: Option<f64>,
    pub flagged: bool,
}

/// For each multitask point, the best frontier mixture fitting its
/// budget. No mixture under budget flags the row instead of erroring.
pub fn budget_compare(
    multitask: &[BudgetPoint],
    frontier: &[BudgetPoint],
) -> Result<Vec<CompareRow>> {
    if multitask.is_empty() || frontier.is_empty() {
        return Err(Error::EmptyInput("budget_compare"));
    }
    let mut rows = Vec::with_capacity(multitask.len());
    for mt in multitask {
        let best = frontier
            .iter()
            .filter(|p| p.size <= mt.size)
            .max_by(|a, b| a.metric.partial_cmp(&b.metric).expect("finite metrics"));
        match best {
            Some(p) => rows.push(CompareRow {
                budget: mt.size,
                multitask_metric: mt.metric,
                mixture_size: Some(p.size),
                mixture_metric: Some(p.metric),
                delta: Some(mt.metric - p.metric),
                flagged: false,
            }),
            None => rows.push(CompareRow {
                budget: mt.size,
                multitask_metric: mt.metric,
                mixture_size: None,
                mixture_metric: None,
                delta: None,
                flagged: true,
            }),
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_config;
    use crate::pruning::Scope;
    use proptest::prelude::*;

    fn point(size: f64, metric: f64) -> BudgetPoint {
        BudgetPoint { size, metric, provenance: Provenance::Multitask { run_id: "r".into() } }
    }

    #[test]
    fn single_point_is_its_own_frontier() {
        let p = vec![point(0.3, 70.0)];
        assert_eq!(pareto_frontier(&p).unwrap(), p);
    }

    #[test]
    fn frontier_hand_case() {
        let pts = vec![point(0.1, 70.0), point(0.2, 75.0), point(0.15, 72.0), point(0.25, 74.0)];
        let f = pareto_frontier(&pts).unwrap();
        let sm: Vec<(f64, f64)> = f.iter().map(|p| (p.size, p.metric)).collect();
        assert_eq!(sm, vec![(0.1, 70.0), (0.15, 72.0), (0.2, 75.0)]);
    }

    #[test]
    fn identical_points_collapse_to_one() {
        let pts = vec![point(0.2, 50.0); 5];
        assert_eq!(pareto_frontier(&pts).unwrap().len(), 1);
    }

    fn brute_force_frontier(points: &[BudgetPoint]) -> Vec<(f64, f64)> {
        let mut keep: Vec<(f64, f64)> = Vec::new();
        for p in points {
            let dominated = points.iter().any(|q| {
                q.size <= p.size
                    && q.metric >= p.metric
                    && (q.size < p.size || q.metric > p.metric)
            });
            if !dominated && !keep.contains(&(p.size, p.metric)) {
                keep.push((p.size, p.metric));
            }
        }
        keep.sort_by(|a, b| a.partial_cmp(b).unwrap());
        keep
    }

    proptest! {
        #[test]
        fn frontier_matches_brute_force(
            pts in prop::collection::vec((0u32..50, 0u32..50), 1..60)
        ) {
            let points: Vec<BudgetPoint> =
                pts.iter().map(|&(s, m)| point(s as f64 / 10.0, m as f64)).collect();
            let fast: Vec<(f64, f64)> =
                pareto_frontier(&points).unwrap().iter().map(|p| (p.size, p.metric)).collect();
            prop_assert_eq!(fast, brute_force_frontier(&points));
        }
    }

    #[test]
    fn mixture_counts_are_cartesian() {
        let run = |id: &str, task: &str, size: f64, metric: f64| MemberRun {
            run_id: id.into(),
            task_id: task.into(),
            size,
            metric,
        };
        let per_task = vec![
            vec![run("a1", "a", 0.1, 0.8), run("a2", "a", 0.2, 0.9)],
            vec![run("b1", "b", 0.1, 0.7), run("b2", "b", 0.2, 0.75)],
            vec![run("c1", "c", 0.1, 0.6), run("c2", "c", 0.2, 0.65)],
        ];
        let mixtures = enumerate_mixtures(&per_task).unwrap();
        assert_eq!(mixtures.len(), 8);
        // one run per task → exactly one mixture
        let single: Vec<Vec<MemberRun>> =
            per_task.iter().map(|r| vec![r[0].clone()]).collect();
        let one = enumerate_mixtures(&single).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0].size - 0.3).abs() < 1e-12);
        let expected = (0.8 + 0.7 + 0.6) / 3.0;
        assert!((one[0].metric - expected).abs() < 1e-12);
        assert!(enumerate_mixtures(&[vec![], vec![run("x", "a", 0.1, 0.5)]]).is_err());
    }

    #[test]
    fn mixture_metric_matches_recomputation() {
        let run = |id: &str, task: &str, size: f64, metric: f64| MemberRun {
            run_id: id.into(),
            task_id: task.into(),
            size,
            metric,
        };
        let per_task = vec![
            vec![run("a1", "a", 0.11, 0.81), run("a2", "a", 0.23, 0.88)],
            vec![run("b1", "b", 0.07, 0.66)],
        ];
        for mix in enumerate_mixtures(&per_task).unwrap() {
            let Provenance::Mixture { run_ids } = &mix.provenance else { unreachable!() };
            let members: Vec<&MemberRun> = run_ids
                .iter()
                .map(|id| per_task.iter().flatten().find(|r| &r.run_id == id).unwrap())
                .collect();
            let size: f64 = members.iter().map(|r| r.size).sum();
            let metric: f64 =
                members.iter().map(|r| r.metric).sum::<f64>() / members.len() as f64;
            assert!((mix.size - size).abs() < 1e-12);
            assert!((mix.metric - metric).abs() < 1e-12);
        }
    }

    #[test]
    fn budget_lookup_and_flagging() {
        let frontier = vec![point(0.3, 70.0)];
        let rows = budget_compare(&[point(0.3, 72.0)], &frontier).unwrap();
        assert_eq!(rows[0].delta, Some(2.0));
        assert!(!rows[0].flagged);
        let rows = budget_compare(&[point(0.2, 72.0)], &frontier).unwrap();
        assert!(rows[0].flagged);
        assert_eq!(rows[0].delta, None);
    }

    #[test]
    fn budget_compare_is_monotone_in_budget() {
        let frontier =
            pareto_frontier(&[point(0.1, 60.0), point(0.2, 70.0), point(0.4, 80.0)]).unwrap();
        let budgets: Vec<BudgetPoint> =
            (1..=6).map(|i| point(i as f64 / 10.0, 0.0)).collect();
        let rows = budget_compare(&budgets, &frontier).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for r in rows {
            let m = r.mixture_metric.unwrap();
            assert!(m >= prev);
            prev = m;
        }
    }

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = default_config();
        cfg.model.num_layers = 1;
        cfg.model.model_dim = 8;
        cfg.model.ffn_dim = 12;
        cfg.model.num_heads = 2;
        cfg.model.seq_len = 4;
        cfg.prune.total_epochs = 4;
        cfg.prune.warmup_epochs = 1;
        cfg.prune.cooldown_epochs = 1;
        cfg.tasks.truncate(2);
        for t in cfg.tasks.iter_mut() {
            t.train_size = 32;
            t.dev_size = 16;
        }
        cfg.training.batch_size = 8;
        cfg.output_dir = std::env::temp_dir().join("prunekit-exp-tests");
        cfg
    }

    #[test]
    fn no_prune_limit_reports_full_density() {
        let mut cfg = tiny_config();
        cfg.prune.final_density = 1.0;
        let report = run_experiment(&cfg).unwrap();
        assert!(report.aborted.is_none());
        assert_eq!(report.final_param_fraction, 1.0);
    }

    #[test]
    fn identical_config_and_seed_give_identical_report_bytes() {
        let cfg = tiny_config();
        let a = serde_json::to_vec(&run_experiment(&cfg).unwrap()).unwrap();
        let b = serde_json::to_vec(&run_experiment(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recorded_densities_match_schedule() {
        let cfg = tiny_config();
        let report = run_experiment(&cfg).unwrap();
        let total_train: usize = cfg.tasks.iter().map(|t| t.train_size).sum();
        let steps = total_train.div_ceil(cfg.training.batch_size).max(1);
        let sched = cfg.prune.schedule(steps);
        for rec in &report.epochs {
            let t_last = (rec.epoch + 1) * steps - 1;
            assert_eq!(rec.density, sched.density(t_last));
        }
    }

    #[test]
    fn final_fraction_hits_target_density() {
        for structure in [Structure::ElementWise, Structure::Rank] {
            let mut cfg = tiny_config();
            cfg.prune.structure = structure;
            cfg.prune.scope = Scope::Global;
            cfg.prune.final_density = 0.2;
            let report = run_experiment(&cfg).unwrap();
            // one rounding unit per pool of tolerance
            let tol = match structure {
                Structure::ElementWise => 1e-2,
                Structure::Rank => 0.05,
            };
            assert!(
                (report.final_param_fraction - 0.2).abs() <= tol,
                "{structure:?}: fraction {}",
                report.final_param_fraction
            );
        }
    }

    #[test]
    fn checkpoint_recount_matches_report() {
        let cfg = tiny_config();
        let report = run_experiment(&cfg).unwrap();
        let ck = cfg.output_dir.join(&report.run_id);
        let recount = checkpoint_param_fraction(&ck).unwrap();
        assert!((recount - report.final_param_fraction).abs() < 1e-12);
    }
}
