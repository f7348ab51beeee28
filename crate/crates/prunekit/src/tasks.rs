//! Seeded synthetic tasks labeled by a planted teacher with a shared
//! latent feature map, so shared-subnetwork claims are testable against a
//! known ground truth. Also holds the evaluation metrics.

use crate::error::{Error, Result};
use crate::linalg::{read_pkmx, write_pkmx, Matrix, DTYPE_F64};
use crate::multitask::{TaskKind, TaskSpec};
use crate::nn::Labels;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
}

/// One generated split: per-example (seq_len × model_dim) inputs plus
/// teacher labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub task_id: String,
    pub split: Split,
    pub inputs: Vec<Matrix>,
    pub labels: Labels,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Ground-truth labeler. Inputs are mean-pooled over the sequence, pushed
/// through a shared and a per-task private tanh feature map, blended by
/// the task's shared_fraction, then read out by a per-task head.
#[derive(Debug, Clone)]
pub struct PlantedTeacher {
    pub model_dim: usize,
    pub seq_len: usize,
    pub shared: Matrix,
    pub privates: BTreeMap<String, Matrix>,
    pub heads: BTreeMap<String, Matrix>,
    // Calibrated so argmax labels come out class-balanced; a raw random
    // head skews class frequencies by O(1/sqrt(d)), which swamps the
    // multinomial noise at 10k examples.
    pub head_biases: BTreeMap<String, Vec<f64>>,
    pub noise_level: f64,
    pub seed: u64,
}

impl PlantedTeacher {
    pub fn new(
        model_dim: usize,
        seq_len: usize,
        specs: &[TaskSpec],
        seed: u64,
        noise_level: f64,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::EmptyInput("PlantedTeacher"));
        }
        if noise_level < 0.0 {
            return Err(Error::Config("noise_level must be >= 0".into()));
        }
        // Mean-pooled inputs have per-coordinate variance 1/seq_len; this
        // scale puts the pre-tanh features at unit variance.
        let feat_scale = (seq_len as f64 / model_dim as f64).sqrt();
        let head_scale = 1.0 / (model_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = Matrix::randn(model_dim, model_dim, feat_scale, &mut rng);
        let mut privates = BTreeMap::new();
        let mut heads = BTreeMap::new();
        for spec in specs {
            privates.insert(
                spec.id.clone(),
                Matrix::randn(model_dim, model_dim, feat_scale, &mut rng),
            );
            heads.insert(
                spec.id.clone(),
                Matrix::randn(model_dim, spec.num_outputs(), head_scale, &mut rng),
            );
        }
        let mut teacher = PlantedTeacher {
            model_dim,
            seq_len,
            shared,
            privates,
            heads,
            head_biases: BTreeMap::new(),
            noise_level,
            seed,
        };
        teacher.calibrate_biases(specs)?;
        Ok(teacher)
    }

    /// Fit per-class biases on a fixed calibration sample so each class's
    /// argmax frequency lands near 1/C.
    fn calibrate_biases(&mut self, specs: &[TaskSpec]) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX); // kept clear of the per-task data streams
        let n_cal = 4096;
        // Mean-pooled inputs have iid N(0, 1/seq_len) coordinates, so the
        // calibration sample draws pooled vectors directly.
        let inv_sqrt_l = 1.0 / (self.seq_len as f64).sqrt();
        let pooled: Vec<Vec<f64>> = (0..n_cal)
            .map(|_| {
                (0..self.model_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * inv_sqrt_l
                    })
                    .collect()
            })
            .collect();
        for spec in specs {
            if spec.kind != TaskKind::Classification {
                self.head_biases.insert(spec.id.clone(), vec![0.0; spec.num_outputs()]);
                continue;
            }
            let c = spec.num_classes;
            let logits: Vec<Vec<f64>> =
                pooled.iter().map(|p| self.logits_from_pooled(spec, p)).collect::<Result<_>>()?;
            let mut bias = vec![0.0; c];
            let target = n_cal as f64 / c as f64;
            for _ in 0..300 {
                let mut counts = vec![0.0; c];
                for l in &logits {
                    let am = (0..c)
                        .max_by(|&a, &b| {
                            (l[a] + bias[a]).partial_cmp(&(l[b] + bias[b])).expect("finite")
                        })
                        .expect("non-empty");
                    counts[am] += 1.0;
                }
                for j in 0..c {
                    bias[j] -= 0.05 * (counts[j] - target) / target;
                }
            }
            self.head_biases.insert(spec.id.clone(), bias);
        }
        Ok(())
    }

    fn logits_from_pooled(&self, spec: &TaskSpec, pooled: &[f64]) -> Result<Vec<f64>> {
        let private = self
            .privates
            .get(&spec.id)
            .ok_or_else(|| Error::UnknownTask(spec.id.clone()))?;
        let head = &self.heads[&spec.id];
        let d = self.model_dim;
        let feat = |w: &Matrix| -> Vec<f64> {
            (0..d).map(|j| (0..d).map(|i| pooled[i] * w.get(i, j)).sum::<f64>().tanh()).collect()
        };
        let hs = feat(&self.shared);
        let hp = feat(private);
        let frac = spec.shared_fraction;
        let f: Vec<f64> =
            hs.iter().zip(&hp).map(|(s, p)| frac * s + (1.0 - frac) * p).collect();
        let c = head.cols();
        let bias = self.head_biases.get(&spec.id);
        Ok((0..c)
            .map(|j| {
                (0..d).map(|i| f[i] * head.get(i, j)).sum::<f64>()
                    + bias.map_or(0.0, |b| b[j])
            })
            .collect())
    }

    /// Noiseless teacher outputs for one example.
    pub fn raw_outputs(&self, spec: &TaskSpec, input: &Matrix) -> Result<Vec<f64>> {
        if input.rows() != self.seq_len || input.cols() != self.model_dim {
            return Err(Error::shape("teacher", "input shape mismatch"));
        }
        let d = self.model_dim;
        let mut pooled = vec![0.0; d];
        for r in 0..input.rows() {
            for (j, p) in pooled.iter_mut().enumerate() {
                *p += input.get(r, j);
            }
        }
        for p in pooled.iter_mut() {
            *p /= input.rows() as f64;
        }
        self.logits_from_pooled(spec, &pooled)
    }
}

/// Generate the train/dev pair for one task. Train and dev draw from
/// disjoint seed streams of the task's own seed, so regeneration in any
/// order is byte-identical.
pub fn generate_task(
    spec: &TaskSpec,
    teacher: &PlantedTeacher,
    n_train: usize,
    n_dev: usize,
) -> Result<(SyntheticDataset, SyntheticDataset)> {
    if n_train == 0 || n_dev == 0 {
        return Err(Error::EmptyInput("generate_task"));
    }
    let train = generate_split(spec, teacher, n_train, Split::Train)?;
    let dev = generate_split(spec, teacher, n_dev, Split::Dev)?;
    Ok((train, dev))
}

fn generate_split(
    spec: &TaskSpec,
    teacher: &PlantedTeacher,
    n: usize,
    split: Split,
) -> Result<SyntheticDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match split {
        Split::Train => 0,
        Split::Dev => 1,
    });
    let mut inputs = Vec::with_capacity(n);
    let mut class_labels = Vec::new();
    let mut reg_labels = Vec::new();
    for _ in 0..n {
        let x = Matrix::randn(teacher.seq_len, teacher.model_dim, 1.0, &mut rng);
        let mut out = teacher.raw_outputs(spec, &x)?;
        for o in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *o += teacher.noise_level * z;
        }
        match spec.kind {
            TaskKind::Classification => {
                let label = out
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .expect("non-empty logits");
                class_labels.push(label);
            }
            TaskKind::Regression => reg_labels.push(out[0]),
        }
        inputs.push(x);
    }
    let labels = match spec.kind {
        TaskKind::Classification => Labels::Class(class_labels),
        TaskKind::Regression => Labels::Reg(reg_labels),
    };
    Ok(SyntheticDataset { task_id: spec.id.clone(), split, inputs, labels })
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    if preds.len() != labels.len() {
        return Err(Error::shape("accuracy", "length mismatch"));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Unweighted mean over per-task metrics.
pub fn macro_average(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::EmptyInput("macro_average"));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

/// Pearson correlation; the dev metric for regression tasks.
pub fn pearson(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("pearson"));
    }
    if preds.len() != targets.len() {
        return Err(Error::shape("pearson", "length mismatch"));
    }
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let mt = targets.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vt = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp).powi(2);
        vt += (t - mt).powi(2);
    }
    if vp == 0.0 || vt == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vp.sqrt() * vt.sqrt()))
}

/// Stable cache key over everything that determines a dataset's bytes.
pub fn cache_key(spec: &TaskSpec, teacher: &PlantedTeacher) -> String {
    let fingerprint = format!(
        "{}|{}|{}|{}|{}",
        serde_json::to_string(spec).expect("spec serializes"),
        teacher.seed,
        teacher.noise_level,
        teacher.model_dim,
        teacher.seq_len,
    );
    // FNV-1a, enough for a cache filename.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in fingerprint.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Serialize, Deserialize)]
struct LabelFile {
    task_id: String,
    split: Split,
    seq_len: usize,
    labels: Labels,
}

/// Cache one split as a PKMX matrix (examples stacked row-wise) plus a
/// JSON label file.
pub fn save_dataset(ds: &SyntheticDataset, dir: &Path, key: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("save_dataset"));
    }
    let tag = match ds.split {
        Split::Train => "train",
        Split::Dev => "dev",
    };
    let seq_len = ds.inputs[0].rows();
    let cols = ds.inputs[0].cols();
    let mut stacked = Matrix::zeros(ds.len() * seq_len, cols);
    for (i, x) in ds.inputs.iter().enumerate() {
        for r in 0..seq_len {
            stacked.row_mut(i * seq_len + r).copy_from_slice(x.row(r));
        }
    }
    let mut f = std::fs::File::create(dir.join(format!("{key}.{tag}.pkmx")))?;
    write_pkmx(&mut f, &stacked, DTYPE_F64)?;
    let meta = LabelFile {
        task_id: ds.task_id.clone(),
        split: ds.split,
        seq_len,
        labels: ds.labels.clone(),
    };
    let json = serde_json::to_vec_pretty(&meta)?;
    std::fs::write(dir.join(format!("{key}.{tag}.json")), json)?;
    Ok(())
}

pub fn load_dataset(dir: &Path, key: &str, split: Split) -> Result<SyntheticDataset> {
    let tag = match split {
        Split::Train => "train",
        Split::Dev => "dev",
    };
    let mut f = std::fs::File::open(dir.join(format!("{key}.{tag}.pkmx")))?;
    let stacked = read_pkmx(&mut f)?;
    let meta: LabelFile =
        serde_json::from_slice(&std::fs::read(dir.join(format!("{key}.{tag}.json")))?)?;
    if stacked.rows() % meta.seq_len != 0 {
        return Err(Error::shape("load_dataset", "row count not divisible by seq_len"));
    }
    let n = stacked.rows() / meta.seq_len;
    let mut inputs = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = Matrix::zeros(meta.seq_len, stacked.cols());
        for r in 0..meta.seq_len {
            x.row_mut(r).copy_from_slice(stacked.row(i * meta.seq_len + r));
        }
        inputs.push(x);
    }
    Ok(SyntheticDataset { task_id: meta.task_id, split, inputs, labels: meta.labels })
}
