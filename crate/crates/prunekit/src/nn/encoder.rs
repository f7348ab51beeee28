use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::layer::PrunableLayer;
use crate::nn::Gradients;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const LN_EPS: f64 = 1e-5;

/// Shape of the encoder being pruned.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { num_layers: 2, model_dim: 64, ffn_dim: 128, num_heads: 4, seq_len: 16, seed: 0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Whether prunable weights are stored dense (element-wise masking) or
/// SVD-factored (rank masking).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightStructure {
    Dense,
    Factored,
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub struct LnCache {
    xhat: Matrix,
    inv: Vec<f64>,
}

impl LayerNorm {
    fn new(name: String, dim: usize) -> Self {
        LayerNorm { name, gamma: vec![1.0; dim], beta: vec![0.0; dim] }
    }

    fn forward(&self, x: &Matrix) -> (Matrix, LnCache) {
        let d = x.cols();
        let mut out = Matrix::zeros(x.rows(), d);
        let mut xhat = Matrix::zeros(x.rows(), d);
        let mut inv = vec![0.0; x.rows()];
        for i in 0..x.rows() {
            let row = x.row(i);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            inv[i] = s;
            for j in 0..d {
                let h = (row[j] - mu) * s;
                xhat.set(i, j, h);
                out.set(i, j, self.gamma[j] * h + self.beta[j]);
            }
        }
        (out, LnCache { xhat, inv })
    }

    fn backward(&self, cache: &LnCache, dy: &Matrix, grads: &mut Gradients) -> Matrix {
        let d = dy.cols();
        let mut dx = Matrix::zeros(dy.rows(), d);
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for i in 0..dy.rows() {
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..d {
                let dxh = dy.get(i, j) * self.gamma[j];
                m1 += dxh;
                m2 += dxh * cache.xhat.get(i, j);
                dgamma[j] += dy.get(i, j) * cache.xhat.get(i, j);
                dbeta[j] += dy.get(i, j);
            }
            m1 /= d as f64;
            m2 /= d as f64;
            for j in 0..d {
                let dxh = dy.get(i, j) * self.gamma[j];
                dx.set(i, j, cache.inv[i] * (dxh - m1 - cache.xhat.get(i, j) * m2));
            }
        }
        grads.add(format!("{}.gamma", self.name), &dgamma);
        grads.add(format!("{}.beta", self.name), &dbeta);
        dx
    }
}

/// One encoder block: self-attention plus feedforward, both with residual
/// connections and post-layernorm. The six weight matrices are prunable.
#[derive(Clone)]
pub struct EncoderLayer {
    pub wq: PrunableLayer,
    pub wk: PrunableLayer,
    pub wv: PrunableLayer,
    pub wo: PrunableLayer,
    pub w1: PrunableLayer,
    pub w2: PrunableLayer,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn prunables(&self) -> [&PrunableLayer; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2]
    }

    pub fn prunables_mut(&mut self) -> [&mut PrunableLayer; 6] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.w1, &mut self.w2]
    }
}

/// Per-task classification or regression head; never pruned.
#[derive(Clone)]
pub struct TaskHead {
    pub task_id: String,
    pub weight: Matrix, // model_dim × num_outputs
    pub bias: Vec<f64>,
}

/// Labels for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    Class(Vec<usize>),
    Reg(Vec<f64>),
}

/// A batch of real-valued feature sequences (each seq_len × model_dim).
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Matrix>,
    pub labels: Labels,
}

#[derive(Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
    pub heads: BTreeMap<String, TaskHead>,
}

struct LayerCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    zq: Option<Matrix>,
    zk: Option<Matrix>,
    zv: Option<Matrix>,
    att: Vec<Matrix>,
    concat: Matrix,
    zo: Option<Matrix>,
    ln1: LnCache,
    n1: Matrix,
    fpre: Matrix,
    z1: Option<Matrix>,
    fact: Matrix,
    z2: Option<Matrix>,
    ln2: LnCache,
}

pub struct ForwardCache {
    examples: Vec<Vec<LayerCache>>,
    outputs: Vec<Matrix>,
}

impl ForwardCache {
    pub fn outputs(&self) -> &[Matrix] {
        &self.outputs
    }
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..x.cols() {
            let e = (row[j] - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..x.cols() {
            let v = out.get(i, j) / sum;
            out.set(i, j, v);
        }
    }
    out
}

fn head_slice(m: &Matrix, h: usize, dh: usize) -> Matrix {
    let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
    m.select_columns(&cols)
}

impl Encoder {
    /// Build a seeded encoder. Factored structure runs SVD on every
    /// prunable weight at initialization; `with_scores` attaches movement
    /// score state.
    pub fn new<R: Rng>(
        config: EncoderConfig,
        structure: WeightStructure,
        with_scores: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let f = config.ffn_dim;
        let mut layers = Vec::with_capacity(config.num_layers);
        for li in 0..config.num_layers {
            let mk = |name: &str, m: usize, n: usize, rng: &mut R| -> Result<PrunableLayer> {
                let scale = (2.0 / (m + n) as f64).sqrt();
                let w = Matrix::randn(m, n, scale, rng);
                let full = format!("enc.{li}.{name}");
                match structure {
                    WeightStructure::Dense => Ok(PrunableLayer::dense(full, w, with_scores)),
                    WeightStructure::Factored => PrunableLayer::factored(full, &w, with_scores),
                }
            };
            let wq = mk("wq", d, d, rng)?;
            let wk = mk("wk", d, d, rng)?;
            let wv = mk("wv", d, d, rng)?;
            let wo = mk("wo", d, d, rng)?;
            let w1 = mk("w1", d, f, rng)?;
            let w2 = mk("w2", f, d, rng)?;
            layers.push(EncoderLayer {
                wq,
                wk,
                wv,
                wo,
                w1,
                w2,
                ln1: LayerNorm::new(format!("enc.{li}.ln1"), d),
                ln2: LayerNorm::new(format!("enc.{li}.ln2"), d),
            });
        }
        Ok(Encoder { config, layers, heads: BTreeMap::new() })
    }

    pub fn add_head<R: Rng>(&mut self, task_id: &str, num_outputs: usize, rng: &mut R) {
        let d = self.config.model_dim;
        let scale = (2.0 / (d + num_outputs) as f64).sqrt();
        let weight = Matrix::randn(d, num_outputs, scale, rng);
        self.heads.insert(
            task_id.to_string(),
            TaskHead { task_id: task_id.to_string(), weight, bias: vec![0.0; num_outputs] },
        );
    }

    pub fn prunable_layers(&self) -> Vec<&PrunableLayer> {
        self.layers.iter().flat_map(|l| l.prunables()).collect()
    }

    pub fn prunable_layers_mut(&mut self) -> Vec<&mut PrunableLayer> {
        self.layers.iter_mut().flat_map(|l| l.prunables_mut()).collect()
    }

    /// Deterministic forward pass over a batch of examples, keeping the
    /// activation cache for an exact backward pass.
    pub fn encoder_forward(&self, inputs: &[Matrix]) -> Result<ForwardCache> {
        let d = self.config.model_dim;
        let dh = d / self.config.num_heads;
        let mut examples = Vec::with_capacity(inputs.len());
        let mut outputs = Vec::with_capacity(inputs.len());
        for x0 in inputs {
            if x0.cols() != d || x0.rows() != self.config.seq_len {
                return Err(Error::shape(
                    "encoder_forward",
                    format!("expected {}x{}, got {}x{}", self.config.seq_len, d, x0.rows(), x0.cols()),
                ));
            }
            let mut caches = Vec::with_capacity(self.layers.len());
            let mut x = x0.clone();
            for layer in &self.layers {
                let (q, zq) = layer.wq.forward_train(&x)?;
                let (k, zk) = layer.wk.forward_train(&x)?;
                let (v, zv) = layer.wv.forward_train(&x)?;
                let mut att = Vec::with_capacity(self.config.num_heads);
                let mut concat = Matrix::zeros(x.rows(), d);
                let scale = 1.0 / (dh as f64).sqrt();
                for h in 0..self.config.num_heads {
                    let qh = head_slice(&q, h, dh);
                    let kh = head_slice(&k, h, dh);
                    let vh = head_slice(&v, h, dh);
                    let scores = qh.matmul(&kh.transpose()).scale(scale);
                    let a = softmax_rows(&scores);
                    let oh = a.matmul(&vh);
                    for i in 0..oh.rows() {
                        for j in 0..dh {
                            concat.set(i, h * dh + j, oh.get(i, j));
                        }
                    }
                    att.push(a);
                }
                let (attn_out, zo) = layer.wo.forward_train(&concat)?;
                let r1 = x.add(&attn_out);
                let (n1, ln1c) = layer.ln1.forward(&r1);
                let (fpre, z1) = layer.w1.forward_train(&n1)?;
                let mut fact = fpre.clone();
                for val in fact.data_mut() {
                    if *val < 0.0 {
                        *val = 0.0;
                    }
                }
                let (ffn_out, z2) = layer.w2.forward_train(&fact)?;
                let r2 = n1.add(&ffn_out);
                let (out, ln2c) = layer.ln2.forward(&r2);
                caches.push(LayerCache {
                    x,
                    q,
                    k,
                    v,
                    zq,
                    zk,
                    zv,
                    att,
                    concat,
                    zo,
                    ln1: ln1c,
                    n1,
                    fpre,
                    z1,
                    fact,
                    z2,
                    ln2: ln2c,
                });
                x = out;
            }
            outputs.push(x);
            examples.push(caches);
        }
        Ok(ForwardCache { examples, outputs })
    }

    /// Mean-pooled logits for one task head.
    pub fn logits_for(&self, task_id: &str, outputs: &[Matrix]) -> Result<Matrix> {
        let head = self.heads.get(task_id).ok_or_else(|| Error::UnknownTask(task_id.into()))?;
        let d = self.config.model_dim;
        let mut logits = Matrix::zeros(outputs.len(), head.weight.cols());
        for (b, out) in outputs.iter().enumerate() {
            let mut pooled = vec![0.0; d];
            for i in 0..out.rows() {
                for (j, p) in pooled.iter_mut().enumerate() {
                    *p += out.get(i, j);
                }
            }
            for p in pooled.iter_mut() {
                *p /= out.rows() as f64;
            }
            for c in 0..head.weight.cols() {
                let mut acc = head.bias[c];
                for (j, p) in pooled.iter().enumerate() {
                    acc += p * head.weight.get(j, c);
                }
                logits.set(b, c, acc);
            }
        }
        Ok(logits)
    }

    /// Forward, loss, and full reverse-mode gradients for one task batch.
    ///
    /// Classification uses softmax cross-entropy; regression uses squared
    /// error against a single output. Gradients through masks follow the
    /// straight-through contract.
    pub fn loss_and_backward(
        &self,
        batch: &Batch,
        task_id: &str,
        update_masked_weights: bool,
    ) -> Result<(f64, Gradients)> {
        let head = self.heads.get(task_id).ok_or_else(|| Error::UnknownTask(task_id.into()))?;
        let cache = self.encoder_forward(&batch.inputs)?;
        let logits = self.logits_for(task_id, &cache.outputs)?;
        let bsz = batch.inputs.len();
        if bsz == 0 {
            return Err(Error::EmptyInput("loss_and_backward"));
        }

        let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
        let mut loss = 0.0;
        match &batch.labels {
            Labels::Class(ys) => {
                if ys.len() != bsz {
                    return Err(Error::shape("loss", "labels/batch length mismatch"));
                }
                for (b, &y) in ys.iter().enumerate() {
                    if y >= logits.cols() {
                        return Err(Error::Config(format!("label {y} out of range")));
                    }
                    let row = logits.row(b);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    loss += -(row[y] - max - denom.ln());
                    for c in 0..logits.cols() {
                        let p = (row[c] - max).exp() / denom;
                        dlogits.set(b, c, (p - if c == y { 1.0 } else { 0.0 }) / bsz as f64);
                    }
                }
            }
            Labels::Reg(ts) => {
                if ts.len() != bsz || logits.cols() != 1 {
                    return Err(Error::shape("loss", "regression needs one output per example"));
                }
                for (b, &t) in ts.iter().enumerate() {
                    let p = logits.get(b, 0);
                    loss += (p - t).powi(2);
                    dlogits.set(b, 0, 2.0 * (p - t) / bsz as f64);
                }
            }
        }
        loss /= bsz as f64;
        if !loss.is_finite() {
            return Err(Error::numerical("loss", format!("non-finite loss {loss}")));
        }

        let mut grads = Gradients::new();
        let d = self.config.model_dim;
        let seq = self.config.seq_len;

        // Head gradients and dL/d(encoder output) per example.
        let mut dw_head = Matrix::zeros(head.weight.rows(), head.weight.cols());
        let mut db_head = vec![0.0; head.bias.len()];
        let mut douts = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let out = &cache.outputs[b];
            let mut pooled = vec![0.0; d];
            for i in 0..seq {
                for (j, p) in pooled.iter_mut().enumerate() {
                    *p += out.get(i, j) / seq as f64;
                }
            }
            let mut dpooled = vec![0.0; d];
            for c in 0..logits.cols() {
                let g = dlogits.get(b, c);
                db_head[c] += g;
                for j in 0..d {
                    dw_head.set(j, c, dw_head.get(j, c) + pooled[j] * g);
                    dpooled[j] += head.weight.get(j, c) * g;
                }
            }
            let mut dout = Matrix::zeros(seq, d);
            for i in 0..seq {
                for j in 0..d {
                    dout.set(i, j, dpooled[j] / seq as f64);
                }
            }
            douts.push(dout);
        }
        grads.add(format!("head.{task_id}.weight"), dw_head.data());
        grads.add(format!("head.{task_id}.bias"), &db_head);

        // Backward through the encoder stack, example by example.
        let dh = d / self.config.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (b, dout0) in douts.into_iter().enumerate() {
            let mut dout = dout0;
            for (layer, lc) in self.layers.iter().zip(&cache.examples[b]).rev() {
                let dr2 = layer.ln2.backward(&lc.ln2, &dout, &mut grads);
                let dfact =
                    layer.w2.backward(&lc.fact, lc.z2.as_ref(), &dr2, &mut grads, update_masked_weights);
                let mut dfpre = dfact;
                for (g, &pre) in dfpre.data_mut().iter_mut().zip(lc.fpre.data()) {
                    if pre <= 0.0 {
                        *g = 0.0;
                    }
                }
                let dn1_ffn =
                    layer.w1.backward(&lc.n1, lc.z1.as_ref(), &dfpre, &mut grads, update_masked_weights);
                let dn1 = dr2.add(&dn1_ffn);
                let dr1 = layer.ln1.backward(&lc.ln1, &dn1, &mut grads);
                let dconcat =
                    layer.wo.backward(&lc.concat, lc.zo.as_ref(), &dr1, &mut grads, update_masked_weights);
                let mut dq = Matrix::zeros(seq, d);
                let mut dk = Matrix::zeros(seq, d);
                let mut dv = Matrix::zeros(seq, d);
                for h in 0..self.config.num_heads {
                    let a = &lc.att[h];
                    let doh = head_slice(&dconcat, h, dh);
                    let vh = head_slice(&lc.v, h, dh);
                    let qh = head_slice(&lc.q, h, dh);
                    let kh = head_slice(&lc.k, h, dh);
                    let da = doh.matmul(&vh.transpose());
                    let dvh = a.transpose().matmul(&doh);
                    // softmax backward, row-wise
                    let mut ds = Matrix::zeros(seq, seq);
                    for i in 0..seq {
                        let mut dot = 0.0;
                        for j in 0..seq {
                            dot += da.get(i, j) * a.get(i, j);
                        }
                        for j in 0..seq {
                            ds.set(i, j, a.get(i, j) * (da.get(i, j) - dot));
                        }
                    }
                    let dqh = ds.matmul(&kh).scale(scale);
                    let dkh = ds.transpose().matmul(&qh).scale(scale);
                    for i in 0..seq {
                        for j in 0..dh {
                            dq.set(i, h * dh + j, dqh.get(i, j));
                            dk.set(i, h * dh + j, dkh.get(i, j));
                            dv.set(i, h * dh + j, dvh.get(i, j));
                        }
                    }
                }
                let dx_q = layer.wq.backward(&lc.x, lc.zq.as_ref(), &dq, &mut grads, update_masked_weights);
                let dx_k = layer.wk.backward(&lc.x, lc.zk.as_ref(), &dk, &mut grads, update_masked_weights);
                let dx_v = layer.wv.backward(&lc.x, lc.zv.as_ref(), &dv, &mut grads, update_masked_weights);
                dout = dr1.add(&dx_q).add(&dx_k).add(&dx_v);
            }
        }
        Ok((loss, grads))
    }

    /// All named trainable parameters as mutable slices, for the optimizer.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for layer in self.layers.iter_mut() {
            let EncoderLayer { wq, wk, wv, wo, w1, w2, ln1, ln2 } = layer;
            for pl in [wq, wk, wv, wo, w1, w2] {
                let name = pl.name.clone();
                match &mut pl.storage {
                    crate::nn::LayerStorage::Dense { weight, scores, .. } => {
                        out.push((format!("{name}.weight"), weight.data_mut()));
                        if let Some(s) = scores {
                            out.push((format!("{name}.scores"), s.data_mut()));
                        }
                    }
                    crate::nn::LayerStorage::Factored { factors, scores, .. } => {
                        out.push((format!("{name}.us"), factors.us.data_mut()));
                        out.push((format!("{name}.v"), factors.v.data_mut()));
                        if let Some(s) = scores {
                            out.push((format!("{name}.rank_scores"), s.as_mut_slice()));
                        }
                    }
                }
                out.push((format!("{name}.bias"), pl.bias.as_mut_slice()));
            }
            for ln in [ln1, ln2] {
                let LayerNorm { name, gamma, beta } = ln;
                out.push((format!("{name}.gamma"), gamma.as_mut_slice()));
                out.push((format!("{name}.beta"), beta.as_mut_slice()));
            }
        }
        for (tid, head) in self.heads.iter_mut() {
            out.push((format!("head.{tid}.weight"), head.weight.data_mut()));
            out.push((format!("head.{tid}.bias"), head.bias.as_mut_slice()));
        }
        out
    }
}
