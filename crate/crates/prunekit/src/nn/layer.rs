use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::nn::Gradients;

/// Low-rank storage of a weight: `us` holds the product U'Σ' (m×k'),
/// `v` holds V' (k'×n).
#[derive(Debug, Clone)]
pub struct FactoredLayer {
    pub us: Matrix,
    pub v: Matrix,
    pub retained_rank: usize,
    pub original_shape: (usize, usize),
    pub original_rank: usize,
}

impl FactoredLayer {
    /// Factor a dense weight via SVD at full rank.
    pub fn from_weight(w: &Matrix) -> Result<Self> {
        let t = svd(w)?;
        let k = t.sigma.len();
        let mut us = t.u.clone();
        for i in 0..us.rows() {
            for j in 0..k {
                let val = us.get(i, j) * t.sigma[j];
                us.set(i, j, val);
            }
        }
        Ok(FactoredLayer {
            us,
            v: t.v,
            retained_rank: k,
            original_shape: (w.rows(), w.cols()),
            original_rank: k,
        })
    }

    /// Storage cost of the factored form.
    pub fn factored_param_count(&self) -> usize {
        let (m, n) = self.original_shape;
        self.retained_rank * (m + n)
    }

    /// Materialize the m×n product.
    pub fn unfactorize(&self) -> Matrix {
        self.us.matmul(&self.v)
    }

    /// Column norms of us times row norms of v; equals |Σ| right after
    /// SVD initialization (v rows are then unit-norm).
    pub fn rank_magnitudes(&self) -> Vec<f64> {
        (0..self.retained_rank)
            .map(|r| {
                let cu: f64 =
                    (0..self.us.rows()).map(|i| self.us.get(i, r).powi(2)).sum::<f64>().sqrt();
                let rv: f64 = self.v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                cu * rv
            })
            .collect()
    }

    /// Product us·(v·x) for x of shape n×l, without materializing m×n.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if self.retained_rank == 0 {
            return Err(Error::Config("forward_factored: retained rank must be >= 1".into()));
        }
        if x.rows() != self.v.cols() {
            return Err(Error::shape(
                "forward_factored",
                format!("v is {}x{}, x is {}x{}", self.v.rows(), self.v.cols(), x.rows(), x.cols()),
            ));
        }
        Ok(self.us.matmul(&self.v.matmul(x)))
    }

    /// Same product plus a multiplication count for the cost probe.
    pub fn forward_counted(&self, x: &Matrix) -> Result<(Matrix, usize)> {
        let y = self.forward(x)?;
        let (m, n) = (self.us.rows(), self.v.cols());
        Ok((y, x.cols() * self.retained_rank * (m + n)))
    }
}

/// How a prunable weight is stored and masked.
#[derive(Debug, Clone)]
pub enum LayerStorage {
    /// Element-wise: dense weight with an entry mask; scores present in
    /// movement mode only.
    Dense { weight: Matrix, mask: Matrix, scores: Option<Matrix> },
    /// Rank: factored weight with a per-rank mask, soft until compaction.
    Factored { factors: FactoredLayer, mask: Vec<f64>, scores: Option<Vec<f64>> },
}

/// A weight matrix participating in pruning, plus its never-pruned bias.
#[derive(Debug, Clone)]
pub struct PrunableLayer {
    pub name: String,
    pub storage: LayerStorage,
    pub bias: Vec<f64>,
}

impl PrunableLayer {
    pub fn dense(name: impl Into<String>, weight: Matrix, with_scores: bool) -> Self {
        let mask = {
            let mut m = Matrix::zeros(weight.rows(), weight.cols());
            m.data_mut().fill(1.0);
            m
        };
        let scores =
            with_scores.then(|| Matrix::zeros(weight.rows(), weight.cols()));
        let bias = vec![0.0; weight.cols()];
        PrunableLayer { name: name.into(), storage: LayerStorage::Dense { weight, mask, scores }, bias }
    }

    pub fn factored(name: impl Into<String>, weight: &Matrix, with_scores: bool) -> Result<Self> {
        let factors = FactoredLayer::from_weight(weight)?;
        let k = factors.retained_rank;
        // Movement rank scores start at the singular values.
        let scores = with_scores.then(|| factors.rank_magnitudes());
        let bias = vec![0.0; weight.cols()];
        Ok(PrunableLayer {
            name: name.into(),
            storage: LayerStorage::Factored { factors, mask: vec![1.0; k], scores },
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        match &self.storage {
            LayerStorage::Dense { weight, .. } => weight.rows(),
            LayerStorage::Factored { factors, .. } => factors.original_shape.0,
        }
    }

    pub fn out_dim(&self) -> usize {
        match &self.storage {
            LayerStorage::Dense { weight, .. } => weight.cols(),
            LayerStorage::Factored { factors, .. } => factors.original_shape.1,
        }
    }

    /// The masked weight as a dense m×n matrix (diagnostics and oracles).
    pub fn effective_weight(&self) -> Matrix {
        match &self.storage {
            LayerStorage::Dense { weight, mask, .. } => weight.hadamard(mask),
            LayerStorage::Factored { factors, mask, .. } => {
                let mut us = factors.us.clone();
                for i in 0..us.rows() {
                    for r in 0..factors.retained_rank {
                        let v = us.get(i, r) * mask[r];
                        us.set(i, r, v);
                    }
                }
                us.matmul(&factors.v)
            }
        }
    }

    /// y = x · W_eff + bias, x is l×m. Returns the pre-mask intermediate
    /// z = x·us in factored mode (needed by backward).
    pub fn forward_train(&self, x: &Matrix) -> Result<(Matrix, Option<Matrix>)> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                "layer forward",
                format!("{}: input cols {} != in_dim {}", self.name, x.cols(), self.in_dim()),
            ));
        }
        match &self.storage {
            LayerStorage::Dense { weight, mask, .. } => {
                let mut y = x.matmul(&weight.hadamard(mask));
                add_bias_rows(&mut y, &self.bias);
                Ok((y, None))
            }
            LayerStorage::Factored { factors, mask, .. } => {
                let z = x.matmul(&factors.us);
                let mut zm = z.clone();
                for i in 0..zm.rows() {
                    for r in 0..factors.retained_rank {
                        let v = zm.get(i, r) * mask[r];
                        zm.set(i, r, v);
                    }
                }
                let mut y = zm.matmul(&factors.v);
                add_bias_rows(&mut y, &self.bias);
                Ok((y, Some(z)))
            }
        }
    }

    /// Reverse-mode step: accumulates parameter gradients (straight-through
    /// on the mask) and returns dL/dx.
    pub fn backward(
        &self,
        x: &Matrix,
        z: Option<&Matrix>,
        dy: &Matrix,
        grads: &mut Gradients,
        update_masked_weights: bool,
    ) -> Matrix {
        // bias gradient: column sums of dy
        let mut db = vec![0.0; dy.cols()];
        for i in 0..dy.rows() {
            for (j, d) in db.iter_mut().enumerate() {
                *d += dy.get(i, j);
            }
        }
        grads.add(format!("{}.bias", self.name), &db);

        match &self.storage {
            LayerStorage::Dense { weight, mask, scores } => {
                let d_masked = x.transpose().matmul(dy); // dL/d(W⊙M)
                let (dw, ds) = crate::pruning::ste_backward_parts(
                    &d_masked,
                    weight,
                    mask,
                    update_masked_weights,
                );
                grads.add(format!("{}.weight", self.name), dw.data());
                if scores.is_some() {
                    grads.add(format!("{}.scores", self.name), ds.data());
                }
                dy.matmul(&weight.hadamard(mask).transpose())
            }
            LayerStorage::Factored { factors, mask, scores } => {
                let z = z.expect("factored backward needs cached z");
                let k = factors.retained_rank;
                // zm = z ⊙ mask (per column)
                let mut zm = z.clone();
                for i in 0..zm.rows() {
                    for r in 0..k {
                        let v = zm.get(i, r) * mask[r];
                        zm.set(i, r, v);
                    }
                }
                let dv = zm.transpose().matmul(dy);
                grads.add(format!("{}.v", self.name), dv.data());

                let dzm = dy.matmul(&factors.v.transpose()); // l×k
                // STE: rank-score gradient is dL/dmask_r with Top_k as identity.
                let mut dmask = vec![0.0; k];
                for i in 0..z.rows() {
                    for r in 0..k {
                        dmask[r] += z.get(i, r) * dzm.get(i, r);
                    }
                }
                if scores.is_some() {
                    grads.add(format!("{}.rank_scores", self.name), &dmask);
                }
                let mut dz = dzm;
                for i in 0..dz.rows() {
                    for r in 0..k {
                        let v = dz.get(i, r) * mask[r];
                        dz.set(i, r, v);
                    }
                }
                let dus = x.transpose().matmul(&dz);
                grads.add(format!("{}.us", self.name), dus.data());
                dz.matmul(&factors.us.transpose())
            }
        }
    }
}

pub(crate) fn add_bias_rows(y: &mut Matrix, bias: &[f64]) {
    debug_assert_eq!(y.cols(), bias.len());
    for i in 0..y.rows() {
        for (j, b) in bias.iter().enumerate() {
            let v = y.get(i, j) + b;
            y.set(i, j, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_frobenius;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_masked_identity_and_zero_mask() {
        let w = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut layer = PrunableLayer::dense("t", w, false);
        let x = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let (y, _) = layer.forward_train(&x).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0]);

        if let LayerStorage::Dense { mask, .. } = &mut layer.storage {
            mask.data_mut().fill(0.0);
        }
        let (y, _) = layer.forward_train(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]); // bias-only (bias is zero)
    }

    #[test]
    fn forward_masked_diagonal_mask() {
        let w = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut layer = PrunableLayer::dense("t", w, false);
        if let LayerStorage::Dense { mask, .. } = &mut layer.storage {
            *mask = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        }
        // (W ⊙ M) x with x = [1,1]^T, computed here in x·W convention via transpose
        let masked = layer.effective_weight();
        let x = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let y = masked.matmul(&x);
        assert_eq!(y.data(), &[1.0, 4.0]);
    }

    #[test]
    fn factored_rank1_by_hand() {
        let f = FactoredLayer {
            us: Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap(),
            v: Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap(),
            retained_rank: 1,
            original_shape: (2, 2),
            original_rank: 2,
        };
        let x = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let y = f.forward(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 0.0]);
    }

    #[test]
    fn factored_full_rank_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = Matrix::randn(6, 4, 1.0, &mut rng);
        let f = FactoredLayer::from_weight(&w).unwrap();
        let x = Matrix::randn(4, 3, 1.0, &mut rng);
        let dense = w.matmul(&x);
        let fact = f.forward(&x).unwrap();
        assert!(rel_frobenius(&fact, &dense) < 1e-6);
    }

    #[test]
    fn factored_zero_rank_is_error() {
        let f = FactoredLayer {
            us: Matrix::zeros(2, 1),
            v: Matrix::zeros(1, 2),
            retained_rank: 0,
            original_shape: (2, 2),
            original_rank: 2,
        };
        let x = Matrix::zeros(2, 1);
        assert!(f.forward(&x).is_err());
    }

    #[test]
    fn op_count_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let w = Matrix::randn(8, 6, 1.0, &mut rng);
        let mut f = FactoredLayer::from_weight(&w).unwrap();
        // prune to rank 2 by hand
        f.us = f.us.select_columns(&[0, 1]);
        f.v = f.v.select_rows(&[0, 1]);
        f.retained_rank = 2;
        let x = Matrix::randn(6, 5, 1.0, &mut rng);
        let (_, mults) = f.forward_counted(&x).unwrap();
        assert_eq!(mults, 5 * 2 * (8 + 6));
    }

    #[test]
    fn rank_magnitudes_match_sigma_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w = Matrix::randn(5, 4, 1.0, &mut rng);
        let t = svd(&w).unwrap();
        let f = FactoredLayer::from_weight(&w).unwrap();
        for (a, b) in f.rank_magnitudes().iter().zip(&t.sigma) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
