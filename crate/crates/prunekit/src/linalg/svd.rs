use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFFDIAG_TOL: f64 = 1e-12;

/// Thin SVD of an m×n matrix: `u` is m×k, `sigma` has k entries sorted
/// non-increasing, `v` is k×n with orthonormal rows, k = min(m, n), and
/// u · diag(sigma) · v reconstructs the input.
#[derive(Debug, Clone)]
pub struct SvdTriple {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdTriple {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.sigma.len();
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for j in 0..k {
                let v = us.get(i, j) * self.sigma[j];
                us.set(i, j, v);
            }
        }
        us.matmul(&self.v)
    }
}

/// One-sided Jacobi SVD. Orthogonalizes columns by plane rotations; the
/// rotations accumulate into V, column norms become the singular values.
pub fn svd(w: &Matrix) -> Result<SvdTriple> {
    if !w.is_finite() {
        return Err(Error::numerical("svd", "non-finite input entry"));
    }
    if w.rows() >= w.cols() {
        svd_tall(w)
    } else {
        // Work on the transpose and swap factors back.
        let t = svd_tall(&w.transpose())?;
        Ok(SvdTriple { u: t.v.transpose(), sigma: t.sigma, v: t.u.transpose() })
    }
}

fn svd_tall(w: &Matrix) -> Result<SvdTriple> {
    let m = w.rows();
    let n = w.cols();
    let mut a = w.clone();
    let mut vt = Matrix::identity(n); // accumulates right rotations, n×n

    let mut converged = false;
    let mut worst = 0.0f64;
    for _sweep in 0..MAX_SWEEPS {
        worst = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let x = a.get(i, p);
                    let y = a.get(i, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if app == 0.0 || aqq == 0.0 {
                    continue;
                }
                let rel = apq.abs() / (app * aqq).sqrt();
                worst = worst.max(rel);
                if rel <= OFFDIAG_TOL {
                    continue;
                }
                // Jacobi rotation zeroing the (p,q) inner product.
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let x = a.get(i, p);
                    let y = a.get(i, q);
                    a.set(i, p, c * x - s * y);
                    a.set(i, q, s * x + c * y);
                }
                for i in 0..n {
                    let x = vt.get(i, p);
                    let y = vt.get(i, q);
                    vt.set(i, p, c * x - s * y);
                    vt.set(i, q, s * x + c * y);
                }
            }
        }
        if worst <= OFFDIAG_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNonConvergence { sweeps: MAX_SWEEPS, offdiag: worst });
    }

    // Column norms are the singular values.
    let mut sigma: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| a.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    let sig_max = sigma.iter().cloned().fold(0.0, f64::max);

    // Sort descending, stable in the original column index.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).unwrap().then(x.cmp(&y)));

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n); // rows of output v
    let mut out_sigma = vec![0.0; n];
    let zero_cut = if sig_max > 0.0 { sig_max * 1e-14 } else { 0.0 };
    let mut deficient = Vec::new();
    for (jj, &j) in order.iter().enumerate() {
        out_sigma[jj] = sigma[j];
        for i in 0..n {
            v.set(jj, i, vt.get(i, j));
        }
        if sigma[j] > zero_cut {
            for i in 0..m {
                u.set(i, jj, a.get(i, j) / sigma[j]);
            }
        } else {
            out_sigma[jj] = 0.0;
            deficient.push(jj);
        }
    }
    if !deficient.is_empty() {
        complete_basis(&mut u, &deficient)?;
    }

    // Largest-magnitude entry of each u column made non-negative.
    for j in 0..n {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..m {
            let v_abs = u.get(i, j).abs();
            if v_abs > best_abs {
                best_abs = v_abs;
                best = i;
            }
        }
        if u.get(best, j) < 0.0 {
            for i in 0..m {
                let x = -u.get(i, j);
                u.set(i, j, x);
            }
            for i in 0..n {
                let x = -v.get(j, i);
                v.set(j, i, x);
            }
        }
    }

    sigma = out_sigma;
    Ok(SvdTriple { u, sigma, v })
}

/// Fill zero-singular-value columns of u with vectors orthonormal to the rest.
fn complete_basis(u: &mut Matrix, deficient: &[usize]) -> Result<()> {
    let m = u.rows();
    let n = u.cols();
    let mut filled: Vec<usize> = (0..n).filter(|j| !deficient.contains(j)).collect();
    for &col in deficient {
        let mut chosen: Option<Vec<f64>> = None;
        for cand in 0..m {
            let mut vec: Vec<f64> = (0..m).map(|i| if i == cand { 1.0 } else { 0.0 }).collect();
            // Two rounds of Gram-Schmidt against already-set columns.
            for _ in 0..2 {
                for &j in &filled {
                    let dot: f64 = (0..m).map(|i| vec[i] * u.get(i, j)).sum();
                    for i in 0..m {
                        vec[i] -= dot * u.get(i, j);
                    }
                }
            }
            let norm: f64 = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for x in vec.iter_mut() {
                    *x /= norm;
                }
                chosen = Some(vec);
                break;
            }
        }
        let vec = chosen.ok_or_else(|| Error::numerical("svd", "basis completion failed"))?;
        for i in 0..m {
            u.set(i, col, vec[i]);
        }
        filled.push(col);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_frobenius;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_triple(w: &Matrix, t: &SvdTriple, tol: f64) {
        let k = w.rows().min(w.cols());
        assert_eq!(t.u.rows(), w.rows());
        assert_eq!(t.u.cols(), k);
        assert_eq!(t.sigma.len(), k);
        assert_eq!(t.v.rows(), k);
        assert_eq!(t.v.cols(), w.cols());
        // sigma non-increasing and non-negative
        for i in 0..k {
            assert!(t.sigma[i] >= 0.0);
            if i > 0 {
                assert!(t.sigma[i - 1] >= t.sigma[i]);
            }
        }
        // orthonormality
        let utu = t.u.transpose().matmul(&t.u);
        let vvt = t.v.matmul(&t.v.transpose());
        let eye = Matrix::identity(k);
        assert!(utu.sub(&eye).frobenius_norm() <= tol, "u not orthonormal");
        assert!(vvt.sub(&eye).frobenius_norm() <= tol, "v not orthonormal");
        // reconstruction
        let err = t.reconstruct().sub(w).frobenius_norm();
        assert!(err <= tol * w.frobenius_norm().max(1.0), "reconstruction error {err}");
    }

    #[test]
    fn diagonal_input() {
        let w = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let t = svd(&w).unwrap();
        assert!((t.sigma[0] - 3.0).abs() < 1e-12);
        assert!((t.sigma[1] - 1.0).abs() < 1e-12);
        check_triple(&w, &t, 1e-8);
    }

    #[test]
    fn identity_input() {
        let w = Matrix::identity(5);
        let t = svd(&w).unwrap();
        for s in &t.sigma {
            assert!((s - 1.0).abs() < 1e-12);
        }
        check_triple(&w, &t, 1e-8);
    }

    #[test]
    fn seeded_rectangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Matrix::randn(4, 3, 1.0, &mut rng);
        let t = svd(&w).unwrap();
        check_triple(&w, &t, 1e-8);
    }

    #[test]
    fn wide_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Matrix::randn(3, 7, 1.0, &mut rng);
        let t = svd(&w).unwrap();
        check_triple(&w, &t, 1e-8);
    }

    #[test]
    fn rank_deficient_zero_sigma() {
        // Rank-1 outer product of 3-vectors inside a 4x3 matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Matrix::randn(4, 1, 1.0, &mut rng);
        let b = Matrix::randn(1, 3, 1.0, &mut rng);
        let w = a.matmul(&b);
        let t = svd(&w).unwrap();
        assert!(t.sigma[1] < 1e-10);
        assert!(t.sigma[2] < 1e-10);
        check_triple(&w, &t, 1e-8);
    }

    #[test]
    fn non_finite_is_error() {
        let w = Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(svd(&w).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn roundtrip_property(seed in 0u64..10_000, m in 1usize..12, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Matrix::randn(m, n, 1.0, &mut rng);
            let t = svd(&w).unwrap();
            check_triple(&w, &t, 1e-8);
        }

        #[test]
        fn sigma_scales_linearly(seed in 0u64..1000, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Matrix::randn(5, 4, 1.0, &mut rng);
            let t1 = svd(&w).unwrap();
            let t2 = svd(&w.scale(c)).unwrap();
            for (a, b) in t1.sigma.iter().zip(&t2.sigma) {
                prop_assert!((a * c - b).abs() <= 1e-8 * (a * c).abs().max(1.0));
            }
        }
    }

    #[test]
    fn full_reconstruction_relative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Matrix::randn(16, 9, 2.0, &mut rng);
        let t = svd(&w).unwrap();
        assert!(rel_frobenius(&t.reconstruct(), &w) < 1e-8);
    }
}
