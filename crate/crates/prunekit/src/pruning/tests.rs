use super::*;
use crate::linalg::{rel_frobenius, Matrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dense_layer(w: Matrix, with_scores: bool) -> PrunableLayer {
    PrunableLayer::dense("t", w, with_scores)
}

fn factored_layer(seed: u64, m: usize, n: usize, with_scores: bool) -> PrunableLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Matrix::randn(m, n, 1.0, &mut rng);
    PrunableLayer::factored("t", &w, with_scores).unwrap()
}

#[test]
fn topk_hand_cases() {
    let masks = topk_mask(&[&[3.0, 1.0, 2.0]], 2.0 / 3.0, Scope::Local).unwrap();
    assert_eq!(masks[0], vec![1.0, 0.0, 1.0]);

    let masks = topk_mask(&[&[3.0, 1.0, 2.0]], 1.0, Scope::Local).unwrap();
    assert_eq!(masks[0], vec![1.0, 1.0, 1.0]);
}

#[test]
fn topk_local_vs_global_two_tensors() {
    let a: &[f64] = &[10.0, 9.0];
    let b: &[f64] = &[1.0, 2.0];
    let local = topk_mask(&[a, b], 0.5, Scope::Local).unwrap();
    assert_eq!(local, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let global = topk_mask(&[a, b], 0.5, Scope::Global).unwrap();
    assert_eq!(global, vec![vec![1.0, 1.0], vec![0.0, 0.0]]);
}

#[test]
fn topk_matches_full_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let scores: Vec<f64> = (0..100).map(|_| Matrix::randn(1, 1, 1.0, &mut rng).get(0, 0)).collect();
    let k = 0.37;
    let mask = topk_mask(&[&scores], k, Scope::Local).unwrap().remove(0);

    // Independent oracle: full stable sort on (score desc, index asc).
    let keep = kept_count(k, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut want = vec![0.0; scores.len()];
    for &i in &order[..keep] {
        want[i] = 1.0;
    }
    assert_eq!(mask, want);
}

#[test]
fn magnitude_scores_dense() {
    let layer = dense_layer(Matrix::from_vec(1, 2, vec![-3.0, 1.0]).unwrap(), false);
    assert_eq!(magnitude_scores(&layer), vec![3.0, 1.0]);
}

#[test]
fn magnitude_scores_scale_homogeneous() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Matrix::randn(3, 3, 1.0, &mut rng);
    let s1 = magnitude_scores(&dense_layer(w.clone(), false));
    let s2 = magnitude_scores(&dense_layer(w.scale(2.0), false));
    for (a, b) in s1.iter().zip(&s2) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn magnitude_scores_factored_equal_sigma() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = Matrix::randn(5, 4, 1.0, &mut rng);
    let t = crate::linalg::svd(&w).unwrap();
    let layer = PrunableLayer::factored("t", &w, false).unwrap();
    for (a, b) in magnitude_scores(&layer).iter().zip(&t.sigma) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn ste_zero_and_hand_case() {
    let layer = dense_layer(Matrix::from_vec(1, 1, vec![2.0]).unwrap(), true);
    let zero = Matrix::zeros(1, 1);
    let (dw, ds) = ste_backward(&zero, &layer, false).unwrap();
    assert_eq!(dw.data(), &[0.0]);
    assert_eq!(ds.data(), &[0.0]);

    let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
    let (dw, ds) = ste_backward(&g, &layer, false).unwrap();
    assert_eq!(dw.data(), &[1.0]);
    assert_eq!(ds.data(), &[2.0]);
}

#[test]
fn ste_matches_symbolic_oracle() {
    // Independently coded differentiation of (W⊙M)x with M ≡ S pass-through.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let w = Matrix::randn(2, 2, 1.0, &mut rng);
        let mask_bits = Matrix::from_vec(
            2,
            2,
            (0..4).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let mut layer = dense_layer(w.clone(), true);
        if let LayerStorage::Dense { mask, .. } = &mut layer.storage {
            *mask = mask_bits.clone();
        }
        let upstream = Matrix::randn(2, 2, 1.0, &mut rng);
        let (dw, ds) = ste_backward(&upstream, &layer, false).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                // d/dW_ij of sum(G ⊙ (W⊙M)) = G_ij·M_ij; d/dS_ij with M=S identity = G_ij·W_ij
                assert!((dw.get(i, j) - upstream.get(i, j) * mask_bits.get(i, j)).abs() < 1e-15);
                assert!((ds.get(i, j) - upstream.get(i, j) * w.get(i, j)).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn ste_sign_consistency() {
    // Entries where W and the upstream gradient share sign get positive
    // score gradient under a loss-decreasing update direction.
    let w = Matrix::from_vec(1, 2, vec![2.0, -3.0]).unwrap();
    let layer = dense_layer(w, true);
    let upstream = Matrix::from_vec(1, 2, vec![0.5, -0.25]).unwrap();
    let (_, ds) = ste_backward(&upstream, &layer, false).unwrap();
    assert!(ds.get(0, 0) > 0.0);
    assert!(ds.get(0, 1) > 0.0);
}

#[test]
fn rank_prune_keeps_top_scored() {
    let layer = factored_layer(5, 8, 6, false);
    let sigma = magnitude_scores(&layer);
    // budget 28 of 48 params fits exactly two ranks at 14 params each;
    // non-increasing sigma puts them at indices {0, 1}
    let keep = rank_keep_sets(&[(8, 6)], &[sigma], 28.0 / 48.0, Scope::Local).unwrap();
    assert_eq!(keep[0], vec![0, 1]);
}

#[test]
fn rank_prune_keep_all_is_identity() {
    let layer = factored_layer(6, 4, 4, false);
    if let LayerStorage::Factored { factors, .. } = &layer.storage {
        let kept = rank_prune(factors, &[0, 1, 2, 3]).unwrap();
        assert_eq!(kept.us, factors.us);
        assert_eq!(kept.v, factors.v);
    }
}

#[test]
fn rank_prune_forward_matches_dense_reconstruction() {
    let layer = factored_layer(7, 6, 5, false);
    if let LayerStorage::Factored { factors, .. } = &layer.storage {
        let kept = rank_prune(factors, &[0, 2, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Matrix::randn(5, 3, 1.0, &mut rng);
        let via_forward = kept.forward(&x).unwrap();
        let via_dense = kept.unfactorize().matmul(&x);
        assert!(via_forward.sub(&via_dense).frobenius_norm() < 1e-10);
    }
}

#[test]
fn rank_prune_empty_keep_is_error() {
    let layer = factored_layer(9, 3, 3, false);
    if let LayerStorage::Factored { factors, .. } = &layer.storage {
        assert!(rank_prune(factors, &[]).is_err());
    }
}

#[test]
fn effective_count_arithmetic() {
    let mut layer = factored_layer(10, 8, 8, false);
    if let LayerStorage::Factored { mask, .. } = &mut layer.storage {
        mask.fill(0.0);
        mask[0] = 1.0;
        mask[1] = 1.0;
    }
    assert_eq!(effective_param_count(&layer), 32);
    if let LayerStorage::Factored { mask, .. } = &mut layer.storage {
        mask.fill(1.0);
        mask[7] = 0.0; // 7 live ranks → 7·16 = 112 > 64
    }
    assert_eq!(effective_param_count(&layer), 64);
}

#[test]
fn bert_base_rank38_anchor() {
    // 12 layers of four 768×768 attention weights plus 768×3072 and
    // 3072×768 feedforward weights, all at rank 38.
    let attn = 38 * (768 + 768);
    let ffn = 38 * (768 + 3072);
    let kept = 12 * (4 * attn + 2 * ffn);
    let dense = 12 * (4 * 768 * 768 + 2 * 768 * 3072);
    let fraction = kept as f64 / dense as f64;
    assert!(fraction > 0.071 && fraction < 0.076, "fraction {fraction}");
}

proptest! {
    #[test]
    fn footnote1_never_exceeds_dense(seed in 0u64..200, m in 2usize..12, n in 2usize..12) {
        let mut layer = factored_layer(seed, m, n, false);
        let k = m.min(n);
        for live in 0..=k {
            if let LayerStorage::Factored { mask, .. } = &mut layer.storage {
                mask.fill(0.0);
                for i in 0..live {
                    mask[i] = 1.0;
                }
            }
            prop_assert!(effective_param_count(&layer) <= m * n);
        }
    }

    #[test]
    fn cardinality_exact(seed in 0u64..100, k in 0.01f64..1.0, n1 in 2usize..40, n2 in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::randn(1, n1, 1.0, &mut rng);
        let b = Matrix::randn(1, n2, 1.0, &mut rng);
        let local = topk_mask(&[a.data(), b.data()], k, Scope::Local).unwrap();
        prop_assert_eq!(local[0].iter().filter(|&&v| v == 1.0).count(), kept_count(k, n1));
        prop_assert_eq!(local[1].iter().filter(|&&v| v == 1.0).count(), kept_count(k, n2));
        let global = topk_mask(&[a.data(), b.data()], k, Scope::Global).unwrap();
        let total: usize = global.iter().map(|m| m.iter().filter(|&&v| v == 1.0).count()).sum();
        prop_assert_eq!(total, kept_count(k, n1 + n2));
    }

    #[test]
    fn scope_coincides_on_single_tensor(seed in 0u64..100, k in 0.01f64..1.0, n in 2usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::randn(1, n, 1.0, &mut rng);
        let local = topk_mask(&[a.data()], k, Scope::Local).unwrap();
        let global = topk_mask(&[a.data()], k, Scope::Global).unwrap();
        prop_assert_eq!(local, global);
    }

    #[test]
    fn mask_permutation_equivariant(seed in 0u64..100, k in 0.1f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // distinct scores so tie-breaking cannot differ across layouts
        let mut scores: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        let mask = topk_mask(&[&scores], k, Scope::Local).unwrap().remove(0);
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..20).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let mask_p = topk_mask(&[&permuted], k, Scope::Local).unwrap().remove(0);
        for (pos, &src) in perm.iter().enumerate() {
            prop_assert_eq!(mask_p[pos], mask[src]);
        }
        scores.clear();
    }

    #[test]
    fn mask_scale_invariant(seed in 0u64..100, k in 0.05f64..1.0, c in 0.01f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::randn(1, 30, 1.0, &mut rng);
        let scaled: Vec<f64> = a.data().iter().map(|v| v * c).collect();
        let m1 = topk_mask(&[a.data()], k, Scope::Local).unwrap();
        let m2 = topk_mask(&[&scaled], k, Scope::Local).unwrap();
        prop_assert_eq!(m1, m2);
    }
}

#[test]
fn apply_prune_step_full_density_is_noop() {
    let mut layer = dense_layer(Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap(), false);
    apply_prune_step(&mut [&mut layer], Selector::Magnitude, Scope::Local, 1.0).unwrap();
    if let LayerStorage::Dense { mask, .. } = &layer.storage {
        assert!(mask.data().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn magnitude_frozen_weights_nested_kept_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut layer = dense_layer(Matrix::randn(6, 6, 1.0, &mut rng), false);
    let mut prev: Option<Vec<f64>> = None;
    for &k in &[1.0, 0.8, 0.6, 0.4, 0.2, 0.1] {
        apply_prune_step(&mut [&mut layer], Selector::Magnitude, Scope::Local, k).unwrap();
        if let LayerStorage::Dense { mask, .. } = &layer.storage {
            let cur = mask.data().to_vec();
            if let Some(p) = &prev {
                // kept set must be a subset of the previous kept set
                for (c, pv) in cur.iter().zip(p) {
                    assert!(!(c == &1.0 && pv == &0.0), "mask regrew under frozen magnitude");
                }
            }
            prev = Some(cur);
        }
    }
}

#[test]
fn movement_scores_allow_regrowth() {
    // Scripted score updates flip the ranking; membership changes while
    // cardinality tracks k.
    let mut layer = dense_layer(Matrix::zeros(1, 4), true);
    if let LayerStorage::Dense { scores, .. } = &mut layer.storage {
        scores.as_mut().unwrap().data_mut().copy_from_slice(&[4.0, 3.0, 2.0, 1.0]);
    }
    apply_prune_step(&mut [&mut layer], Selector::Movement, Scope::Local, 0.5).unwrap();
    if let LayerStorage::Dense { mask, .. } = &layer.storage {
        assert_eq!(mask.data(), &[1.0, 1.0, 0.0, 0.0]);
    }
    if let LayerStorage::Dense { scores, .. } = &mut layer.storage {
        scores.as_mut().unwrap().data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    }
    apply_prune_step(&mut [&mut layer], Selector::Movement, Scope::Local, 0.5).unwrap();
    if let LayerStorage::Dense { mask, .. } = &layer.storage {
        assert_eq!(mask.data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}

#[test]
fn rank_global_vs_local_single_layer_coincide() {
    for &k in &[1.0, 0.5, 0.2, 0.1, 0.03] {
        let mut l1 = factored_layer(11, 8, 6, false);
        let mut l2 = factored_layer(11, 8, 6, false);
        apply_prune_step(&mut [&mut l1], Selector::Magnitude, Scope::Local, k).unwrap();
        apply_prune_step(&mut [&mut l2], Selector::Magnitude, Scope::Global, k).unwrap();
        let (m1, m2) = match (&l1.storage, &l2.storage) {
            (LayerStorage::Factored { mask: a, .. }, LayerStorage::Factored { mask: b, .. }) => {
                (a.clone(), b.clone())
            }
            _ => unreachable!(),
        };
        assert_eq!(m1, m2, "k = {k}");
    }
}

#[test]
fn compact_factored_preserves_effective_weight() {
    let mut layer = factored_layer(12, 7, 5, true);
    apply_prune_step(&mut [&mut layer], Selector::Magnitude, Scope::Local, 0.4).unwrap();
    let before = layer.effective_weight();
    let live_before = effective_param_count(&layer);
    compact_factored(&mut [&mut layer], None).unwrap();
    let after = layer.effective_weight();
    assert!(rel_frobenius(&after, &before) < 1e-12);
    assert_eq!(effective_param_count(&layer), live_before);
    if let LayerStorage::Factored { factors, mask, scores } = &layer.storage {
        assert_eq!(factors.retained_rank, mask.len());
        assert!(mask.iter().all(|&v| v == 1.0));
        assert_eq!(scores.as_ref().unwrap().len(), factors.retained_rank);
    }
}

#[test]
fn schedule_budget_respected_by_rank_global() {
    let mut l1 = factored_layer(13, 10, 8, false);
    let mut l2 = factored_layer(14, 6, 12, false);
    let dense_total = 10 * 8 + 6 * 12;
    for &k in &[0.5, 0.3, 0.15] {
        apply_prune_step(&mut [&mut l1, &mut l2], Selector::Magnitude, Scope::Global, k).unwrap();
        let eff = effective_param_count(&l1) + effective_param_count(&l2);
        let budget = kept_count(k, dense_total);
        // within the floor of one rank per layer
        let floor = (10 + 8).min(10 * 8) + (6 + 12).min(6 * 12);
        assert!(eff <= budget.max(floor), "k={k}: eff {eff} budget {budget}");
    }
}
