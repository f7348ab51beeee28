//! Latency benchmark: dense x·W against the two-step factored
//! x·us then ·v, same inner kernel in both paths so the measurement
//! isolates structure rather than kernel quality. 32-bit arithmetic.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const MIN_REPS: usize = 30;
pub const MIN_WARMUP: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchResult {
    pub shape_m: usize,
    pub shape_n: usize,
    pub batch_l: usize,
    pub k_prime: usize,
    pub density: f64,
    pub dense_ns_median: f64,
    pub dense_ns_q1: f64,
    pub dense_ns_q3: f64,
    pub factored_ns_median: f64,
    pub factored_ns_q1: f64,
    pub factored_ns_q3: f64,
    pub relative: f64,
    pub theoretical_ratio: f64,
    pub reps: usize,
    pub threads: usize,
}

/// Row-major f32 product c = a·b, optionally splitting rows of `a`
/// across threads. Same loop order as the f64 kernel.
fn matmul_f32(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32], threads: usize) {
    let body = |rows: std::ops::Range<usize>, c: &mut [f32]| {
        for (ci, i) in rows.enumerate() {
            let crow = &mut c[ci * n..(ci + 1) * n];
            crow.fill(0.0);
            for l in 0..k {
                let av = a[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[l * n..(l + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    };
    if threads <= 1 || m < threads {
        body(0..m, c);
        return;
    }
    let chunk = m.div_ceil(threads);
    std::thread::scope(|s| {
        let mut rest = c;
        let mut start = 0;
        while start < m {
            let end = (start + chunk).min(m);
            let (head, tail) = rest.split_at_mut((end - start) * n);
            let range = start..end;
            s.spawn(move || body(range, head));
            rest = tail;
            start = end;
        }
    });
}

fn rel_err_f32(a: &[f32], b: &[f32]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        num += ((x - y) as f64).powi(2);
        den += (*y as f64).powi(2);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Smallest observable Instant delta, estimated once per call.
fn timer_granularity_ns() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..10 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min((t1 - t0).as_nanos() as f64);
    }
    best.max(1.0)
}

/// Median wall time per call in ns. Batches iterations per sample when a
/// single call is too fast for the timer (< 100× its granularity).
fn time_ns<F: FnMut()>(mut f: F, reps: usize, warmup: usize) -> (f64, f64, f64) {
    for _ in 0..warmup {
        f();
    }
    let gran = timer_granularity_ns();
    let t0 = Instant::now();
    f();
    let est = (t0.elapsed().as_nanos() as f64).max(1.0);
    let inner = if est < 100.0 * gran { (100.0 * gran / est).ceil() as usize } else { 1 };
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        for _ in 0..inner {
            f();
        }
        samples.push(t0.elapsed().as_nanos() as f64 / inner as f64);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let q = |p: f64| -> f64 {
        let idx = (p * (samples.len() - 1) as f64).round() as usize;
        samples[idx]
    };
    (q(0.5), q(0.25), q(0.75))
}

/// Time one (shape, k′) cell. The dense baseline multiplies by the
/// collapsed weight us·v, so both paths compute the same function and
/// the factored output is checked against the dense one before timing.
pub fn bench_point(
    m: usize,
    n: usize,
    l: usize,
    k_prime: usize,
    reps: usize,
    threads: usize,
    seed: u64,
) -> Result<BenchResult> {
    if m == 0 || n == 0 || l == 0 {
        return Err(Error::EmptyInput("bench_point"));
    }
    let max_rank = m.min(n);
    if k_prime == 0 || k_prime > max_rank {
        return Err(Error::Config(format!("k_prime {k_prime} outside 1..={max_rank}")));
    }
    let reps = reps.max(MIN_REPS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |len: usize, scale: f32| -> Vec<f32> {
        (0..len).map(|_| (rng.random::<f32>() - 0.5) * scale).collect()
    };
    let scale = 1.0 / (k_prime as f32).sqrt();
    let us = fill(m * k_prime, scale);
    let v = fill(k_prime * n, scale);
    let x = fill(l * m, 1.0);
    // collapsed dense weight, accumulated in f64 to keep the gate tight
    let mut w = vec![0.0f32; m * n];
    for i in 0..m {
        for r in 0..k_prime {
            let uv = us[i * k_prime + r] as f64;
            for j in 0..n {
                w[i * n + j] += (uv * v[r * n + j] as f64) as f32;
            }
        }
    }

    let mut y_dense = vec![0.0f32; l * n];
    let mut z = vec![0.0f32; l * k_prime];
    let mut y_fact = vec![0.0f32; l * n];
    matmul_f32(&x, &w, l, m, n, &mut y_dense, threads);
    matmul_f32(&x, &us, l, m, k_prime, &mut z, threads);
    matmul_f32(&z, &v, l, k_prime, n, &mut y_fact, threads);
    let err = rel_err_f32(&y_fact, &y_dense);
    if err > 1e-4 {
        return Err(Error::numerical("bench correctness gate", format!("rel err {err}")));
    }

    let (dense_med, dense_q1, dense_q3) = time_ns(
        || matmul_f32(&x, &w, l, m, n, &mut y_dense, threads),
        reps,
        MIN_WARMUP,
    );
    let (fact_med, fact_q1, fact_q3) = time_ns(
        || {
            matmul_f32(&x, &us, l, m, k_prime, &mut z, threads);
            matmul_f32(&z, &v, l, k_prime, n, &mut y_fact, threads);
        },
        reps,
        MIN_WARMUP,
    );

    let density = ((k_prime * (m + n)) as f64 / (m * n) as f64).min(1.0);
    Ok(BenchResult {
        shape_m: m,
        shape_n: n,
        batch_l: l,
        k_prime,
        density,
        dense_ns_median: dense_med,
        dense_ns_q1: dense_q1,
        dense_ns_q3: dense_q3,
        factored_ns_median: fact_med,
        factored_ns_q1: fact_q1,
        factored_ns_q3: fact_q3,
        relative: fact_med / dense_med,
        theoretical_ratio: (k_prime * (m + n)) as f64 / (m * n) as f64,
        reps,
        threads,
    })
}

/// Dense-vs-dense control: times the identical dense product twice and
/// reports the ratio, which should sit within noise of 1.
pub fn dense_control(m: usize, n: usize, l: usize, reps: usize, threads: usize, seed: u64) -> Result<f64> {
    if m == 0 || n == 0 || l == 0 {
        return Err(Error::EmptyInput("dense_control"));
    }
    let reps = reps.max(MIN_REPS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |len: usize| -> Vec<f32> { (0..len).map(|_| rng.random::<f32>() - 0.5).collect() };
    let w = fill(m * n);
    let x = fill(l * m);
    let mut y = vec![0.0f32; l * n];
    for _ in 0..MIN_WARMUP {
        matmul_f32(&x, &w, l, m, n, &mut y, threads);
    }
    // interleave the two "arms" so clock drift and scheduler noise hit
    // both equally
    let mut a = Vec::with_capacity(reps);
    let mut b = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        matmul_f32(&x, &w, l, m, n, &mut y, threads);
        a.push(t0.elapsed().as_nanos() as f64);
        let t1 = Instant::now();
        matmul_f32(&x, &w, l, m, n, &mut y, threads);
        b.push(t1.elapsed().as_nanos() as f64);
    }
    let med = |v: &mut Vec<f64>| -> f64 {
        v.sort_by(|x, y| x.partial_cmp(y).expect("finite times"));
        v[v.len() / 2]
    };
    Ok(med(&mut a) / med(&mut b))
}

/// Full grid over shapes × rank fractions, sorted by density ascending.
pub fn bench_grid(
    shapes: &[(usize, usize)],
    batch_l: usize,
    rank_fractions: &[f64],
    reps: usize,
    threads: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    if shapes.is_empty() || rank_fractions.is_empty() {
        return Err(Error::EmptyInput("bench_grid"));
    }
    for &f in rank_fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("rank fraction {f} outside (0, 1]")));
        }
    }
    let mut out = Vec::new();
    for &(m, n) in shapes {
        for &f in rank_fractions {
            let k_prime = ((f * m.min(n) as f64).round() as usize).clamp(1, m.min(n));
            out.push(bench_point(m, n, batch_l, k_prime, reps, threads, seed)?);
        }
    }
    out.sort_by(|a, b| {
        a.density
            .partial_cmp(&b.density)
            .expect("finite densities")
            .then(a.shape_m.cmp(&b.shape_m))
            .then(a.shape_n.cmp(&b.shape_n))
    });
    Ok(out)
}

pub fn csv_header() -> &'static str {
    "shape_m,shape_n,batch_l,k_prime,density,dense_ns_median,factored_ns_median,relative,theoretical_ratio,reps,threads"
}

pub fn csv_row(r: &BenchResult) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.shape_m,
        r.shape_n,
        r.batch_l,
        r.k_prime,
        r.density,
        r.dense_ns_median,
        r.factored_ns_median,
        r.relative,
        r.theoretical_ratio,
        r.reps,
        r.threads
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_rank_relative_near_one() {
        // identical arithmetic volume plus one extra pass; generous band
        let r = bench_point(64, 96, 32, 64, 30, 1, 0).unwrap();
        assert!(r.density == 1.0 || (64 * (64 + 96)) >= 64 * 96);
        assert!(r.relative > 0.5 && r.relative < 2.5, "relative {}", r.relative);
    }

    #[test]
    fn low_rank_beats_dense_on_small_shape() {
        let r = bench_point(256, 256, 64, 8, 30, 1, 0).unwrap();
        assert!(r.relative < 0.8, "relative {}", r.relative);
        assert!(r.theoretical_ratio < 0.07);
    }

    #[test]
    fn correctness_gate_passes_within_f32() {
        for k in [1, 7, 32] {
            bench_point(64, 48, 16, k, 30, 1, 1).unwrap();
        }
    }

    #[test]
    fn reps_floor_enforced() {
        let r = bench_point(32, 32, 8, 4, 3, 1, 0).unwrap();
        assert!(r.reps >= MIN_REPS);
    }

    #[test]
    fn dense_control_within_band() {
        let rel = dense_control(128, 128, 32, 30, 1, 0).unwrap();
        assert!((0.9..=1.1).contains(&rel), "control {rel}");
    }

    #[test]
    fn grid_sorted_by_density_and_validated() {
        let rs = bench_grid(&[(64, 64), (32, 96)], 16, &[0.1, 0.5, 1.0], 30, 1, 0).unwrap();
        assert_eq!(rs.len(), 6);
        for w in rs.windows(2) {
            assert!(w[0].density <= w[1].density);
        }
        assert!(bench_grid(&[(64, 64)], 16, &[0.0], 30, 1, 0).is_err());
        assert!(bench_grid(&[], 16, &[0.5], 30, 1, 0).is_err());
    }

    #[test]
    fn threaded_kernel_matches_single_thread() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f32> = (0..32 * 48).map(|_| rng.random::<f32>() - 0.5).collect();
        let b: Vec<f32> = (0..48 * 24).map(|_| rng.random::<f32>() - 0.5).collect();
        let mut c1 = vec![0.0f32; 32 * 24];
        let mut c4 = vec![0.0f32; 32 * 24];
        matmul_f32(&a, &b, 32, 48, 24, &mut c1, 1);
        matmul_f32(&a, &b, 32, 48, 24, &mut c4, 4);
        assert_eq!(c1, c4);
    }

    #[test]
    fn csv_row_has_schema_arity() {
        let r = bench_point(32, 32, 8, 4, 30, 1, 0).unwrap();
        assert_eq!(csv_header().split(',').count(), csv_row(&r).split(',').count());
    }
}
