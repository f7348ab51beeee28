use super::Matrix;
use crate::error::{Error, Result};

/// Central finite-difference gradient of a scalar function, one entry at a time.
pub fn fd_gradient<F>(f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> f64,
{
    assert!(h > 0.0, "fd_gradient: step size must be positive");
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.data().len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[idx] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numerical("fd_gradient", format!("non-finite f at entry {idx}")));
        }
        grad.data_mut()[idx] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
