//! Central-difference gradients: the independent oracle for `Graph::backward`.

use alloc::vec::Vec;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Default step for double-precision checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Entries whose analytic and numeric values are both below this magnitude
/// are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every entry `i` of `x`.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    let indices: Vec<usize> = (0..x.len()).collect();
    let values = finite_diff_at(f, x, eps, &indices)?;
    Tensor::new(x.shape(), values)
}

/// Central differences restricted to the listed flat indices.
pub fn finite_diff_at<T, F>(mut f: F, x: &Tensor<T>, eps: f64, indices: &[usize]) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    if !(eps > 0.0) {
        return Err(Error::BadStep);
    }
    let step = T::of(eps);
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        out.push((up - down) / (step + step));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

pub fn max_rel_err<T: Scalar>(analytic: &[T], numeric: &[T]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| rel_err(a.as_f64(), b.as_f64()))
        .fold(0.0, f64::max)
}
