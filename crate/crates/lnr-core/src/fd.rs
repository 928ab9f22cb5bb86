//! Central finite-difference utilities for validating analytic gradients.

use ndarray::{ArrayD, NdFloat};

/// Central-difference gradient of scalar `f` at `x`, perturbing every element.
pub fn central_grad<F: NdFloat>(
    mut f: impl FnMut(&ArrayD<F>) -> F,
    x: &ArrayD<F>,
    eps: F,
) -> ArrayD<F> {
    let mut g = ArrayD::<F>::zeros(x.raw_dim());
    let mut xp = x.clone();
    let two = F::from(2.0).unwrap();
    for idx in 0..x.len() {
        let orig = x.as_slice().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + eps;
        let hi = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - eps;
        let lo = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (hi - lo) / (two * eps);
    }
    g
}

/// Like [`central_grad`] but only for the given flat indices; other entries
/// of the result stay zero. Keeps FD checks on large parameter tensors cheap.
pub fn central_grad_at<F: NdFloat>(
    mut f: impl FnMut(&ArrayD<F>) -> F,
    x: &ArrayD<F>,
    eps: F,
    indices: &[usize],
) -> ArrayD<F> {
    let mut g = ArrayD::<F>::zeros(x.raw_dim());
    let mut xp = x.clone();
    let two = F::from(2.0).unwrap();
    for &idx in indices {
        let orig = x.as_slice().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + eps;
        let hi = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - eps;
        let lo = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (hi - lo) / (two * eps);
    }
    g
}

/// Worst relative disagreement between analytic and numeric gradients.
///
/// Per element, `|a − n|` is normalized by `max(|a|, |n|, 0.01·‖g‖∞)`; the
/// floor keeps near-zero entries from dominating while still scaling with
/// the gradient's magnitude.
pub fn max_rel_err<F: NdFloat>(analytic: &ArrayD<F>, numeric: &ArrayD<F>) -> F {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut scale = F::zero();
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        scale = scale.max(a.abs()).max(n.abs());
    }
    if scale == F::zero() {
        return F::zero();
    }
    let floor = scale * F::from(1e-2).unwrap();
    let mut worst = F::zero();
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(floor);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Worst relative disagreement restricted to the given flat indices.
pub fn max_rel_err_at<F: NdFloat>(analytic: &ArrayD<F>, numeric: &ArrayD<F>, indices: &[usize]) -> F {
    assert_eq!(analytic.shape(), numeric.shape());
    let a_s = analytic.as_slice().unwrap();
    let n_s = numeric.as_slice().unwrap();
    let mut scale = F::zero();
    for &i in indices {
        scale = scale.max(a_s[i].abs()).max(n_s[i].abs());
    }
    if scale == F::zero() {
        return F::zero();
    }
    let floor = scale * F::from(1e-2).unwrap();
    let mut worst = F::zero();
    for &i in indices {
        let denom = a_s[i].abs().max(n_s[i].abs()).max(floor);
        worst = worst.max((a_s[i] - n_s[i]).abs() / denom);
    }
    worst
}
