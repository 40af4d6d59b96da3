//! Central finite-difference oracle, independent of the tape's adjoints.

use super::tensor::ParamSet;

/// Numerical gradient of `f` with respect to every scalar in `params`.
pub fn finite_difference(params: &ParamSet, h: f64, mut f: impl FnMut(&ParamSet) -> f64) -> Vec<Vec<f64>> {
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for slot in 0..params.len() {
        let n = params.get(slot).len();
        let mut g = vec![0.0; n];
        for (j, gj) in g.iter_mut().enumerate() {
            let x0 = params.get(slot).data()[j];
            work.get_mut(slot).data_mut()[j] = x0 + h;
            let up = f(&work);
            work.get_mut(slot).data_mut()[j] = x0 - h;
            let down = f(&work);
            work.get_mut(slot).data_mut()[j] = x0;
            *gj = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// `|a − b| / max(|a|, |b|)`, with the denominator floored at `1e-6` so
/// vanishing gradients are compared absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between analytic gradients stored on `params`
/// and a numerical gradient from [`finite_difference`].
pub fn max_relative_error(params: &ParamSet, numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (slot, num) in numeric.iter().enumerate() {
        let t = params.get(slot);
        let zeros = vec![0.0; t.len()];
        let ana = t.grad().unwrap_or(&zeros);
        for (a, n) in ana.iter().zip(num) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    worst
}
