//! Norm-based Rademacher complexity bounds for ReLU networks.

use crate::error::{Error, Result};
use crate::math::Matrix;

/// Upper bound on the empirical Rademacher complexity of depth-`D` ReLU
/// networks whose `j`-th weight matrix has Frobenius norm at most
/// `norms[j]`:
///
/// `(sqrt(2 ln D) + 1) * sqrt(mean_i |x_i|^2) / sqrt(N) * prod_j norms[j]`.
pub fn rademacher_bound(depth: usize, norms: &[f64], sample_x: &[Vec<f64>]) -> Result<f64> {
    if depth < 1 {
        return Err(Error::InvalidArgument("depth must be at least 1".into()));
    }
    if norms.len() != depth {
        return Err(Error::dim("layer norms", depth, norms.len()));
    }
    if let Some(bad) = norms.iter().find(|&&m| !(m > 0.0 && m.is_finite())) {
        return Err(Error::InvalidArgument(format!("layer norms must be positive, got {bad}")));
    }
    if sample_x.is_empty() {
        return Err(Error::InvalidArgument("the sample is empty".into()));
    }
    let n = sample_x.len() as f64;
    let mean_sq = sample_x
        .iter()
        .map(|x| x.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / n;
    if !mean_sq.is_finite() {
        return Err(Error::NonFinite("sample"));
    }
    let lead = (2.0 * (depth as f64).ln()).sqrt() + 1.0;
    Ok(lead * mean_sq.sqrt() / n.sqrt() * norms.iter().product::<f64>())
}

/// Ratio of the ASU-DNN bound to the F-DNN bound at equal entry bound and
/// total width: `K^(-D/2)`. Depth zero and a single alternative give one.
pub fn bound_ratio_asu_vs_f(depth: usize, alternatives: usize) -> f64 {
    if depth == 0 || alternatives <= 1 {
        return 1.0;
    }
    let k = alternatives as f64;
    let half = (depth / 2) as i32;
    let even = k.powi(half);
    if depth % 2 == 0 {
        1.0 / even
    } else {
        1.0 / (even * k.sqrt())
    }
}

/// Frobenius norms of the `D` layer matrices of a width-`T` network whose
/// entries all sit at the bound `c`. With `alternatives > 1` each layer is
/// block diagonal with one `T/K x T/K` block per alternative, which is the
/// ASU-DNN connectivity; otherwise it is dense.
pub fn entry_bounded_norms(depth: usize, width: usize, entry_bound: f64, alternatives: usize) -> Result<Vec<f64>> {
    if alternatives == 0 || width % alternatives != 0 {
        return Err(Error::InvalidArgument(format!(
            "width {width} does not split into {alternatives} equal blocks"
        )));
    }
    let block = width / alternatives;
    let mut w = Matrix::zeros(width, width);
    for r in 0..width {
        for c in 0..width {
            if r / block == c / block {
                w.set(r, c, entry_bound);
            }
        }
    }
    Ok(vec![w.frobenius_norm(); depth])
}

/// Frobenius norms of a model's weight matrices.
pub fn frobenius_norms(weights: &[&Matrix]) -> Vec<f64> {
    weights.iter().map(|w| w.frobenius_norm()).collect()
}
