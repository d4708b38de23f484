//! Layer primitives shared by every model family.
//!
//! These are the value-level forms. The tape in [`super::tape`] records the
//! same computations over mini-batches and differentiates them.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::rng::RngStream;
use crate::error::{Error, Result};

/// Variance floor added inside batch normalization.
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Weight on the previous running statistic when folding in a new batch.
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;
/// Lower clamp on the chosen-class probability inside cross-entropy.
pub const PROBABILITY_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

fn check_finite(values: &[f64], context: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

pub fn relu(t: &[f64]) -> Result<Vec<f64>> {
    check_finite(t, "relu input")?;
    Ok(t.iter().map(|&v| v.max(0.0)).collect())
}

/// Softmax with max-subtraction.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax needs at least two utilities, got {}",
            v.len()
        )));
    }
    check_finite(v, "softmax input")?;
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `-log p_k` at the index `k` where `y` is one.
pub fn cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::dim("cross_entropy", p.len(), y.len()));
    }
    let ones: Vec<usize> = y
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect();
    let zeros = y.iter().filter(|&&v| v == 0.0).count();
    if ones.len() != 1 || zeros + 1 != y.len() {
        return Err(Error::InvalidArgument("target is not a one-hot vector".into()));
    }
    cross_entropy_at(p, ones[0])
}

/// `-log p_k` for a chosen index.
pub fn cross_entropy_at(p: &[f64], chosen: usize) -> Result<f64> {
    let pk = *p
        .get(chosen)
        .ok_or_else(|| Error::dim("cross_entropy", format!("index < {}", p.len()), chosen))?;
    Ok(-pk.max(PROBABILITY_FLOOR).ln())
}

/// He initialization: i.i.d. `N(0, 2 / fan_in)` with `fan_in = rows`.
///
/// Weight matrices are stored `fan_in x fan_out` so that a layer computes
/// `t * W` on row-major batches.
pub fn he_init(rows: usize, cols: usize, rng: &mut RngStream) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "he_init dimensions must be positive, got {rows}x{cols}"
        )));
    }
    let std = (2.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| std * rng.standard_normal()).collect();
    Matrix::from_vec(rows, cols, data)
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("dropout rate must lie in [0, 1), got {rate}")))
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate` and
/// `1 / (1 - rate)` otherwise.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut RngStream) -> Result<Matrix> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn dropout(t: &[f64], rate: f64, mode: Mode, rng: &mut RngStream) -> Result<Vec<f64>> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 || t.is_empty() {
        return Ok(t.to_vec());
    }
    let mask = dropout_mask(1, t.len(), rate, rng)?;
    Ok(t.iter().zip(mask.as_slice()).map(|(a, m)| a * m).collect())
}

/// Learned scale/shift plus running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub scale: Matrix,
    pub shift: Matrix,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormParams {
    pub fn new(features: usize) -> Self {
        BatchNormParams {
            scale: Matrix::filled(1, features, 1.0),
            shift: Matrix::zeros(1, features),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
        }
    }

    pub fn features(&self) -> usize {
        self.scale.cols()
    }

    /// Fold one batch's statistics into the running estimates.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = BATCH_NORM_MOMENTUM;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }

    /// Eval-mode transform of a single row.
    pub fn apply_eval(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..x.len() {
            let xhat = (x[j] - self.running_mean[j]) / (self.running_var[j] + BATCH_NORM_EPS).sqrt();
            out[j] = self.scale.as_slice()[j] * xhat + self.shift.as_slice()[j];
        }
    }
}

/// Per-feature batch statistics (mean, biased variance).
pub fn batch_moments(batch: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = batch.rows() as f64;
    let cols = batch.cols();
    let mut mean = vec![0.0; cols];
    for r in 0..batch.rows() {
        for (m, v) in mean.iter_mut().zip(batch.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for r in 0..batch.rows() {
        for ((s, v), m) in var.iter_mut().zip(batch.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

/// Batch normalization over the rows of `batch`.
///
/// Train mode normalizes with the batch's own moments and folds them into
/// the running statistics; eval mode uses the running statistics only.
pub fn batch_norm(batch: &Matrix, params: &mut BatchNormParams, mode: Mode) -> Result<Matrix> {
    if batch.cols() != params.features() {
        return Err(Error::dim("batch_norm", params.features(), batch.cols()));
    }
    let mut out = Matrix::zeros(batch.rows(), batch.cols());
    match mode {
        Mode::Train => {
            if batch.rows() < 2 {
                return Err(Error::InvalidArgument(
                    "train-mode batch normalization needs at least two samples".into(),
                ));
            }
            let (mean, var) = batch_moments(batch);
            for r in 0..batch.rows() {
                let row = batch.row(r);
                let o = out.row_mut(r);
                for j in 0..row.len() {
                    let xhat = (row[j] - mean[j]) / (var[j] + BATCH_NORM_EPS).sqrt();
                    o[j] = params.scale.as_slice()[j] * xhat + params.shift.as_slice()[j];
                }
            }
            params.update_running(&mean, &var);
        }
        Mode::Eval => {
            for r in 0..batch.rows() {
                params.apply_eval(batch.row(r), out.row_mut(r));
            }
        }
    }
    Ok(out)
}
