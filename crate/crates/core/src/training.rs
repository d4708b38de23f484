//! Empirical risk minimization with mini-batch SGD, and evaluation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{ChoiceDataset, Standardizer};
use crate::error::{Error, Result};
use crate::math::{cross_entropy_at, Matrix, RngStream, Tape};
use crate::models::{ArchSpec, ChoiceModel, InputDims, ModelParams, Pass, Role};

/// One point of the hyperparameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub arch: ArchSpec,
    /// L1 penalty weight.
    pub l1: f64,
    /// Squared-L2 penalty weight.
    pub l2: f64,
    pub dropout: f64,
    pub batch_norm: bool,
    pub learning_rate: f64,
    pub num_iterations: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_true() -> bool {
    true
}

impl HyperConfig {
    /// Plain settings for the linear models: no penalty, no dropout.
    pub fn linear(arch: ArchSpec, learning_rate: f64, num_iterations: usize, batch_size: usize) -> Self {
        HyperConfig {
            arch,
            l1: 0.0,
            l2: 0.0,
            dropout: 0.0,
            batch_norm: false,
            learning_rate,
            num_iterations,
            batch_size,
            seed: 0,
            standardize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for (name, v) in [("l1", self.l1), ("l2", self.l2), ("learning_rate", self.learning_rate)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.num_iterations < 1 {
            return bad("num_iterations must be at least 1".into());
        }
        if self.batch_size < 1 || (self.batch_norm && self.batch_size < 2) {
            return bad(format!(
                "batch_size {} is too small{}",
                self.batch_size,
                if self.batch_norm { " for batch normalization" } else { "" }
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    /// Mean mini-batch cross-entropy since the previous record.
    pub train_loss: f64,
    /// Penalty term at this iteration.
    pub penalty: f64,
    /// Validation accuracy, when a validation split was supplied.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainingHistory {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "train_loss", "penalty", "val_accuracy"])?;
        for r in &self.records {
            out.write_record([
                r.iteration.to_string(),
                crate::data::format_float(r.train_loss),
                crate::data::format_float(r.penalty),
                r.val_accuracy.map(crate::data::format_float).unwrap_or_default(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("history", e))?;
        Ok(())
    }
}

/// A fitted model together with the input transform it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: ChoiceModel,
    pub standardizer: Standardizer,
    pub config: HyperConfig,
    pub history: TrainingHistory,
}

impl TrainedModel {
    /// Eval-mode probabilities for raw-unit data.
    pub fn predict(&self, raw: &ChoiceDataset) -> Result<Matrix> {
        self.model.predict(&self.standardizer.apply(raw)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub mean_cross_entropy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Weight penalty `l1 * sum |w| + l2 * sum w^2` over weight matrices only.
pub fn penalty(params: &ModelParams, l1: f64, l2: f64) -> f64 {
    params
        .tensors()
        .into_iter()
        .filter(|(r, _)| *r == Role::Weight)
        .map(|(_, m)| l1 * m.l1_norm() + l2 * m.sum_squares())
        .sum()
}

/// Mean eval-mode cross-entropy over `ds` plus the weight penalty.
pub fn erm_objective(model: &ChoiceModel, ds: &ChoiceDataset, l1: f64, l2: f64) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("objective over an empty batch".into()));
    }
    let p = model.predict(ds)?;
    let ce = mean_cross_entropy(&p, ds.choices())?;
    Ok(ce + penalty(&model.params, l1, l2))
}

fn mean_cross_entropy(p: &Matrix, labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        total += cross_entropy_at(p.row(r), y)?;
    }
    Ok(total / labels.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Evaluate a model on data already in its input units.
pub fn evaluate_model(model: &ChoiceModel, ds: &ChoiceDataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty split".into()));
    }
    if InputDims::of(ds) != model.dims {
        return Err(Error::dim(
            "evaluation data",
            format!("{:?}", model.dims),
            format!("{:?}", InputDims::of(ds)),
        ));
    }
    let p = model.predict(ds)?;
    let k = model.dims.alternatives;
    let mut confusion = vec![vec![0; k]; k];
    let mut correct = 0;
    for (r, &y) in ds.choices().iter().enumerate() {
        let pred = argmax(p.row(r));
        confusion[y][pred] += 1;
        correct += usize::from(pred == y);
    }
    Ok(EvalReport {
        n: ds.len(),
        accuracy: correct as f64 / ds.len() as f64,
        mean_cross_entropy: mean_cross_entropy(&p, ds.choices())?,
        confusion,
    })
}

/// Evaluate a trained model on raw-unit data.
pub fn evaluate(trained: &TrainedModel, raw: &ChoiceDataset) -> Result<EvalReport> {
    evaluate_model(&trained.model, &trained.standardizer.apply(raw)?)
}

/// Number of history records aimed for over a run.
const HISTORY_POINTS: usize = 50;

/// Train with `cfg.num_iterations` SGD steps on mini-batches drawn with
/// replacement. Inputs are raw units; when `cfg.standardize` is set the
/// standardizer is fitted on `train` and kept with the model.
pub fn train(train: &ChoiceDataset, val: Option<&ChoiceDataset>, cfg: &HyperConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let standardizer = if cfg.standardize {
        Standardizer::fit(train)?
    } else {
        Standardizer::identity(train)
    };
    let train_s = standardizer.apply(train)?;
    let val_s = val.map(|v| standardizer.apply(v)).transpose()?;
    let dims = InputDims::of(train);
    let mut model = ChoiceModel::new(
        cfg.arch.clone(),
        dims,
        cfg.batch_norm,
        &mut RngStream::named(cfg.seed, "init"),
    )?;
    let history = fit(&mut model, &train_s, val_s.as_ref(), cfg)?;
    Ok(TrainedModel {
        model,
        standardizer,
        config: cfg.clone(),
        history,
    })
}

/// Run SGD on `model` in place over data already in model units.
pub fn fit(
    model: &mut ChoiceModel,
    train: &ChoiceDataset,
    val: Option<&ChoiceDataset>,
    cfg: &HyperConfig,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    let mut batch_rng = RngStream::named(cfg.seed, "batches");
    let mut dropout_rng = RngStream::named(cfg.seed, "dropout");
    let log_every = (cfg.num_iterations / HISTORY_POINTS).max(1);
    let mut history = TrainingHistory::default();
    let mut window_loss = 0.0;
    let mut window_len = 0usize;
    let n = train.len();
    let mut indices = vec![0usize; cfg.batch_size];

    for iteration in 1..=cfg.num_iterations {
        indices.iter_mut().for_each(|i| *i = batch_rng.below(n));
        let batch = train.batch(&indices);
        let mut tape = Tape::new();
        let mut nodes = model.bind(&mut tape);
        let loss = model.record_loss(
            &mut tape,
            &mut nodes,
            &batch,
            Pass::Train {
                dropout: cfg.dropout,
                rng: &mut dropout_rng,
            },
        )?;
        let pen = ChoiceModel::record_penalty(&mut tape, &nodes, cfg.l1, cfg.l2)?;
        let objective = match pen {
            Some(p) => tape.weighted_sum(vec![(1.0, loss), (1.0, p)])?,
            None => loss,
        };
        let loss_value = tape.value(loss).as_slice()[0];
        let pen_value = pen.map(|p| tape.value(p).as_slice()[0]).unwrap_or(0.0);
        if !(loss_value + pen_value).is_finite() {
            return Err(Error::Divergence { iteration });
        }
        let grads = tape.backward(objective)?;
        if cfg.learning_rate != 0.0 {
            for ((_, w), (_, id)) in model.params.tensors_mut().into_iter().zip(nodes.tensors()) {
                if let Some(g) = grads.get(*id) {
                    w.add_scaled(-cfg.learning_rate, g);
                }
            }
        }
        model.params.copy_running_from(&nodes);
        if !model.params.is_finite() {
            return Err(Error::Divergence { iteration });
        }

        window_loss += loss_value;
        window_len += 1;
        if iteration % log_every == 0 || iteration == cfg.num_iterations {
            let val_accuracy = val.map(|v| evaluate_model(model, v).map(|r| r.accuracy)).transpose()?;
            history.records.push(HistoryRecord {
                iteration,
                train_loss: window_loss / window_len as f64,
                penalty: pen_value,
                val_accuracy,
            });
            window_loss = 0.0;
            window_len = 0;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Net;

    fn separable(n: usize, seed: u64) -> ChoiceDataset {
        let mut rng = RngStream::new(seed, 0);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a = rng.standard_normal();
            let b = rng.standard_normal();
            x.extend([a, b]);
            y.push(if a < b { 0 } else { 1 });
        }
        ChoiceDataset::from_parts(
            vec!["a".into(), "b".into()],
            vec!["cost".into()],
            vec![],
            vec![true, true],
            x,
            vec![],
            y,
        )
        .unwrap()
    }

    #[test]
    fn mnl_learns_separable_data() {
        let ds = separable(200, 1);
        let cfg = HyperConfig::linear(ArchSpec::Mnl, 0.01, 5000, 50);
        let m = train(&ds, None, &cfg).unwrap();
        let r = evaluate(&m, &ds).unwrap();
        assert!(r.accuracy >= 0.95, "accuracy {}", r.accuracy);
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 200);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = separable(100, 2);
        let cfg = HyperConfig {
            dropout: 0.2,
            batch_norm: true,
            l1: 1e-4,
            l2: 1e-3,
            seed: 5,
            ..HyperConfig::linear(ArchSpec::Fdnn { depth: 2, width: 6 }, 0.05, 200, 16)
        };
        let a = train(&ds, Some(&ds), &cfg).unwrap();
        let b = train(&ds, Some(&ds), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_keeps_initial_weights() {
        let ds = separable(50, 3);
        let cfg = HyperConfig::linear(ArchSpec::Fdnn { depth: 1, width: 4 }, 0.0, 20, 10);
        let m = train(&ds, None, &cfg).unwrap();
        let init = Net::init(&cfg.arch, InputDims::of(&ds), false, &mut RngStream::named(0, "init")).unwrap();
        assert_eq!(m.model.params, init);
    }

    #[test]
    fn objective_examples() {
        let ds = separable(30, 4);
        let dims = InputDims::of(&ds);
        let mut m = ChoiceModel::new(ArchSpec::Mnl, dims, false, &mut RngStream::new(0, 0)).unwrap();
        let ce = erm_objective(&m, &ds, 0.0, 0.0).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-15);
        assert!((erm_objective(&m, &ds, 1.0, 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        if let Net::Linear(p) = &mut m.params {
            p.beta[0] = Matrix::scalar(2.0);
        }
        assert!((penalty(&m.params, 0.5, 0.1) - 1.4).abs() < 1e-15);
    }

    #[test]
    fn uniform_model_predicts_first_alternative() {
        let ds = separable(40, 5);
        let m = ChoiceModel::new(ArchSpec::Mnl, InputDims::of(&ds), false, &mut RngStream::new(0, 0)).unwrap();
        let r = evaluate_model(&m, &ds).unwrap();
        assert_eq!(r.accuracy, ds.shares()[0]);
    }

    #[test]
    fn history_is_logged_and_exported() {
        let ds = separable(60, 6);
        let cfg = HyperConfig::linear(ArchSpec::Mnl, 0.1, 100, 10);
        let m = train(&ds, Some(&ds), &cfg).unwrap();
        let its: Vec<usize> = m.history.records.iter().map(|r| r.iteration).collect();
        assert_eq!(its.len(), 50);
        assert!(its.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*its.last().unwrap(), 100);
        let mut buf = Vec::new();
        m.history.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,train_loss,penalty,val_accuracy\n"));
    }

    #[test]
    fn invalid_configs() {
        let base = HyperConfig::linear(ArchSpec::Mnl, 0.1, 10, 10);
        assert!(HyperConfig { dropout: 1.0, ..base.clone() }.validate().is_err());
        assert!(HyperConfig { num_iterations: 0, ..base.clone() }.validate().is_err());
        assert!(HyperConfig { batch_norm: true, batch_size: 1, ..base.clone() }.validate().is_err());
        assert!(HyperConfig { l1: -1.0, ..base }.validate().is_err());
    }

    #[test]
    fn divergence_reports_iteration() {
        let ds = separable(50, 7);
        // the L2 step multiplies every weight by (1 - 2 * lr * l2) = -199
        let cfg = HyperConfig {
            l2: 10.0,
            ..HyperConfig::linear(ArchSpec::Fdnn { depth: 1, width: 4 }, 10.0, 1000, 10)
        };
        match train(&ds, None, &cfg) {
            Err(Error::Divergence { iteration }) => assert!(iteration > 1 && iteration < 1000),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
