//! Random hyperparameter search with k-fold cross-validation.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{format_float, ChoiceDataset};
use crate::error::{Error, Result};
use crate::math::RngStream;
use crate::models::{ArchSpec, Family};
use crate::training::{evaluate, train, HyperConfig, TrainedModel};

/// Candidate values for every searched hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSpace {
    /// F-DNN depth `M`.
    pub fdnn_depth: Vec<usize>,
    /// F-DNN width `n`.
    pub fdnn_width: Vec<usize>,
    /// ASU-DNN depth before the alternative-specific merge, `M1`.
    pub asu_pre_depth: Vec<usize>,
    /// ASU-DNN depth after the merge, `M2`.
    pub asu_post_depth: Vec<usize>,
    pub asu_pre_width: Vec<usize>,
    pub asu_post_width: Vec<usize>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub dropout: Vec<f64>,
    pub batch_norm: Vec<bool>,
    pub learning_rate: Vec<f64>,
    pub num_iterations: Vec<usize>,
    pub batch_size: Vec<usize>,
}

impl HyperSpace {
    /// The full grid of candidate values.
    pub fn full() -> Self {
        let penalties = vec![1.0, 0.5, 0.1, 0.01, 1e-3, 1e-5, 1e-10, 1e-20];
        HyperSpace {
            fdnn_depth: (1..=12).collect(),
            fdnn_width: vec![60, 120, 240, 360, 480, 600],
            asu_pre_depth: (0..=6).collect(),
            asu_post_depth: (0..=6).collect(),
            asu_pre_width: vec![10, 20, 40, 60, 80],
            asu_post_width: vec![10, 20, 40, 60, 80, 100],
            l1: penalties.clone(),
            l2: penalties,
            dropout: vec![0.5, 0.1, 0.01, 1e-3, 1e-5],
            batch_norm: vec![true, false],
            learning_rate: vec![0.5, 0.1, 0.01, 1e-3, 1e-5],
            num_iterations: vec![500, 1000, 5000, 10000, 20000],
            batch_size: vec![50, 100, 200, 500, 1000],
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let space: HyperSpace = serde_json::from_str(&text)?;
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        let lists: [(&str, bool); 13] = [
            ("fdnn_depth", self.fdnn_depth.is_empty()),
            ("fdnn_width", self.fdnn_width.is_empty()),
            ("asu_pre_depth", self.asu_pre_depth.is_empty()),
            ("asu_post_depth", self.asu_post_depth.is_empty()),
            ("asu_pre_width", self.asu_pre_width.is_empty()),
            ("asu_post_width", self.asu_post_width.is_empty()),
            ("l1", self.l1.is_empty()),
            ("l2", self.l2.is_empty()),
            ("dropout", self.dropout.is_empty()),
            ("batch_norm", self.batch_norm.is_empty()),
            ("learning_rate", self.learning_rate.is_empty()),
            ("num_iterations", self.num_iterations.is_empty()),
            ("batch_size", self.batch_size.is_empty()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, empty)| *empty) {
            return Err(Error::InvalidArgument(format!("hyperparameter list `{name}` is empty")));
        }
        if self.fdnn_depth.contains(&0) || self.fdnn_width.contains(&0) {
            return Err(Error::InvalidArgument("F-DNN depth and width must be positive".into()));
        }
        if self.asu_pre_width.contains(&0) || self.asu_post_width.contains(&0) {
            return Err(Error::InvalidArgument("ASU-DNN widths must be positive".into()));
        }
        if self.num_iterations.contains(&0) || self.batch_size.contains(&0) {
            return Err(Error::InvalidArgument("iterations and batch sizes must be positive".into()));
        }
        let bad_penalty = self.l1.iter().chain(&self.l2).any(|v| !(*v >= 0.0 && v.is_finite()));
        let bad_rate = self.learning_rate.iter().any(|v| !(*v >= 0.0 && v.is_finite()));
        let bad_dropout = self.dropout.iter().any(|v| !(0.0..1.0).contains(v));
        if bad_penalty || bad_rate || bad_dropout {
            return Err(Error::InvalidArgument("hyperparameter values out of range".into()));
        }
        Ok(())
    }
}

fn pick<T: Copy>(values: &[T], rng: &mut RngStream) -> T {
    values[rng.below(values.len())]
}

/// Draw one configuration, each hyperparameter independently and uniformly
/// from its list. MNL draws only the optimizer settings. The returned seed
/// is zero; callers assign one.
pub fn sample_config(space: &HyperSpace, family: Family, rng: &mut RngStream) -> Result<HyperConfig> {
    space.validate()?;
    let arch = match family {
        Family::Fdnn => ArchSpec::Fdnn {
            depth: pick(&space.fdnn_depth, rng),
            width: pick(&space.fdnn_width, rng),
        },
        Family::Asudnn => ArchSpec::Asudnn {
            pre_depth: pick(&space.asu_pre_depth, rng),
            post_depth: pick(&space.asu_post_depth, rng),
            pre_width: pick(&space.asu_pre_width, rng),
            post_width: pick(&space.asu_post_width, rng),
        },
        Family::Mnl => {
            let lr = pick(&space.learning_rate, rng);
            let iters = pick(&space.num_iterations, rng);
            let batch = pick(&space.batch_size, rng);
            return Ok(HyperConfig::linear(ArchSpec::Mnl, lr, iters, batch));
        }
        Family::Nl => {
            return Err(Error::InvalidArgument(
                "nested logit needs a nest partition and is not searched".into(),
            ))
        }
    };
    Ok(HyperConfig {
        arch,
        l1: pick(&space.l1, rng),
        l2: pick(&space.l2, rng),
        dropout: pick(&space.dropout, rng),
        batch_norm: pick(&space.batch_norm, rng),
        learning_rate: pick(&space.learning_rate, rng),
        num_iterations: pick(&space.num_iterations, rng),
        batch_size: pick(&space.batch_size, rng),
        seed: 0,
        standardize: true,
    })
}

/// Seeded shuffle of `0..n` cut into `k` contiguous folds.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("cross-validation needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} observations cannot fill {k} folds")));
    }
    let perm = RngStream::named(seed, "folds").permutation(n);
    Ok((0..k).map(|f| perm[f * n / k..(f + 1) * n / k].to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

/// Training seed of fold `f` for a config seeded with `seed`.
fn fold_seed(seed: u64, fold: usize) -> u64 {
    RngStream::new(seed, 0).derive_seed("fold", fold as u64)
}

/// Train one model per fold, each on the other `k - 1` folds.
fn fold_models(cfg: &HyperConfig, ds: &ChoiceDataset, folds: &[Vec<usize>]) -> Vec<Result<(TrainedModel, f64)>> {
    (0..folds.len())
        .map(|f| {
            let rest: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, idx)| idx.iter().copied())
                .collect();
            let held = ds.subset(&folds[f]);
            let cfg_f = HyperConfig {
                seed: fold_seed(cfg.seed, f),
                ..cfg.clone()
            };
            let model = train(&ds.subset(&rest), None, &cfg_f)?;
            let acc = evaluate(&model, &held)?.accuracy;
            Ok((model, acc))
        })
        .collect()
}

/// k-fold cross-validated accuracy. Fold membership comes from
/// `fold_seed`; each fold's model is trained from a seed derived from
/// `cfg.seed`.
pub fn cross_validate(cfg: &HyperConfig, ds: &ChoiceDataset, k: usize, fold_seed: u64) -> Result<CvResult> {
    let folds = kfold_indices(ds.len(), k, fold_seed)?;
    let fold_accuracies = fold_models(cfg, ds, &folds)
        .into_iter()
        .map(|r| r.map(|(_, a)| a))
        .collect::<Result<Vec<f64>>>()?;
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / k as f64;
    Ok(CvResult {
        fold_accuracies,
        mean_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub config: HyperConfig,
    pub fold_accuracies: Vec<f64>,
    /// Test accuracy of each fold's model.
    pub fold_test_accuracies: Vec<f64>,
    pub mean_cv_accuracy: f64,
    /// Mean test accuracy over the fold models.
    pub test_accuracy: f64,
    /// Some fold diverged; both accuracies are then zero.
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub family: Family,
    /// Sorted by mean CV accuracy, best first; ties keep trial order.
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub trials: usize,
    pub folds: usize,
    pub parallelism: usize,
    pub seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            trials: 50,
            folds: 5,
            parallelism: 1,
            seed: 0,
        }
    }
}

fn run_trial(
    trial: usize,
    cfg: HyperConfig,
    trainval: &ChoiceDataset,
    test: &ChoiceDataset,
    folds: &[Vec<usize>],
) -> Result<TrialRecord> {
    let k = folds.len();
    let mut fold_accuracies = Vec::with_capacity(k);
    let mut fold_test_accuracies = Vec::with_capacity(k);
    let mut diverged = false;
    for r in fold_models(&cfg, trainval, folds) {
        match r {
            Ok((model, acc)) => {
                fold_accuracies.push(acc);
                fold_test_accuracies.push(evaluate(&model, test)?.accuracy);
            }
            Err(Error::Divergence { .. }) => {
                diverged = true;
                fold_accuracies.push(0.0);
                fold_test_accuracies.push(0.0);
            }
            Err(e) => return Err(e),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mean_cv_accuracy, test_accuracy) = if diverged {
        (0.0, 0.0)
    } else {
        (mean(&fold_accuracies), mean(&fold_test_accuracies))
    };
    Ok(TrialRecord {
        trial,
        config: cfg,
        fold_accuracies,
        fold_test_accuracies,
        mean_cv_accuracy,
        test_accuracy,
        diverged,
    })
}

/// The configs a search with these options evaluates, in trial order.
pub fn trial_configs(space: &HyperSpace, family: Family, opts: &SearchOptions) -> Result<Vec<HyperConfig>> {
    let root = RngStream::named(opts.seed, family.name());
    (0..opts.trials)
        .map(|i| {
            let mut rng = root.fork("trial", i as u64);
            let mut cfg = sample_config(space, family, &mut rng)?;
            cfg.seed = root.derive_seed("trial-seed", i as u64);
            Ok(cfg)
        })
        .collect()
}

/// Cross-validate `opts.trials` sampled configs on `trainval`, score each
/// on `test`, and rank them. Every trial owns streams keyed by its index,
/// so the result does not depend on `opts.parallelism`.
pub fn random_search(
    space: &HyperSpace,
    family: Family,
    trainval: &ChoiceDataset,
    test: &ChoiceDataset,
    opts: &SearchOptions,
) -> Result<Leaderboard> {
    if opts.trials < 1 {
        return Err(Error::InvalidArgument("a search needs at least one trial".into()));
    }
    if opts.parallelism < 1 {
        return Err(Error::InvalidArgument("parallelism must be at least 1".into()));
    }
    let configs = trial_configs(space, family, opts)?;
    let folds = kfold_indices(trainval.len(), opts.folds, opts.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    let records: Vec<TrialRecord> = pool.install(|| {
        configs
            .into_par_iter()
            .enumerate()
            .map(|(i, cfg)| run_trial(i, cfg, trainval, test, &folds))
            .collect::<Result<_>>()
    })?;
    Ok(Leaderboard::new(family, records))
}

impl Leaderboard {
    pub fn new(family: Family, mut trials: Vec<TrialRecord>) -> Self {
        trials.sort_by(|a, b| {
            b.mean_cv_accuracy
                .total_cmp(&a.mean_cv_accuracy)
                .then(a.trial.cmp(&b.trial))
        });
        Leaderboard { family, trials }
    }

    pub fn best(&self) -> Option<&TrialRecord> {
        self.trials.first()
    }

    pub fn top(&self, n: usize) -> &[TrialRecord] {
        &self.trials[..n.min(self.trials.len())]
    }

    /// Mean test accuracy of the `n` best trials.
    pub fn top_mean_test_accuracy(&self, n: usize) -> f64 {
        let top = self.top(n);
        top.iter().map(|t| t.test_accuracy).sum::<f64>() / top.len().max(1) as f64
    }

    /// Mean CV accuracy of the `n` best trials.
    pub fn top_mean_cv_accuracy(&self, n: usize) -> f64 {
        let top = self.top(n);
        top.iter().map(|t| t.mean_cv_accuracy).sum::<f64>() / top.len().max(1) as f64
    }

    /// One row per (trial, fold).
    pub fn write_folds_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["trial", "fold", "val_accuracy", "test_accuracy"])?;
        for t in &self.trials {
            for (f, (v, s)) in t.fold_accuracies.iter().zip(&t.fold_test_accuracies).enumerate() {
                out.write_record([t.trial.to_string(), f.to_string(), format_float(*v), format_float(*s)])?;
            }
        }
        out.flush().map_err(|e| Error::io("folds csv", e))?;
        Ok(())
    }

    /// One row per trial in rank order.
    pub fn write_summary_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["rank", "trial", "family", "diverged", "mean_cv_accuracy", "test_accuracy"];
        header.extend(HYPERPARAMETERS.iter().map(|h| h.name));
        header.push("seed");
        out.write_record(&header)?;
        for (rank, t) in self.trials.iter().enumerate() {
            let mut row = vec![
                (rank + 1).to_string(),
                t.trial.to_string(),
                self.family.to_string(),
                t.diverged.to_string(),
                format_float(t.mean_cv_accuracy),
                format_float(t.test_accuracy),
            ];
            for h in HYPERPARAMETERS {
                row.push((h.value)(&t.config).map(format_float).unwrap_or_default());
            }
            row.push(t.config.seed.to_string());
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("summary csv", e))?;
        Ok(())
    }
}

/// Sorted-accuracy curves of several searches side by side: rank, family,
/// validation and test accuracy.
pub fn write_curves_csv(boards: &[&Leaderboard], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["family", "rank", "trial", "mean_cv_accuracy", "test_accuracy"])?;
    for b in boards {
        for (rank, t) in b.trials.iter().enumerate() {
            out.write_record([
                b.family.to_string(),
                (rank + 1).to_string(),
                t.trial.to_string(),
                format_float(t.mean_cv_accuracy),
                format_float(t.test_accuracy),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("curves csv", e))?;
    Ok(())
}

/// A searchable hyperparameter: its report name, whether its grid is
/// geometric, and how to read it off a config.
struct Hyperparameter {
    name: &'static str,
    aliases: &'static [&'static str],
    geometric: bool,
    value: fn(&HyperConfig) -> Option<f64>,
}

fn fdnn(cfg: &HyperConfig) -> Option<(usize, usize)> {
    match cfg.arch {
        ArchSpec::Fdnn { depth, width } => Some((depth, width)),
        _ => None,
    }
}

fn asu(cfg: &HyperConfig) -> Option<[usize; 4]> {
    match cfg.arch {
        ArchSpec::Asudnn {
            pre_depth,
            post_depth,
            pre_width,
            post_width,
        } => Some([pre_depth, post_depth, pre_width, post_width]),
        _ => None,
    }
}

fn is_dnn(cfg: &HyperConfig) -> bool {
    cfg.arch.family().is_dnn()
}

const HYPERPARAMETERS: [Hyperparameter; 13] = [
    Hyperparameter {
        name: "depth",
        aliases: &["m"],
        geometric: false,
        value: |c| fdnn(c).map(|d| d.0 as f64),
    },
    Hyperparameter {
        name: "width",
        aliases: &["n"],
        geometric: false,
        value: |c| fdnn(c).map(|d| d.1 as f64),
    },
    Hyperparameter {
        name: "pre_depth",
        aliases: &["m1"],
        geometric: false,
        value: |c| asu(c).map(|a| a[0] as f64),
    },
    Hyperparameter {
        name: "post_depth",
        aliases: &["m2"],
        geometric: false,
        value: |c| asu(c).map(|a| a[1] as f64),
    },
    Hyperparameter {
        name: "pre_width",
        aliases: &["n1"],
        geometric: false,
        value: |c| asu(c).map(|a| a[2] as f64),
    },
    Hyperparameter {
        name: "post_width",
        aliases: &["n2"],
        geometric: false,
        value: |c| asu(c).map(|a| a[3] as f64),
    },
    Hyperparameter {
        name: "l1",
        aliases: &["gamma1"],
        geometric: true,
        value: |c| is_dnn(c).then_some(c.l1),
    },
    Hyperparameter {
        name: "l2",
        aliases: &["gamma2"],
        geometric: true,
        value: |c| is_dnn(c).then_some(c.l2),
    },
    Hyperparameter {
        name: "dropout",
        aliases: &[],
        geometric: true,
        value: |c| is_dnn(c).then_some(c.dropout),
    },
    Hyperparameter {
        name: "batch_norm",
        aliases: &["bn"],
        geometric: false,
        value: |c| is_dnn(c).then_some(f64::from(u8::from(c.batch_norm))),
    },
    Hyperparameter {
        name: "learning_rate",
        aliases: &["lr"],
        geometric: true,
        value: |c| Some(c.learning_rate),
    },
    Hyperparameter {
        name: "num_iterations",
        aliases: &["iterations"],
        geometric: false,
        value: |c| Some(c.num_iterations as f64),
    },
    Hyperparameter {
        name: "batch_size",
        aliases: &["batch"],
        geometric: false,
        value: |c| Some(c.batch_size as f64),
    },
];

/// Names accepted by [`hyperparameter_report`].
pub fn hyperparameter_names() -> impl Iterator<Item = &'static str> {
    HYPERPARAMETERS.iter().map(|h| h.name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Test,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSummary {
    pub value: f64,
    pub count: usize,
    pub max: f64,
    pub mean: f64,
}

/// Least-squares fit `accuracy = c0 + c1 t + c2 t^2`, where `t` is the
/// value or its base-10 log on geometric grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub coefficients: [f64; 3],
    /// Stationary point in original units, when the curvature is nonzero.
    pub vertex: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterReport {
    pub name: String,
    pub metric: Metric,
    pub log_scale: bool,
    /// One entry per distinct value, ascending.
    pub values: Vec<ValueSummary>,
    /// `None` when fewer than three distinct values were tried.
    pub fit: Option<QuadraticFit>,
    pub insufficient_support: bool,
}

/// Per-value maximum and mean accuracy of one hyperparameter, plus a
/// quadratic trend over all trials. Diverged trials are left out.
pub fn hyperparameter_report(board: &Leaderboard, name: &str, metric: Metric) -> Result<HyperparameterReport> {
    if board.trials.is_empty() {
        return Err(Error::InvalidArgument("the leaderboard is empty".into()));
    }
    let key = name.to_ascii_lowercase();
    let h = HYPERPARAMETERS
        .iter()
        .find(|h| h.name == key || h.aliases.contains(&key.as_str()))
        .ok_or_else(|| Error::InvalidArgument(format!("unknown hyperparameter `{name}`")))?;
    let mut points: Vec<(f64, f64)> = board
        .trials
        .iter()
        .filter(|t| !t.diverged)
        .filter_map(|t| {
            let acc = match metric {
                Metric::Test => t.test_accuracy,
                Metric::Validation => t.mean_cv_accuracy,
            };
            (h.value)(&t.config).map(|v| (v, acc))
        })
        .collect();
    if points.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no completed trial in the leaderboard uses `{}`",
            h.name
        )));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut values: Vec<ValueSummary> = Vec::new();
    for &(v, acc) in &points {
        match values.last_mut() {
            Some(s) if s.value == v => {
                s.count += 1;
                s.max = s.max.max(acc);
                s.mean += acc;
            }
            _ => values.push(ValueSummary {
                value: v,
                count: 1,
                max: acc,
                mean: acc,
            }),
        }
    }
    values.iter_mut().for_each(|s| s.mean /= s.count as f64);

    let log_scale = h.geometric && points.iter().all(|p| p.0 > 0.0);
    let t = |v: f64| if log_scale { v.log10() } else { v };
    let insufficient_support = values.len() < 3;
    let fit = if insufficient_support {
        None
    } else {
        let xs: Vec<(f64, f64)> = points.iter().map(|&(v, a)| (t(v), a)).collect();
        quadratic_fit(&xs).map(|c| QuadraticFit {
            coefficients: c,
            vertex: (c[2] != 0.0).then(|| {
                let tv = -c[1] / (2.0 * c[2]);
                if log_scale {
                    10f64.powf(tv)
                } else {
                    tv
                }
            }),
        })
    };
    Ok(HyperparameterReport {
        name: h.name.to_string(),
        metric,
        log_scale,
        values,
        fit,
        insufficient_support,
    })
}

/// Ordinary least squares for `y = c0 + c1 x + c2 x^2`. The abscissae are
/// centered before solving the normal equations; `None` if singular.
pub fn quadratic_fit(points: &[(f64, f64)]) -> Option<[f64; 3]> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mut a = [[0.0f64; 4]; 3];
    for &(x, y) in points {
        let u = x - mx;
        let basis = [1.0, u, u * u];
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] += basis[r] * basis[c];
            }
            a[r][3] += basis[r] * y;
        }
    }
    // Gauss-Jordan with partial pivoting
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 * (1.0 + a[0][0]) {
            return None;
        }
        a.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..4 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let d: Vec<f64> = (0..3).map(|i| a[i][3] / a[i][i]).collect();
    // expand c0 + c1 (x - m) + c2 (x - m)^2
    Some([d[0] - d[1] * mx + d[2] * mx * mx, d[1] - 2.0 * d[2] * mx, d[2]])
}

impl HyperparameterReport {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["value", "count", "max", "mean", "fitted"])?;
        for s in &self.values {
            let fitted = self
                .fit
                .as_ref()
                .map(|f| {
                    let t = if self.log_scale { s.value.log10() } else { s.value };
                    format_float(f.coefficients[0] + f.coefficients[1] * t + f.coefficients[2] * t * t)
                })
                .unwrap_or_default();
            out.write_record([
                format_float(s.value),
                s.count.to_string(),
                format_float(s.max),
                format_float(s.mean),
                fitted,
            ])?;
        }
        out.flush().map_err(|e| Error::io("report csv", e))?;
        Ok(())
    }
}

/// Retrain the `n` best configs on all of `trainval`, e.g. for averaged
/// interpretation over top models.
pub fn refit_top(board: &Leaderboard, trainval: &ChoiceDataset, n: usize) -> Result<Vec<TrainedModel>> {
    board
        .top(n)
        .iter()
        .filter(|t| !t.diverged)
        .map(|t| train(trainval, None, &t.config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, DgpSpec, UtilityForm};

    fn singleton_space() -> HyperSpace {
        HyperSpace {
            fdnn_depth: vec![2],
            fdnn_width: vec![8],
            asu_pre_depth: vec![1],
            asu_post_depth: vec![0],
            asu_pre_width: vec![4],
            asu_post_width: vec![4],
            l1: vec![1e-5],
            l2: vec![1e-3],
            dropout: vec![1e-3],
            batch_norm: vec![false],
            learning_rate: vec![0.05],
            num_iterations: vec![50],
            batch_size: vec![32],
        }
    }

    #[test]
    fn full_space_is_valid() {
        let s = HyperSpace::full();
        s.validate().unwrap();
        assert_eq!(s.fdnn_depth.len(), 12);
        assert_eq!(s.asu_pre_depth, vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(s.l1.last(), Some(&1e-20));
    }

    #[test]
    fn degenerate_space_gives_unique_config() {
        let s = singleton_space();
        let mut rng = RngStream::new(1, 0);
        let a = sample_config(&s, Family::Fdnn, &mut rng).unwrap();
        let b = sample_config(&s, Family::Fdnn, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.arch, ArchSpec::Fdnn { depth: 2, width: 8 });
        assert_eq!(a.learning_rate, 0.05);
    }

    #[test]
    fn depth_draws_are_uniform() {
        let s = HyperSpace::full();
        let mut rng = RngStream::new(2, 0);
        let n = 10_000;
        let mut counts = [0usize; 12];
        for _ in 0..n {
            match sample_config(&s, Family::Fdnn, &mut rng).unwrap().arch {
                ArchSpec::Fdnn { depth, .. } => counts[depth - 1] += 1,
                _ => unreachable!(),
            }
        }
        let p = 1.0 / 12.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn empty_list_is_rejected() {
        let mut s = singleton_space();
        s.batch_size.clear();
        assert!(s.validate().is_err());
        assert!(sample_config(&s, Family::Asudnn, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn folds_partition_the_indices() {
        for (n, k) in [(10, 2), (11, 3), (100, 5), (5, 5)] {
            let folds = kfold_indices(n, k, 4).unwrap();
            assert_eq!(folds.len(), k);
            let mut all: Vec<usize> = folds.concat();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
        assert!(kfold_indices(10, 1, 0).is_err());
        assert!(kfold_indices(3, 5, 0).is_err());
    }

    #[test]
    fn zero_learning_rate_mnl_scores_fold_shares() {
        // with zero weights every prediction is the first alternative
        let ds = generate(&DgpSpec::binary([0.3, 0.0], 1.0), 200, &mut RngStream::new(5, 0)).unwrap();
        let cfg = HyperConfig::linear(ArchSpec::Mnl, 0.0, 1, 10);
        let cv = cross_validate(&cfg, &ds, 4, 9).unwrap();
        let folds = kfold_indices(ds.len(), 4, 9).unwrap();
        for (acc, idx) in cv.fold_accuracies.iter().zip(&folds) {
            let share = idx.iter().filter(|&&i| ds.choice(i) == 0).count() as f64 / idx.len() as f64;
            assert_eq!(*acc, share);
        }
    }

    #[test]
    fn leaderboard_is_sorted_with_index_ties() {
        let rec = |trial, acc| TrialRecord {
            trial,
            config: HyperConfig::linear(ArchSpec::Mnl, 0.1, 1, 1),
            fold_accuracies: vec![acc],
            fold_test_accuracies: vec![acc],
            mean_cv_accuracy: acc,
            test_accuracy: acc,
            diverged: false,
        };
        let b = Leaderboard::new(Family::Mnl, vec![rec(0, 0.5), rec(1, 0.7), rec(2, 0.5), rec(3, 0.9)]);
        let order: Vec<usize> = b.trials.iter().map(|t| t.trial).collect();
        assert_eq!(order, vec![3, 1, 0, 2]);
        assert!((b.top_mean_test_accuracy(2) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn search_is_independent_of_parallelism() {
        let spec = DgpSpec::travel_modes(UtilityForm::Linear);
        let ds = generate(&spec, 120, &mut RngStream::new(6, 0)).unwrap();
        let test = generate(&spec, 60, &mut RngStream::new(7, 0)).unwrap();
        let mut space = singleton_space();
        space.asu_pre_depth = vec![0, 1, 2];
        space.learning_rate = vec![0.01, 0.1];
        let mut opts = SearchOptions {
            trials: 4,
            folds: 3,
            parallelism: 1,
            seed: 11,
        };
        let a = random_search(&space, Family::Asudnn, &ds, &test, &opts).unwrap();
        opts.parallelism = 3;
        let b = random_search(&space, Family::Asudnn, &ds, &test, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials.len(), 4);
        let mut csv_a = Vec::new();
        a.write_summary_csv(&mut csv_a).unwrap();
        let mut csv_b = Vec::new();
        b.write_summary_csv(&mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn diverged_trials_stay_flagged() {
        let ds = generate(&DgpSpec::binary([0.0, 0.0], 1.0), 60, &mut RngStream::new(8, 0)).unwrap();
        let mut space = singleton_space();
        space.learning_rate = vec![10.0];
        space.l2 = vec![10.0];
        space.num_iterations = vec![500];
        space.fdnn_depth = vec![1];
        space.fdnn_width = vec![4];
        let opts = SearchOptions {
            trials: 1,
            folds: 2,
            parallelism: 1,
            seed: 0,
        };
        let b = random_search(&space, Family::Fdnn, &ds, &ds, &opts).unwrap();
        assert!(b.trials[0].diverged);
        assert_eq!(b.trials[0].mean_cv_accuracy, 0.0);
    }

    fn board_with(values: &[(f64, f64)]) -> Leaderboard {
        let trials = values
            .iter()
            .enumerate()
            .map(|(i, &(lr, acc))| TrialRecord {
                trial: i,
                config: HyperConfig {
                    learning_rate: lr,
                    ..HyperConfig::linear(ArchSpec::Fdnn { depth: 1, width: 2 }, lr, 10, 10)
                },
                fold_accuracies: vec![acc],
                fold_test_accuracies: vec![acc],
                mean_cv_accuracy: acc,
                test_accuracy: acc,
                diverged: false,
            })
            .collect();
        Leaderboard::new(Family::Fdnn, trials)
    }

    #[test]
    fn planted_quadratic_vertex_is_recovered() {
        let grid = [0.5, 0.1, 0.01, 1e-3, 1e-5];
        let pts: Vec<(f64, f64)> = grid
            .iter()
            .flat_map(|&lr: &f64| {
                let t: f64 = lr.log10() + 2.0;
                [(lr, 0.7 - 0.01 * t * t), (lr, 0.69 - 0.01 * t * t)]
            })
            .collect();
        let r = hyperparameter_report(&board_with(&pts), "lr", Metric::Test).unwrap();
        assert!(r.log_scale);
        let v = r.fit.unwrap().vertex.unwrap();
        assert!((v - 0.01).abs() < 0.001, "vertex {v}");
        for s in &r.values {
            assert!(s.max >= s.mean);
            assert_eq!(s.count, 2);
        }
    }

    #[test]
    fn single_value_is_flagged() {
        let r = hyperparameter_report(&board_with(&[(0.1, 0.5), (0.1, 0.6)]), "learning_rate", Metric::Validation)
            .unwrap();
        assert!(r.insufficient_support);
        assert!(r.fit.is_none());
        assert_eq!(r.values.len(), 1);
        assert_eq!(r.values[0].max, 0.6);
    }

    #[test]
    fn absent_hyperparameter_errors() {
        let b = board_with(&[(0.1, 0.5)]);
        assert!(hyperparameter_report(&b, "m1", Metric::Test).is_err());
        assert!(hyperparameter_report(&b, "nonsense", Metric::Test).is_err());
    }

    #[test]
    fn quadratic_fit_is_exact_on_a_parabola() {
        let pts: Vec<(f64, f64)> = (0..7).map(|i| {
            let x = i as f64 * 10.0 + 100.0;
            (x, 3.0 - 0.5 * x + 0.002 * x * x)
        }).collect();
        let c = quadratic_fit(&pts).unwrap();
        for (got, want) in c.iter().zip([3.0, -0.5, 0.002]) {
            assert!((got - want).abs() < 1e-6 * want.abs().max(1.0), "{c:?}");
        }
    }
}
