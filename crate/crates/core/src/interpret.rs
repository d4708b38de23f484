//! Post-hoc interpretation of trained models: probability curves,
//! arc elasticities at the sample mean and IIA probes.
//!
//! Everything here takes and reports raw units; the model's own
//! standardizer is applied internally.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{format_float, ChoiceDataset, Observation};
use crate::error::{Error, Result};
use crate::math::RngStream;
use crate::training::TrainedModel;

/// Eval-mode probabilities of a raw-unit observation.
pub fn probabilities(model: &TrainedModel, raw: &Observation) -> Result<Vec<f64>> {
    Ok(model.model.forward(&model.standardizer.apply_observation(raw))?.p)
}

fn check_layout(model: &TrainedModel, ds: &ChoiceDataset) -> Result<()> {
    let d = model.model.dims;
    if d.alternatives != ds.num_alternatives() || d.alt_dims != ds.alt_dims() || d.ind_dims != ds.ind_dims() {
        return Err(Error::InvalidArgument(format!(
            "the model expects {} alternatives x {} attributes + {} individual, the data has {} x {} + {}",
            d.alternatives,
            d.alt_dims,
            d.ind_dims,
            ds.num_alternatives(),
            ds.alt_dims(),
            ds.ind_dims()
        )));
    }
    Ok(())
}

/// Look up an (alternative, attribute) cell by name.
pub fn resolve_cell(ds: &ChoiceDataset, alternative: &str, attribute: &str) -> Result<(usize, usize)> {
    let alt = ds
        .alternatives
        .iter()
        .position(|a| a == alternative)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown alternative `{alternative}`")))?;
    let attr = ds
        .attributes
        .iter()
        .position(|a| a == attribute)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown attribute `{attribute}`")))?;
    if !ds.is_present(alt, attr) {
        return Err(Error::InvalidArgument(format!(
            "alternative `{alternative}` has no attribute `{attribute}`"
        )));
    }
    Ok((alt, attr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub model: String,
    pub alternative: String,
    pub attribute: String,
    /// Raw-unit values of the swept attribute.
    pub grid: Vec<f64>,
    /// `probabilities[g][k]`.
    pub probabilities: Vec<Vec<f64>>,
    pub alternatives: Vec<String>,
}

/// Evenly spaced grid from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => vec![],
        1 => vec![lo],
        _ => (0..steps)
            .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
            .collect(),
    }
}

/// Choice probabilities as one attribute moves over `grid`, every other
/// input held at its mean over `ds`.
pub fn probability_sweep(
    model: &TrainedModel,
    ds: &ChoiceDataset,
    alternative: &str,
    attribute: &str,
    grid: &[f64],
) -> Result<SweepResult> {
    check_layout(model, ds)?;
    if grid.is_empty() {
        return Err(Error::InvalidArgument("the sweep grid is empty".into()));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("sweep grid values must be finite".into()));
    }
    let (alt, attr) = resolve_cell(ds, alternative, attribute)?;
    let col = alt * ds.alt_dims() + attr;
    let base = ds.means()?;
    let probes: Vec<Observation> = grid
        .iter()
        .map(|&g| {
            let mut o = model.standardizer.apply_observation(&base);
            o.x[col] = model.standardizer.x[col].forward(g);
            o
        })
        .collect();
    let probabilities = model.model.forward_many(&probes)?.into_iter().map(|o| o.p).collect();
    Ok(SweepResult {
        model: model.model.arch.family().to_string(),
        alternative: alternative.to_string(),
        attribute: attribute.to_string(),
        grid: grid.to_vec(),
        probabilities,
        alternatives: ds.alternatives.clone(),
    })
}

#[derive(Serialize)]
struct Series<'a> {
    name: &'a str,
    y: Vec<f64>,
}

#[derive(Serialize)]
struct PlotData<'a> {
    model: &'a str,
    x_label: String,
    x: &'a [f64],
    series: Vec<Series<'a>>,
}

impl SweepResult {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![format!("{}:{}", self.alternative, self.attribute)];
        header.extend(self.alternatives.iter().map(|a| format!("p_{a}")));
        out.write_record(&header)?;
        for (g, p) in self.grid.iter().zip(&self.probabilities) {
            let mut row = vec![format_float(*g)];
            row.extend(p.iter().map(|v| format_float(*v)));
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("sweep csv", e))?;
        Ok(())
    }

    /// Plot-ready series: shared `x`, one `y` per alternative.
    pub fn to_plot_json(&self) -> Result<String> {
        let data = PlotData {
            model: &self.model,
            x_label: format!("{}:{}", self.alternative, self.attribute),
            x: &self.grid,
            series: self
                .alternatives
                .iter()
                .enumerate()
                .map(|(k, name)| Series {
                    name,
                    y: self.probabilities.iter().map(|p| p[k]).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&data)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignSummary {
    pub own_negative: usize,
    pub own_positive: usize,
    pub own_zero: usize,
    pub cross_negative: usize,
    pub cross_positive: usize,
    pub cross_zero: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticityRow {
    pub alternative: String,
    pub attribute: String,
    /// False for attributes the alternative does not have; the row is zero.
    pub present: bool,
    /// Elasticity of each alternative's probability.
    pub values: Vec<f64>,
    /// All cross entries agree to within the tolerance.
    pub cross_equal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticityMatrix {
    pub model: String,
    pub alternatives: Vec<String>,
    pub perturbation: f64,
    /// `K * d_x` rows, alternative-major.
    pub rows: Vec<ElasticityRow>,
    pub signs: SignSummary,
}

/// Tolerance of the per-row cross-equality flag.
pub const CROSS_EQUALITY_TOL: f64 = 1e-10;

fn cross_equal(values: &[f64], own: usize) -> bool {
    let cross: Vec<f64> = values.iter().enumerate().filter(|&(i, _)| i != own).map(|(_, v)| *v).collect();
    cross
        .iter()
        .all(|v| (v - cross[0]).abs() <= CROSS_EQUALITY_TOL * cross[0].abs().max(1.0))
}

fn sign_summary(rows: &[ElasticityRow], alternatives: &[String]) -> SignSummary {
    let mut s = SignSummary::default();
    for r in rows.iter().filter(|r| r.present) {
        let own = alternatives.iter().position(|a| *a == r.alternative).expect("row alternative");
        for (i, &v) in r.values.iter().enumerate() {
            let slot = match (i == own, v.partial_cmp(&0.0)) {
                (true, Some(std::cmp::Ordering::Less)) => &mut s.own_negative,
                (true, Some(std::cmp::Ordering::Greater)) => &mut s.own_positive,
                (true, _) => &mut s.own_zero,
                (false, Some(std::cmp::Ordering::Less)) => &mut s.cross_negative,
                (false, Some(std::cmp::Ordering::Greater)) => &mut s.cross_positive,
                (false, _) => &mut s.cross_zero,
            };
            *slot += 1;
        }
    }
    s
}

/// Arc elasticities at the mean of `ds`: for every present cell `(j, a)`,
/// raise `x_ja` by the fraction `perturbation` and report
/// `(P_i(x') / P_i(x) - 1) / perturbation` for each alternative `i`.
pub fn elasticity_matrix(model: &TrainedModel, ds: &ChoiceDataset, perturbation: f64) -> Result<ElasticityMatrix> {
    check_layout(model, ds)?;
    if !(perturbation != 0.0 && perturbation.is_finite()) {
        return Err(Error::InvalidArgument("the perturbation must be finite and nonzero".into()));
    }
    let base = ds.means()?;
    let p0 = probabilities(model, &base)?;
    let dx = ds.alt_dims();
    let mut rows = Vec::with_capacity(ds.num_alternatives() * dx);
    for alt in 0..ds.num_alternatives() {
        for attr in 0..dx {
            let col = alt * dx + attr;
            let mut row = ElasticityRow {
                alternative: ds.alternatives[alt].clone(),
                attribute: ds.attributes[attr].clone(),
                present: ds.is_present(alt, attr),
                values: vec![0.0; ds.num_alternatives()],
                cross_equal: true,
            };
            if row.present {
                if base.x[col] == 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "{} has mean zero, so a relative perturbation is undefined",
                        ds.cell_name(alt, attr)
                    )));
                }
                let mut probe = base.clone();
                probe.x[col] *= 1.0 + perturbation;
                let p1 = probabilities(model, &probe)?;
                row.values = p0.iter().zip(&p1).map(|(a, b)| (b - a) / a / perturbation).collect();
                if row.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("elasticity"));
                }
                row.cross_equal = cross_equal(&row.values, alt);
            }
            rows.push(row);
        }
    }
    let signs = sign_summary(&rows, &ds.alternatives);
    Ok(ElasticityMatrix {
        model: model.model.arch.family().to_string(),
        alternatives: ds.alternatives.clone(),
        perturbation,
        rows,
        signs,
    })
}

/// Elementwise mean of matrices over the same layout.
pub fn average_elasticities(ms: &[ElasticityMatrix]) -> Result<ElasticityMatrix> {
    let first = ms.first().ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    let same = |m: &ElasticityMatrix| {
        m.alternatives == first.alternatives
            && m.rows.len() == first.rows.len()
            && m.rows
                .iter()
                .zip(&first.rows)
                .all(|(a, b)| a.alternative == b.alternative && a.attribute == b.attribute)
    };
    if !ms.iter().all(same) {
        return Err(Error::InvalidArgument("elasticity matrices have different layouts".into()));
    }
    let n = ms.len() as f64;
    let mut rows = first.rows.clone();
    for (r, row) in rows.iter_mut().enumerate() {
        for (i, v) in row.values.iter_mut().enumerate() {
            *v = ms.iter().map(|m| m.rows[r].values[i]).sum::<f64>() / n;
        }
        let own = first.alternatives.iter().position(|a| *a == row.alternative).expect("row alternative");
        row.cross_equal = !row.present || cross_equal(&row.values, own);
    }
    let signs = sign_summary(&rows, &first.alternatives);
    let mut models: Vec<&str> = ms.iter().map(|m| m.model.as_str()).collect();
    models.dedup();
    Ok(ElasticityMatrix {
        model: format!("mean of {} ({})", ms.len(), models.join(",")),
        alternatives: first.alternatives.clone(),
        perturbation: first.perturbation,
        rows,
        signs,
    })
}

impl ElasticityMatrix {
    pub fn row(&self, alternative: &str, attribute: &str) -> Option<&ElasticityRow> {
        self.rows
            .iter()
            .find(|r| r.alternative == alternative && r.attribute == attribute)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["alternative".to_string(), "attribute".to_string()];
        header.extend(self.alternatives.iter().cloned());
        header.push("cross_equal".into());
        out.write_record(&header)?;
        for r in self.rows.iter().filter(|r| r.present) {
            let mut row = vec![r.alternative.clone(), r.attribute.clone()];
            row.extend(r.values.iter().map(|v| format_float(*v)));
            row.push(r.cross_equal.to_string());
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("elasticity csv", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IiaProbe {
    pub row: usize,
    pub k: usize,
    pub j: usize,
    /// The perturbed third alternative.
    pub l: usize,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IiaReport {
    pub model: String,
    pub probes: usize,
    pub max_deviation: f64,
    pub worst: Option<IiaProbe>,
    pub iia_consistent: bool,
}

/// Threshold on `max |d log(P_k / P_j)|` below which a model is reported
/// as satisfying IIA.
pub const IIA_TOL: f64 = 1e-9;

/// Probe random observations of `ds`: pick alternatives `k != j` and a
/// third `l`, shift every present attribute of `l` by a random multiple of
/// its spread, and record the change of `log(P_k / P_j)`.
pub fn iia_report(model: &TrainedModel, ds: &ChoiceDataset, probes: usize, rng: &mut RngStream) -> Result<IiaReport> {
    check_layout(model, ds)?;
    let k_alts = ds.num_alternatives();
    if k_alts < 3 {
        return Err(Error::InvalidArgument(format!(
            "an IIA probe needs at least three alternatives, got {k_alts}"
        )));
    }
    if ds.is_empty() || probes == 0 {
        return Err(Error::InvalidArgument("need a nonempty dataset and at least one probe".into()));
    }
    let dx = ds.alt_dims();
    let mut max_deviation = 0.0f64;
    let mut worst = None;
    for _ in 0..probes {
        let row = rng.below(ds.len());
        let k = rng.below(k_alts);
        let j = (k + 1 + rng.below(k_alts - 1)) % k_alts;
        let l = loop {
            let l = rng.below(k_alts);
            if l != k && l != j {
                break l;
            }
        };
        let obs = ds.observation(row);
        let mut moved = obs.clone();
        for a in (0..dx).filter(|&a| ds.is_present(l, a)) {
            let col = l * dx + a;
            let s = &model.standardizer.x[col];
            let spread = if s.scaled { s.std } else { 1.0 };
            moved.x[col] += spread * rng.standard_normal();
        }
        let p = probabilities(model, &obs)?;
        let q = probabilities(model, &moved)?;
        let deviation = ((q[k].ln() - q[j].ln()) - (p[k].ln() - p[j].ln())).abs();
        if !deviation.is_finite() {
            return Err(Error::NonFinite("IIA probe"));
        }
        if deviation > max_deviation || worst.is_none() {
            max_deviation = max_deviation.max(deviation);
            worst = Some(IiaProbe { row, k, j, l, deviation });
        }
    }
    Ok(IiaReport {
        model: model.model.arch.family().to_string(),
        probes,
        max_deviation,
        worst,
        iia_consistent: max_deviation < IIA_TOL,
    })
}
