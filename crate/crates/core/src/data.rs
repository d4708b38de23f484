//! Choice datasets: wide-format CSV ingestion, 4:1:1 splitting and
//! feature standardization.
//!
//! A dataset holds, per observation, one attribute vector of length `d_x`
//! for each of the `K` alternatives, an optional vector of `d_z`
//! individual attributes, and the index of the chosen alternative. An
//! alternative may lack some attribute (walking has no fare); such cells
//! are marked absent, stored as zero and never standardized.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, RngStream};

/// Column layout of a wide choice CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub alternatives: Vec<String>,
    /// Alternative-specific attribute names, shared across alternatives.
    pub attributes: Vec<String>,
    /// `columns[alt][attr]` is the CSV column holding that cell; a missing
    /// entry or `null` marks the attribute absent for that alternative.
    pub columns: BTreeMap<String, BTreeMap<String, Option<String>>>,
    /// Individual-specific columns.
    #[serde(default)]
    pub individual: Vec<String>,
    pub choice: String,
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Schema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alternatives.len() < 2 {
            return Err(Error::Schema("at least two alternatives are required".into()));
        }
        if self.attributes.is_empty() {
            return Err(Error::Schema("at least one alternative-specific attribute is required".into()));
        }
        for alt in self.columns.keys() {
            if !self.alternatives.contains(alt) {
                return Err(Error::Schema(format!("columns listed for unknown alternative `{alt}`")));
            }
        }
        for (alt, attrs) in &self.columns {
            for attr in attrs.keys() {
                if !self.attributes.contains(attr) {
                    return Err(Error::Schema(format!(
                        "alternative `{alt}` maps unknown attribute `{attr}`"
                    )));
                }
            }
        }
        for (a, attr) in self.attributes.iter().enumerate() {
            if !self.alternatives.iter().any(|alt| self.column(alt, a).is_some()) {
                return Err(Error::Schema(format!("attribute `{attr}` is absent for every alternative")));
            }
        }
        Ok(())
    }

    fn column(&self, alt: &str, attr: usize) -> Option<&str> {
        self.columns
            .get(alt)
            .and_then(|m| m.get(&self.attributes[attr]))
            .and_then(|c| c.as_deref())
    }

    /// Schema matching the layout written by [`write_csv`].
    pub fn for_dataset(ds: &ChoiceDataset) -> Schema {
        let mut columns = BTreeMap::new();
        for (k, alt) in ds.alternatives.iter().enumerate() {
            let mut m = BTreeMap::new();
            for (a, attr) in ds.attributes.iter().enumerate() {
                let col = ds.is_present(k, a).then(|| format!("{alt}_{attr}"));
                m.insert(attr.clone(), col);
            }
            columns.insert(alt.clone(), m);
        }
        Schema {
            alternatives: ds.alternatives.clone(),
            attributes: ds.attributes.clone(),
            columns,
            individual: ds.individual.clone(),
            choice: "choice".into(),
        }
    }
}

/// One decision-maker's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `K * d_x` alternative attributes, alternative-major.
    pub x: Vec<f64>,
    /// `d_z` individual attributes.
    pub z: Vec<f64>,
}

/// Mini-batch in the layout the models consume.
#[derive(Debug, Clone)]
pub struct Batch {
    /// One `B x d_x` matrix per alternative.
    pub x: Vec<Matrix>,
    /// `B x d_z`, absent when the dataset has no individual attributes.
    pub z: Option<Matrix>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceDataset {
    pub alternatives: Vec<String>,
    pub attributes: Vec<String>,
    pub individual: Vec<String>,
    present: Vec<bool>,
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<usize>,
}

impl ChoiceDataset {
    /// Assemble a dataset from flat buffers: `x` is `N * K * d_x`
    /// (observation-major, then alternative), `z` is `N * d_z`.
    pub fn from_parts(
        alternatives: Vec<String>,
        attributes: Vec<String>,
        individual: Vec<String>,
        present: Vec<bool>,
        x: Vec<f64>,
        z: Vec<f64>,
        y: Vec<usize>,
    ) -> Result<Self> {
        let k = alternatives.len();
        let dx = attributes.len();
        let dz = individual.len();
        let n = y.len();
        if k < 2 {
            return Err(Error::InvalidArgument("a choice set needs at least two alternatives".into()));
        }
        if dx == 0 {
            return Err(Error::InvalidArgument("at least one alternative attribute is required".into()));
        }
        if present.len() != k * dx {
            return Err(Error::dim("presence mask", k * dx, present.len()));
        }
        if x.len() != n * k * dx {
            return Err(Error::dim("alternative attributes", n * k * dx, x.len()));
        }
        if z.len() != n * dz {
            return Err(Error::dim("individual attributes", n * dz, z.len()));
        }
        if let Some(i) = y.iter().position(|&c| c >= k) {
            return Err(Error::Data {
                row: i + 1,
                column: "choice".into(),
                message: format!("choice {} out of range for {k} alternatives", y[i]),
            });
        }
        if let Some(i) = x.iter().chain(&z).position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite attribute value at flat index {i}")));
        }
        Ok(ChoiceDataset {
            alternatives,
            attributes,
            individual,
            present,
            x,
            z,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_alternatives(&self) -> usize {
        self.alternatives.len()
    }

    pub fn alt_dims(&self) -> usize {
        self.attributes.len()
    }

    pub fn ind_dims(&self) -> usize {
        self.individual.len()
    }

    pub fn is_present(&self, alt: usize, attr: usize) -> bool {
        self.present[alt * self.alt_dims() + attr]
    }

    pub fn presence(&self) -> &[bool] {
        &self.present
    }

    pub fn choice(&self, i: usize) -> usize {
        self.y[i]
    }

    pub fn choices(&self) -> &[usize] {
        &self.y
    }

    /// All `K * d_x` alternative attributes of observation `i`.
    pub fn x_row(&self, i: usize) -> &[f64] {
        let w = self.num_alternatives() * self.alt_dims();
        &self.x[i * w..(i + 1) * w]
    }

    pub fn x_alt(&self, i: usize, alt: usize) -> &[f64] {
        let d = self.alt_dims();
        &self.x_row(i)[alt * d..(alt + 1) * d]
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        let d = self.ind_dims();
        &self.z[i * d..(i + 1) * d]
    }

    pub fn observation(&self, i: usize) -> Observation {
        Observation {
            x: self.x_row(i).to_vec(),
            z: self.z_row(i).to_vec(),
        }
    }

    /// Human-readable name of an alternative-attribute cell.
    pub fn cell_name(&self, alt: usize, attr: usize) -> String {
        format!("{}:{}", self.alternatives[alt], self.attributes[attr])
    }

    /// New dataset holding the given observations, in order.
    pub fn subset(&self, indices: &[usize]) -> ChoiceDataset {
        let mut x = Vec::with_capacity(indices.len() * self.x_row(0).len().max(1));
        let mut z = Vec::with_capacity(indices.len() * self.ind_dims());
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.x_row(i));
            z.extend_from_slice(self.z_row(i));
            y.push(self.y[i]);
        }
        ChoiceDataset {
            x,
            z,
            y,
            ..self.with_no_rows()
        }
    }

    fn with_no_rows(&self) -> ChoiceDataset {
        ChoiceDataset {
            alternatives: self.alternatives.clone(),
            attributes: self.attributes.clone(),
            individual: self.individual.clone(),
            present: self.present.clone(),
            x: vec![],
            z: vec![],
            y: vec![],
        }
    }

    /// Concatenate datasets with identical layouts.
    pub fn concat(parts: &[&ChoiceDataset]) -> Result<ChoiceDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let mut out = first.with_no_rows();
        for p in parts {
            if !p.same_layout(first) {
                return Err(Error::InvalidArgument("datasets have different layouts".into()));
            }
            out.x.extend_from_slice(&p.x);
            out.z.extend_from_slice(&p.z);
            out.y.extend_from_slice(&p.y);
        }
        Ok(out)
    }

    pub fn same_layout(&self, other: &ChoiceDataset) -> bool {
        self.alternatives == other.alternatives
            && self.attributes == other.attributes
            && self.individual == other.individual
            && self.present == other.present
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let b = indices.len();
        let k = self.num_alternatives();
        let dx = self.alt_dims();
        let mut x: Vec<Matrix> = (0..k).map(|_| Matrix::zeros(b, dx)).collect();
        for (r, &i) in indices.iter().enumerate() {
            for (alt, m) in x.iter_mut().enumerate() {
                m.row_mut(r).copy_from_slice(self.x_alt(i, alt));
            }
        }
        let z = (self.ind_dims() > 0).then(|| {
            let mut m = Matrix::zeros(b, self.ind_dims());
            for (r, &i) in indices.iter().enumerate() {
                m.row_mut(r).copy_from_slice(self.z_row(i));
            }
            m
        });
        Batch {
            x,
            z,
            labels: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Empirical choice shares per alternative.
    pub fn shares(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.num_alternatives()];
        for &c in &self.y {
            counts[c] += 1.0;
        }
        counts.iter().map(|c| c / self.len() as f64).collect()
    }

    /// Column means: `(K * d_x alternative attributes, d_z individual)`.
    pub fn means(&self) -> Result<Observation> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("cannot take means of an empty dataset".into()));
        }
        let n = self.len() as f64;
        let mut x = vec![0.0; self.x_row(0).len()];
        let mut z = vec![0.0; self.ind_dims()];
        for i in 0..self.len() {
            x.iter_mut().zip(self.x_row(i)).for_each(|(a, b)| *a += b);
            z.iter_mut().zip(self.z_row(i)).for_each(|(a, b)| *a += b);
        }
        x.iter_mut().for_each(|v| *v /= n);
        z.iter_mut().for_each(|v| *v /= n);
        Ok(Observation { x, z })
    }

    fn map_values(&self, fx: impl Fn(usize, f64) -> f64, fz: impl Fn(usize, f64) -> f64) -> ChoiceDataset {
        let w = self.num_alternatives() * self.alt_dims();
        let dz = self.ind_dims();
        let mut out = self.clone();
        for (i, v) in out.x.iter_mut().enumerate() {
            *v = fx(i % w, *v);
        }
        for (i, v) in out.z.iter_mut().enumerate() {
            *v = fz(i % dz, *v);
        }
        out
    }
}

/// Read a wide choice CSV.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<ChoiceDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv(reader: impl std::io::Read, schema: &Schema) -> Result<ChoiceDataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data {
                row: 0,
                column: name.into(),
                message: "column missing from header".into(),
            })
    };

    let k = schema.alternatives.len();
    let dx = schema.attributes.len();
    let mut x_cols: Vec<Option<(usize, String)>> = Vec::with_capacity(k * dx);
    for alt in &schema.alternatives {
        for a in 0..dx {
            x_cols.push(match schema.column(alt, a) {
                Some(name) => Some((find(name)?, name.to_string())),
                None => None,
            });
        }
    }
    let z_cols = schema
        .individual
        .iter()
        .map(|n| find(n).map(|i| (i, n.clone())))
        .collect::<Result<Vec<_>>>()?;
    let choice_col = find(&schema.choice)?;

    let mut x = Vec::new();
    let mut z = Vec::new();
    let mut y = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let parse = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| Error::Data {
                row,
                column: name.into(),
                message: format!("cannot parse `{raw}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Data {
                    row,
                    column: name.into(),
                    message: "value is not finite".into(),
                });
            }
            Ok(v)
        };
        for col in &x_cols {
            x.push(match col {
                Some((idx, name)) => parse(*idx, name)?,
                None => 0.0,
            });
        }
        for (idx, name) in &z_cols {
            z.push(parse(*idx, name)?);
        }
        let raw = record.get(choice_col).unwrap_or("").trim();
        let choice = match schema.alternatives.iter().position(|a| a == raw) {
            Some(i) => i,
            None => raw.parse::<usize>().ok().filter(|&c| c < k).ok_or_else(|| Error::Data {
                row,
                column: schema.choice.clone(),
                message: format!(
                    "`{raw}` is neither an alternative name nor an index below {k}"
                ),
            })?,
        };
        y.push(choice);
    }
    let present = x_cols.iter().map(Option::is_some).collect();
    ChoiceDataset::from_parts(
        schema.alternatives.clone(),
        schema.attributes.clone(),
        schema.individual.clone(),
        present,
        x,
        z,
        y,
    )
}

/// Write a dataset in the layout described by [`Schema::for_dataset`].
pub fn write_csv(ds: &ChoiceDataset, writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = Vec::new();
    for (k, alt) in ds.alternatives.iter().enumerate() {
        for (a, attr) in ds.attributes.iter().enumerate() {
            if ds.is_present(k, a) {
                header.push(format!("{alt}_{attr}"));
            }
        }
    }
    header.extend(ds.individual.iter().cloned());
    header.push("choice".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec = Vec::with_capacity(header.len());
        for k in 0..ds.num_alternatives() {
            for a in 0..ds.alt_dims() {
                if ds.is_present(k, a) {
                    rec.push(format_float(ds.x_alt(i, k)[a]));
                }
            }
        }
        rec.extend(ds.z_row(i).iter().map(|&v| format_float(v)));
        rec.push(ds.alternatives[ds.choice(i)].clone());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Training, validation and test partitions.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: ChoiceDataset,
    pub val: ChoiceDataset,
    pub test: ChoiceDataset,
    /// Original row indices of each part.
    pub indices: [Vec<usize>; 3],
}

/// Seeded shuffle, then contiguous 4:1:1 cut at `floor(4N/6)` and `floor(5N/6)`.
pub fn split(ds: &ChoiceDataset, seed: u64) -> Result<Split> {
    let n = ds.len();
    if n < 6 {
        return Err(Error::InvalidArgument(format!(
            "a 4:1:1 split needs at least 6 observations, got {n}"
        )));
    }
    let perm = RngStream::named(seed, "split").permutation(n);
    let a = 4 * n / 6;
    let b = 5 * n / 6;
    let indices = [perm[..a].to_vec(), perm[a..b].to_vec(), perm[b..].to_vec()];
    Ok(Split {
        train: ds.subset(&indices[0]),
        val: ds.subset(&indices[1]),
        test: ds.subset(&indices[2]),
        indices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub mean: f64,
    pub std: f64,
    /// False for absent or binary columns, which pass through unchanged.
    pub scaled: bool,
}

impl ColumnScale {
    const IDENTITY: ColumnScale = ColumnScale {
        mean: 0.0,
        std: 1.0,
        scaled: false,
    };

    #[inline]
    pub fn forward(&self, v: f64) -> f64 {
        if self.scaled {
            (v - self.mean) / self.std
        } else {
            v
        }
    }

    #[inline]
    pub fn inverse(&self, v: f64) -> f64 {
        if self.scaled {
            v * self.std + self.mean
        } else {
            v
        }
    }
}

/// Per-column standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// `K * d_x` alternative-attribute columns.
    pub x: Vec<ColumnScale>,
    pub z: Vec<ColumnScale>,
}

impl Standardizer {
    /// Pass-through standardizer for a dataset layout.
    pub fn identity(ds: &ChoiceDataset) -> Self {
        Standardizer {
            x: vec![ColumnScale::IDENTITY; ds.num_alternatives() * ds.alt_dims()],
            z: vec![ColumnScale::IDENTITY; ds.ind_dims()],
        }
    }

    pub fn fit(train: &ChoiceDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("cannot standardize on an empty training split".into()));
        }
        let n = train.len();
        let w = train.num_alternatives() * train.alt_dims();
        let fit_column = |name: String, values: &mut dyn Iterator<Item = f64>| -> Result<ColumnScale> {
            let vals: Vec<f64> = values.collect();
            if vals.iter().all(|&v| v == 0.0 || v == 1.0) {
                return Ok(ColumnScale::IDENTITY);
            }
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if !(std > 0.0) || std < 1e-12 * mean.abs().max(1.0) {
                return Err(Error::ConstantColumn(name));
            }
            Ok(ColumnScale {
                mean,
                std,
                scaled: true,
            })
        };
        let mut x = Vec::with_capacity(w);
        for c in 0..w {
            let (alt, attr) = (c / train.alt_dims(), c % train.alt_dims());
            if !train.is_present(alt, attr) {
                x.push(ColumnScale::IDENTITY);
                continue;
            }
            x.push(fit_column(train.cell_name(alt, attr), &mut (0..n).map(|i| train.x_row(i)[c]))?);
        }
        let mut z = Vec::with_capacity(train.ind_dims());
        for c in 0..train.ind_dims() {
            z.push(fit_column(train.individual[c].clone(), &mut (0..n).map(|i| train.z_row(i)[c]))?);
        }
        Ok(Standardizer { x, z })
    }

    fn check(&self, ds: &ChoiceDataset) -> Result<()> {
        if self.x.len() != ds.num_alternatives() * ds.alt_dims() || self.z.len() != ds.ind_dims() {
            return Err(Error::dim(
                "standardizer",
                format!("{} + {} columns", self.x.len(), self.z.len()),
                format!("{} + {}", ds.num_alternatives() * ds.alt_dims(), ds.ind_dims()),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, ds: &ChoiceDataset) -> Result<ChoiceDataset> {
        self.check(ds)?;
        Ok(ds.map_values(|c, v| self.x[c].forward(v), |c, v| self.z[c].forward(v)))
    }

    pub fn invert(&self, ds: &ChoiceDataset) -> Result<ChoiceDataset> {
        self.check(ds)?;
        Ok(ds.map_values(|c, v| self.x[c].inverse(v), |c, v| self.z[c].inverse(v)))
    }

    pub fn apply_observation(&self, obs: &Observation) -> Observation {
        Observation {
            x: obs.x.iter().zip(&self.x).map(|(&v, s)| s.forward(v)).collect(),
            z: obs.z.iter().zip(&self.z).map(|(&v, s)| s.forward(v)).collect(),
        }
    }
}

/// Fit on `train` and apply the same transform to every other split.
pub fn standardize(
    train: &ChoiceDataset,
    others: &[&ChoiceDataset],
) -> Result<(ChoiceDataset, Vec<ChoiceDataset>, Standardizer)> {
    let s = Standardizer::fit(train)?;
    let t = s.apply(train)?;
    let rest = others.iter().map(|d| s.apply(d)).collect::<Result<Vec<_>>>()?;
    Ok((t, rest, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn train_schema() -> Schema {
        serde_json::from_str(
            r#"{
                "alternatives": ["choice1", "choice2"],
                "attributes": ["price", "time", "change", "comfort"],
                "columns": {
                    "choice1": {"price": "price1", "time": "time1", "change": "change1", "comfort": "comfort1"},
                    "choice2": {"price": "price2", "time": "time2", "change": "change2", "comfort": "comfort2"}
                },
                "choice": "choice"
            }"#,
        )
        .unwrap()
    }

    const TRAIN_ROWS: &str = "id,choiceid,choice,price1,time1,change1,comfort1,price2,time2,change2,comfort2
1,1,choice1,2400,150,0,1,4000,150,0,1
1,2,choice1,2400,150,0,1,3200,130,0,1
1,3,choice2,2400,115,0,0,4000,115,0,0
";

    #[test]
    fn loads_train_layout() {
        let ds = read_csv(TRAIN_ROWS.as_bytes(), &train_schema()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_alternatives(), 2);
        assert_eq!(ds.alt_dims(), 4);
        assert_eq!(ds.ind_dims(), 0);
        assert_eq!(ds.choices(), &[0, 0, 1]);
        assert_eq!(ds.x_alt(1, 1), &[3200.0, 130.0, 0.0, 1.0]);
    }

    #[test]
    fn one_row_file() {
        let one: String = TRAIN_ROWS.lines().take(2).map(|l| format!("{l}\n")).collect();
        let ds = read_csv(one.as_bytes(), &train_schema()).unwrap();
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn choice_out_of_range_names_row() {
        let bad = TRAIN_ROWS.replace("1,3,choice2", "1,3,7");
        let err = read_csv(bad.as_bytes(), &train_schema()).unwrap_err();
        match err {
            Error::Data { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "choice");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bad_number_and_missing_column() {
        let bad = TRAIN_ROWS.replace("3200,130", "3200,abc");
        let err = read_csv(bad.as_bytes(), &train_schema()).unwrap_err();
        assert!(matches!(err, Error::Data { row: 2, ref column, .. } if column == "time2"));

        let missing = TRAIN_ROWS.replace("comfort2", "comfortX");
        let err = read_csv(missing.as_bytes(), &train_schema()).unwrap_err();
        assert!(matches!(err, Error::Data { ref column, .. } if column == "comfort2"));
    }

    fn toy(n: usize) -> ChoiceDataset {
        let x: Vec<f64> = (0..n * 4).map(|i| (i as f64 * 0.37).sin() * 10.0 + 5.0).collect();
        let z: Vec<f64> = (0..n).flat_map(|i| [(i % 2) as f64, i as f64 * 0.5]).collect();
        let y = (0..n).map(|i| i % 2).collect();
        ChoiceDataset::from_parts(
            vec!["a".into(), "b".into()],
            vec!["cost".into(), "time".into()],
            vec!["male".into(), "age".into()],
            vec![true; 4],
            x,
            z,
            y,
        )
        .unwrap()
    }

    #[test]
    fn split_sizes() {
        let s = split(&toy(6), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (4, 1, 1));
        let s = split(&toy(8418), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5612, 1403, 1403));
        assert!(split(&toy(5), 1).is_err());
    }

    #[test]
    fn split_is_seeded_partition() {
        let ds = toy(100);
        let a = split(&ds, 3).unwrap();
        let b = split(&ds, 3).unwrap();
        assert_eq!(a.indices, b.indices);
        let mut all: Vec<usize> = a.indices.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn standardization_uses_training_statistics() {
        let ds = toy(60);
        let s = split(&ds, 5).unwrap();
        let (train, others, st) = standardize(&s.train, &[&s.val, &s.test]).unwrap();
        let n = train.len() as f64;
        for c in 0..4 {
            let vals: Vec<f64> = (0..train.len()).map(|i| train.x_row(i)[c]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-10);
            assert!((sd - 1.0).abs() < 1e-8);
        }
        // binary column passes through
        assert!(!st.z[0].scaled);
        assert!(st.z[1].scaled);
        let val_mean: f64 = (0..others[0].len()).map(|i| others[0].x_row(i)[0]).sum::<f64>();
        assert!(val_mean.abs() > 1e-6);
        let back = st.invert(&train).unwrap();
        for (a, b) in back.x.iter().zip(&s.train.x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_is_rejected_by_name() {
        let mut ds = toy(10);
        for i in 0..10 {
            ds.x[i * 4 + 1] = 3.5;
        }
        match Standardizer::fit(&ds).unwrap_err() {
            Error::ConstantColumn(name) => assert_eq!(name, "a:time"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let ds = toy(20);
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &Schema::for_dataset(&ds)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn absent_attributes_stay_zero() {
        let schema: Schema = serde_json::from_str(
            r#"{
                "alternatives": ["walk", "bus"],
                "attributes": ["cost", "time"],
                "columns": {
                    "walk": {"time": "walk_time"},
                    "bus": {"cost": "bus_cost", "time": "bus_time"}
                },
                "choice": "choice"
            }"#,
        )
        .unwrap();
        let text = "walk_time,bus_cost,bus_time,choice\n30,2.0,10,bus\n20,1.5,12,walk\n45,2.5,8,bus\n";
        let ds = read_csv(text.as_bytes(), &schema).unwrap();
        assert!(!ds.is_present(0, 0));
        assert_eq!(ds.x_alt(0, 0), &[0.0, 30.0]);
        let st = Standardizer::fit(&ds).unwrap();
        assert!(!st.x[0].scaled);
    }
}
