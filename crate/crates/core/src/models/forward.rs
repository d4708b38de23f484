//! Forward passes recorded on a [`Tape`].

use serde::{Deserialize, Serialize};

use super::arch::{nest_layout, ArchSpec, InputDims};
use super::params::{Dense, ModelParams, Net, Role};
use crate::data::{Batch, ChoiceDataset, Observation};
use crate::error::{Error, Result};
use crate::math::ops::{softmax_in_place, BATCH_NORM_MOMENTUM};
use crate::math::tape::{nest_scales, NestedLogitRow};
use crate::math::{dropout_mask, Matrix, NodeId, RngStream, Tape};

/// How a forward pass treats dropout and batch normalization.
pub enum Pass<'a> {
    /// Dropout off, batch norm on running statistics.
    Eval,
    /// Dropout at `dropout`, batch norm on batch statistics; running
    /// statistics in the node view are updated in place.
    Train { dropout: f64, rng: &'a mut RngStream },
}

/// Utilities and probabilities for one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityOutput {
    pub v: Vec<f64>,
    pub p: Vec<f64>,
}

/// A model: architecture, input layout and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceModel {
    pub arch: ArchSpec,
    pub dims: InputDims,
    pub batch_norm: bool,
    pub params: ModelParams,
}

impl ChoiceModel {
    pub fn new(arch: ArchSpec, dims: InputDims, batch_norm: bool, rng: &mut RngStream) -> Result<Self> {
        let params = Net::init(&arch, dims, batch_norm, rng)?;
        Ok(ChoiceModel {
            arch,
            dims,
            batch_norm,
            params,
        })
    }

    /// Register every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Net<NodeId> {
        self.params.map(|m| tape.param(m.clone()))
    }

    /// Register every parameter as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Net<NodeId> {
        self.params.map(|m| tape.input(m.clone()))
    }

    /// Record the `B x K` utility matrix of a batch.
    pub fn record_utilities(
        &self,
        tape: &mut Tape,
        nodes: &mut Net<NodeId>,
        x: &[Matrix],
        z: Option<&Matrix>,
        mut pass: Pass<'_>,
    ) -> Result<NodeId> {
        self.check_inputs(x, z)?;
        let k = self.dims.alternatives;
        let xs: Vec<NodeId> = x.iter().map(|m| tape.input(m.clone())).collect();
        let z = z.map(|m| tape.input(m.clone()));
        let rows = x[0].rows();
        match nodes {
            Net::Linear(p) => {
                let parts = xs
                    .iter()
                    .zip(&p.beta)
                    .map(|(&xk, &b)| tape.matmul(xk, b))
                    .collect::<Result<Vec<_>>>()?;
                let mut v = tape.concat(parts)?;
                let zero_col = tape.input(Matrix::zeros(rows, 1));
                if let (Some(z), Some(g)) = (z, p.gamma) {
                    let zg = tape.matmul(z, g)?;
                    let zg = tape.concat(vec![zg, zero_col])?;
                    v = tape.weighted_sum(vec![(1.0, v), (1.0, zg)])?;
                }
                let zero = tape.input(Matrix::zeros(1, 1));
                let asc = tape.concat(vec![p.asc, zero])?;
                tape.add_bias(v, asc)
            }
            Net::Fdnn(p) => {
                let mut parts: Vec<NodeId> = z.into_iter().collect();
                parts.extend(&xs);
                let mut h = tape.concat(parts)?;
                for layer in &mut p.hidden {
                    h = hidden_layer(tape, layer, h, &mut pass)?;
                }
                affine(tape, &p.head, h)
            }
            Net::Asu(p) => {
                let z_out = match z {
                    Some(mut h) => {
                        for layer in &mut p.z_stack {
                            h = hidden_layer(tape, layer, h, &mut pass)?;
                        }
                        Some(h)
                    }
                    None => None,
                };
                let mut heads = Vec::with_capacity(k);
                for (alt, sub) in p.alts.iter_mut().enumerate() {
                    let mut h = xs[alt];
                    for layer in &mut sub.pre {
                        h = hidden_layer(tape, layer, h, &mut pass)?;
                    }
                    if let Some(zo) = z_out {
                        h = tape.concat(vec![h, zo])?;
                    }
                    for layer in &mut sub.post {
                        h = hidden_layer(tape, layer, h, &mut pass)?;
                    }
                    heads.push(affine(tape, &sub.head, h)?);
                }
                tape.concat(heads)
            }
        }
    }

    /// Record the mean choice cross-entropy of a batch.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        nodes: &mut Net<NodeId>,
        batch: &Batch,
        pass: Pass<'_>,
    ) -> Result<NodeId> {
        let v = self.record_utilities(tape, nodes, &batch.x, batch.z.as_ref(), pass)?;
        match (&self.arch, &*nodes) {
            (ArchSpec::Nl { nests }, Net::Linear(p)) => {
                let layout = nest_layout(nests, self.dims.alternatives)?;
                tape.nested_logit_cross_entropy(v, p.theta, layout, batch.labels.clone())
            }
            _ => tape.softmax_cross_entropy(v, batch.labels.clone()),
        }
    }

    /// Record the weight penalty `l1 * |w|_1 + l2 * |w|_2^2`.
    pub fn record_penalty(tape: &mut Tape, nodes: &Net<NodeId>, l1: f64, l2: f64) -> Result<Option<NodeId>> {
        let mut terms = Vec::new();
        for (role, &id) in nodes.tensors() {
            if role != Role::Weight {
                continue;
            }
            if l1 != 0.0 {
                terms.push((l1, tape.l1(id)?));
            }
            if l2 != 0.0 {
                terms.push((l2, tape.sum_squares(id)?));
            }
        }
        if terms.is_empty() {
            return Ok(None);
        }
        tape.weighted_sum(terms).map(Some)
    }

    /// Eval-mode `B x K` utilities.
    pub fn utilities(&self, x: &[Matrix], z: Option<&Matrix>) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut nodes = self.bind_constant(&mut tape);
        let v = self.record_utilities(&mut tape, &mut nodes, x, z, Pass::Eval)?;
        Ok(tape.value(v).clone())
    }

    /// Eval-mode `B x K` probabilities.
    pub fn probabilities(&self, x: &[Matrix], z: Option<&Matrix>) -> Result<Matrix> {
        let v = self.utilities(x, z)?;
        self.probabilities_from_utilities(&v)
    }

    /// Map utilities to probabilities with this model's choice structure.
    pub fn probabilities_from_utilities(&self, v: &Matrix) -> Result<Matrix> {
        if !v.is_finite() {
            return Err(Error::NonFinite("utilities"));
        }
        let mut p = v.clone();
        match (&self.arch, &self.params) {
            (ArchSpec::Nl { nests }, Net::Linear(lp)) => {
                let layout = nest_layout(nests, self.dims.alternatives)?;
                let theta = lp.theta.as_ref().map(|t| t.as_slice().to_vec()).unwrap_or_default();
                let mu = nest_scales(layout.nests, &theta);
                for r in 0..p.rows() {
                    let row = NestedLogitRow::compute(v.row(r), &layout, &mu);
                    for (o, lp) in p.row_mut(r).iter_mut().zip(&row.log_p) {
                        *o = lp.exp();
                    }
                }
            }
            _ => {
                for r in 0..p.rows() {
                    softmax_in_place(p.row_mut(r));
                }
            }
        }
        Ok(p)
    }

    /// Nest scales `mu_m` (nested logit only).
    pub fn nest_scales(&self) -> Option<Vec<f64>> {
        match (&self.arch, &self.params) {
            (ArchSpec::Nl { nests }, Net::Linear(lp)) => {
                let theta = lp.theta.as_ref().map(|t| t.as_slice().to_vec()).unwrap_or_default();
                Some(nest_scales(nests.len(), &theta))
            }
            _ => None,
        }
    }

    /// Eval-mode utilities and probabilities of a single observation.
    pub fn forward(&self, obs: &Observation) -> Result<UtilityOutput> {
        let (x, z) = self.observation_inputs(std::slice::from_ref(obs))?;
        let v = self.utilities(&x, z.as_ref())?;
        let p = self.probabilities_from_utilities(&v)?;
        Ok(UtilityOutput {
            v: v.into_vec(),
            p: p.into_vec(),
        })
    }

    /// Eval-mode outputs for many observations at once.
    pub fn forward_many(&self, obs: &[Observation]) -> Result<Vec<UtilityOutput>> {
        if obs.is_empty() {
            return Ok(vec![]);
        }
        let (x, z) = self.observation_inputs(obs)?;
        let v = self.utilities(&x, z.as_ref())?;
        let p = self.probabilities_from_utilities(&v)?;
        Ok((0..obs.len())
            .map(|r| UtilityOutput {
                v: v.row(r).to_vec(),
                p: p.row(r).to_vec(),
            })
            .collect())
    }

    /// Eval-mode `N x K` probabilities over a whole dataset.
    pub fn predict(&self, ds: &ChoiceDataset) -> Result<Matrix> {
        const CHUNK: usize = 2048;
        let k = self.dims.alternatives;
        let mut out = Matrix::zeros(ds.len().max(1), k);
        let idx: Vec<usize> = (0..ds.len()).collect();
        for (c, chunk) in idx.chunks(CHUNK).enumerate() {
            let b = ds.batch(chunk);
            let p = self.probabilities(&b.x, b.z.as_ref())?;
            for r in 0..chunk.len() {
                out.row_mut(c * CHUNK + r).copy_from_slice(p.row(r));
            }
        }
        Ok(out)
    }

    fn observation_inputs(&self, obs: &[Observation]) -> Result<(Vec<Matrix>, Option<Matrix>)> {
        let k = self.dims.alternatives;
        let dx = self.dims.alt_dims;
        let dz = self.dims.ind_dims;
        let b = obs.len();
        let mut x: Vec<Matrix> = (0..k).map(|_| Matrix::zeros(b, dx)).collect();
        let mut z = (dz > 0).then(|| Matrix::zeros(b, dz));
        for (r, o) in obs.iter().enumerate() {
            if o.x.len() != k * dx {
                return Err(Error::dim("observation attributes", k * dx, o.x.len()));
            }
            if o.z.len() != dz {
                return Err(Error::dim("individual attributes", dz, o.z.len()));
            }
            for (alt, m) in x.iter_mut().enumerate() {
                m.row_mut(r).copy_from_slice(&o.x[alt * dx..(alt + 1) * dx]);
            }
            if let Some(zm) = &mut z {
                zm.row_mut(r).copy_from_slice(&o.z);
            }
        }
        Ok((x, z))
    }

    fn check_inputs(&self, x: &[Matrix], z: Option<&Matrix>) -> Result<()> {
        let d = self.dims;
        if x.len() != d.alternatives {
            return Err(Error::dim("alternatives", d.alternatives, x.len()));
        }
        let rows = x[0].rows();
        for m in x {
            if m.cols() != d.alt_dims || m.rows() != rows {
                return Err(Error::dim(
                    "alternative attributes",
                    format!("{rows}x{}", d.alt_dims),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
        }
        match (z, d.ind_dims) {
            (None, 0) => Ok(()),
            (Some(m), dz) if dz > 0 && m.cols() == dz && m.rows() == rows => Ok(()),
            (Some(m), dz) => Err(Error::dim(
                "individual attributes",
                format!("{rows}x{dz}"),
                format!("{}x{}", m.rows(), m.cols()),
            )),
            (None, dz) => Err(Error::dim("individual attributes", format!("{rows}x{dz}"), "none")),
        }
    }
}

fn affine(tape: &mut Tape, layer: &Dense<NodeId>, h: NodeId) -> Result<NodeId> {
    let a = tape.matmul(h, layer.weight)?;
    tape.add_bias(a, layer.bias)
}

/// affine -> batch norm -> ReLU -> dropout.
fn hidden_layer(tape: &mut Tape, layer: &mut Dense<NodeId>, h: NodeId, pass: &mut Pass<'_>) -> Result<NodeId> {
    let mut a = affine(tape, layer, h)?;
    if let Some(norm) = &mut layer.norm {
        a = match pass {
            Pass::Eval => tape.batch_norm_fixed(
                a,
                norm.scale,
                norm.shift,
                norm.running.mean.clone(),
                norm.running.var.clone(),
            )?,
            Pass::Train { .. } => {
                let out = tape.batch_norm(a, norm.scale, norm.shift)?;
                let (mean, var) = tape.batch_moments(out).expect("train-mode batch norm saves moments");
                let m = BATCH_NORM_MOMENTUM;
                for (r, &b) in norm.running.mean.iter_mut().zip(mean) {
                    *r = m * *r + (1.0 - m) * b;
                }
                for (r, &b) in norm.running.var.iter_mut().zip(var) {
                    *r = m * *r + (1.0 - m) * b;
                }
                out
            }
        };
    }
    let mut out = tape.relu(a)?;
    if let Pass::Train { dropout, rng } = pass {
        if *dropout > 0.0 {
            let (r, c) = tape.value(out).shape();
            let mask = dropout_mask(r, c, *dropout, rng)?;
            out = tape.mask(out, mask)?;
        }
    }
    Ok(out)
}

fn require_family(model: &ChoiceModel, ok: bool, name: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} called on a {} model",
            model.arch.family()
        )))
    }
}

/// F-DNN utilities from individual attributes `z` and the concatenated
/// alternative attributes `x_tilde`.
pub fn fdnn_forward(model: &ChoiceModel, z: &[f64], x_tilde: &[f64]) -> Result<UtilityOutput> {
    require_family(model, matches!(model.arch, ArchSpec::Fdnn { .. }), "fdnn_forward")?;
    model.forward(&Observation {
        x: x_tilde.to_vec(),
        z: z.to_vec(),
    })
}

/// ASU-DNN utilities; `x[k]` holds alternative `k`'s attributes.
pub fn asudnn_forward(model: &ChoiceModel, z: &[f64], x: &[Vec<f64>]) -> Result<UtilityOutput> {
    require_family(model, matches!(model.arch, ArchSpec::Asudnn { .. }), "asudnn_forward")?;
    model.forward(&Observation {
        x: x.concat(),
        z: z.to_vec(),
    })
}

pub fn mnl_forward(model: &ChoiceModel, z: &[f64], x: &[Vec<f64>]) -> Result<UtilityOutput> {
    require_family(model, matches!(model.arch, ArchSpec::Mnl), "mnl_forward")?;
    model.forward(&Observation {
        x: x.concat(),
        z: z.to_vec(),
    })
}

pub fn nl_forward(model: &ChoiceModel, z: &[f64], x: &[Vec<f64>]) -> Result<UtilityOutput> {
    require_family(model, matches!(model.arch, ArchSpec::Nl { .. }), "nl_forward")?;
    model.forward(&Observation {
        x: x.concat(),
        z: z.to_vec(),
    })
}

/// Two-level nested-logit probabilities for utilities `v` with nest
/// scales `mu` (`mu[0]` is expected to be one).
pub fn nl_probabilities(v: &[f64], nests: &[Vec<usize>], mu: &[f64]) -> Result<Vec<f64>> {
    let layout = nest_layout(nests, v.len())?;
    if mu.len() != layout.nests {
        return Err(Error::dim("nest scales", layout.nests, mu.len()));
    }
    if v.iter().chain(mu).any(|a| !a.is_finite()) || mu.iter().any(|&m| m <= 0.0) {
        return Err(Error::InvalidArgument("utilities must be finite and scales positive".into()));
    }
    let row = NestedLogitRow::compute(v, &layout, mu);
    Ok(row.log_p.iter().map(|l| l.exp()).collect())
}
