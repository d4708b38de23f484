//! Reverse-mode differentiation over mini-batch matrices.
//!
//! Every forward computation is recorded as an ordered list of nodes. A node
//! holds its value and the primitive that produced it; `backward` walks the
//! list once in reverse and accumulates adjoints. Nodes only reference
//! earlier nodes, so the list is already a topological order.

use super::matrix::Matrix;
use super::ops::{BATCH_NORM_EPS, PROBABILITY_FLOOR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Nest structure for the nested-logit loss: `nest_of[k]` is the nest of
/// alternative `k`; nest 0 has its scale pinned to one.
#[derive(Debug, Clone, PartialEq)]
pub struct NestLayout {
    pub nest_of: Vec<usize>,
    pub nests: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Mask(NodeId, Matrix),
    BatchNorm {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    BatchNormFixed {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Concat(Vec<NodeId>),
    Softmax(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    NestedLogitCrossEntropy {
        utilities: NodeId,
        theta: Option<NodeId>,
        layout: NestLayout,
        labels: Vec<usize>,
    },
    L1(NodeId),
    SumSquares(NodeId),
    WeightedSum(Vec<(f64, NodeId)>),
}

/// Values saved by the forward pass for later inspection.
#[derive(Debug, Clone, Default)]
enum Saved {
    #[default]
    None,
    Moments {
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    saved: Saved,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to leaf `node`; zero if the loss does not
    /// depend on it. Interior nodes are not retained.
    pub fn wrt(&self, node: NodeId) -> Matrix {
        match &self.adjoints[node.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[node.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, node: NodeId) -> Option<&Matrix> {
        self.adjoints[node.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(value, Op::Input, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(value, Op::Param, true)
    }

    fn push_leaf(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            saved: Saved::None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let (value, saved) = evaluate(&op, &|id: NodeId| &self.nodes[id.0].value)?;
        let requires_grad = inputs_of(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            saved,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias(a, bias))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, a: NodeId, mask: Matrix) -> Result<NodeId> {
        self.push(Op::Mask(a, mask))
    }

    /// Train-mode batch normalization using the batch's own moments.
    pub fn batch_norm(&mut self, input: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        self.push(Op::BatchNorm {
            input,
            scale,
            shift,
        })
    }

    /// Batch normalization with fixed (running) moments.
    pub fn batch_norm_fixed(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
    ) -> Result<NodeId> {
        self.push(Op::BatchNormFixed {
            input,
            scale,
            shift,
            mean,
            var,
        })
    }

    /// Batch moments recorded by a train-mode batch-norm node.
    pub fn batch_moments(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].saved {
            Saved::Moments { mean, var } => Some((mean, var)),
            Saved::None => None,
        }
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        self.push(Op::Concat(parts))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, logits: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(logits))
    }

    /// Mean cross-entropy of row-wise softmax against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        self.push(Op::SoftmaxCrossEntropy { logits, labels })
    }

    /// Mean cross-entropy of two-level nested-logit probabilities.
    ///
    /// `theta` holds the unconstrained scales of nests `1..`; nest `m`
    /// uses `mu = 1 + softplus(theta[m - 1])`.
    pub fn nested_logit_cross_entropy(
        &mut self,
        utilities: NodeId,
        theta: Option<NodeId>,
        layout: NestLayout,
        labels: Vec<usize>,
    ) -> Result<NodeId> {
        self.push(Op::NestedLogitCrossEntropy {
            utilities,
            theta,
            layout,
            labels,
        })
    }

    pub fn l1(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::L1(a))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumSquares(a))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(f64, NodeId)>) -> Result<NodeId> {
        self.push(Op::WeightedSum(terms))
    }

    /// Recompute every non-leaf node from the recorded primitives.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Input | Op::Param => node.value.clone(),
                ref op => evaluate(op, &|id: NodeId| &values[id.0])?.0,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Sign pattern (`input > 0`) of every ReLU on the tape, in order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.nodes[a.0].value.as_slice().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss node, found shape {:?}",
                root.value.shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input | Op::Param) || !node.requires_grad {
                continue;
            }
            // interior adjoints are consumed; only leaves keep theirs
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, g, &mut adj)?;
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, mut g: Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, Matrix::product(&g, false, val(*b), true)?);
                }
                if self.wants(*b) {
                    accumulate(adj, *b, Matrix::product(val(*a), true, &g, false)?);
                }
            }
            Op::AddBias(a, bias) => {
                if self.wants(*bias) {
                    accumulate(adj, *bias, column_sums(&g));
                }
                if self.wants(*a) {
                    accumulate(adj, *a, g);
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                for (dv, &xv) in g.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                accumulate(adj, *a, g);
            }
            Op::Mask(a, mask) => {
                for (dv, m) in g.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *dv *= m;
                }
                accumulate(adj, *a, g);
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
            } => {
                let Saved::Moments { mean, var } = &node.saved else {
                    unreachable!("batch-norm node without saved moments")
                };
                let x = val(*input);
                let gamma = val(*scale).as_slice();
                let (rows, cols) = x.shape();
                let n = rows as f64;
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
                // dscale = sum g * xhat, dshift = sum g
                let mut dscale = Matrix::zeros(1, cols);
                let mut dshift = Matrix::zeros(1, cols);
                for (xr, gr) in x.as_slice().chunks_exact(cols).zip(g.as_slice().chunks_exact(cols)) {
                    let ds = dscale.as_mut_slice();
                    let dh = dshift.as_mut_slice();
                    for j in 0..cols {
                        ds[j] += gr[j] * (xr[j] - mean[j]) * inv_std[j];
                        dh[j] += gr[j];
                    }
                }
                if self.wants(*input) {
                    let (ds, dh) = (dscale.as_slice(), dshift.as_slice());
                    for (xr, gr) in x.as_slice().chunks_exact(cols).zip(g.as_mut_slice().chunks_exact_mut(cols)) {
                        for j in 0..cols {
                            let xhat = (xr[j] - mean[j]) * inv_std[j];
                            gr[j] = gamma[j] * inv_std[j] / n * (n * gr[j] - dh[j] - xhat * ds[j]);
                        }
                    }
                    accumulate(adj, *input, g);
                }
                if self.wants(*scale) {
                    accumulate(adj, *scale, dscale);
                }
                if self.wants(*shift) {
                    accumulate(adj, *shift, dshift);
                }
            }
            Op::BatchNormFixed {
                input,
                scale,
                shift,
                mean,
                var,
            } => {
                let x = val(*input);
                let gamma = val(*scale).as_slice();
                let cols = x.cols();
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
                let mut dx = Matrix::zeros(x.rows(), cols);
                let mut dscale = Matrix::zeros(1, cols);
                for r in 0..x.rows() {
                    for j in 0..cols {
                        let gy = g.get(r, j);
                        dx.set(r, j, gy * gamma[j] * inv_std[j]);
                        dscale.as_mut_slice()[j] += gy * (x.get(r, j) - mean[j]) * inv_std[j];
                    }
                }
                if self.wants(*input) {
                    accumulate(adj, *input, dx);
                }
                if self.wants(*scale) {
                    accumulate(adj, *scale, dscale);
                }
                if self.wants(*shift) {
                    accumulate(adj, *shift, column_sums(&g));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.wants(*p) {
                        accumulate(adj, *p, g.column_block(offset, w));
                    }
                    offset += w;
                }
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let mut d = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let pr = p.row(r);
                    let gr = g.row(r);
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for (j, out) in d.row_mut(r).iter_mut().enumerate() {
                        *out = pr[j] * (gr[j] - dot);
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let v = val(*logits);
                let scale = g.as_slice()[0] / v.rows() as f64;
                let mut d = Matrix::zeros(v.rows(), v.cols());
                for (r, &y) in labels.iter().enumerate() {
                    let out = d.row_mut(r);
                    out.copy_from_slice(v.row(r));
                    super::ops::softmax_in_place(out);
                    if out[y] < PROBABILITY_FLOOR {
                        out.fill(0.0);
                        continue;
                    }
                    out[y] -= 1.0;
                    out.iter_mut().for_each(|x| *x *= scale);
                }
                accumulate(adj, *logits, d);
            }
            Op::NestedLogitCrossEntropy {
                utilities,
                theta,
                layout,
                labels,
            } => {
                let v = val(*utilities);
                let theta_vals = theta.map(|t| val(t).as_slice().to_vec()).unwrap_or_default();
                let mu = nest_scales(layout.nests, &theta_vals);
                let scale = g.as_slice()[0] / v.rows() as f64;
                let mut dv = Matrix::zeros(v.rows(), v.cols());
                let mut dmu = vec![0.0; layout.nests];
                for (r, &y) in labels.iter().enumerate() {
                    let row = NestedLogitRow::compute(v.row(r), layout, &mu);
                    if row.log_p[y].exp() < PROBABILITY_FLOOR {
                        continue;
                    }
                    let ny = layout.nest_of[y];
                    let out = dv.row_mut(r);
                    for (j, o) in out.iter_mut().enumerate() {
                        let l = layout.nest_of[j];
                        let p_j = row.log_p[j].exp();
                        let mut d = -p_j;
                        if l == ny {
                            d += (1.0 - mu[ny]) * row.within[j];
                            if j == y {
                                d += mu[ny];
                            }
                        }
                        // loss is -log P_y
                        *o = -d * scale;
                    }
                    for m in 0..layout.nests {
                        let da = row.mean_utility[m] / mu[m] - row.inclusive[m] / (mu[m] * mu[m]);
                        let mut d = -row.nest_prob[m] * da;
                        if m == ny {
                            d += v.get(r, y) - row.mean_utility[m] + da;
                        }
                        dmu[m] -= d * scale;
                    }
                }
                if self.wants(*utilities) {
                    accumulate(adj, *utilities, dv);
                }
                if let Some(t) = theta {
                    if self.wants(*t) {
                        let data = theta_vals
                            .iter()
                            .enumerate()
                            .map(|(i, &th)| dmu[i + 1] * sigmoid(th))
                            .collect();
                        accumulate(adj, *t, Matrix::from_vec(1, theta_vals.len(), data)?);
                    }
                }
            }
            Op::L1(a) => {
                let s = g.as_slice()[0];
                let d = val(*a).map(|w| if w > 0.0 { s } else if w < 0.0 { -s } else { 0.0 });
                accumulate(adj, *a, d);
            }
            Op::SumSquares(a) => {
                let s = g.as_slice()[0];
                accumulate(adj, *a, val(*a).map(|w| 2.0 * s * w));
            }
            Op::WeightedSum(terms) => {
                for &(c, id) in terms {
                    if self.wants(id) {
                        let mut d = g.clone();
                        d.as_mut_slice().iter_mut().for_each(|x| *x *= c);
                        accumulate(adj, id, d);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, d: Matrix) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_scaled(1.0, &d),
        slot @ None => *slot = Some(d),
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn inputs_of(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Input | Op::Param => vec![],
        Op::MatMul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
        Op::Relu(a) | Op::Mask(a, _) | Op::Softmax(a) | Op::L1(a) | Op::SumSquares(a) => vec![*a],
        Op::BatchNorm {
            input,
            scale,
            shift,
        }
        | Op::BatchNormFixed {
            input,
            scale,
            shift,
            ..
        } => vec![*input, *scale, *shift],
        Op::Concat(parts) => parts.clone(),
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        Op::NestedLogitCrossEntropy {
            utilities, theta, ..
        } => {
            let mut v = vec![*utilities];
            v.extend(theta.iter().copied());
            v
        }
        Op::WeightedSum(terms) => terms.iter().map(|&(_, id)| id).collect(),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Nest scales with nest 0 pinned to one.
pub(crate) fn nest_scales(nests: usize, theta: &[f64]) -> Vec<f64> {
    std::iter::once(1.0)
        .chain(theta.iter().map(|&t| 1.0 + softplus(t)))
        .take(nests)
        .collect()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-observation nested-logit quantities.
#[derive(Debug, Clone)]
pub(crate) struct NestedLogitRow {
    /// log P_k for each alternative.
    pub log_p: Vec<f64>,
    /// P(k | nest of k).
    pub within: Vec<f64>,
    /// P(nest m).
    pub nest_prob: Vec<f64>,
    /// I_m = log sum_{j in m} exp(mu_m V_j).
    pub inclusive: Vec<f64>,
    /// sum_{j in m} P(j | m) V_j.
    pub mean_utility: Vec<f64>,
}

impl NestedLogitRow {
    pub fn compute(v: &[f64], layout: &NestLayout, mu: &[f64]) -> Self {
        let k = v.len();
        let members = |m: usize| (0..k).filter(move |&j| layout.nest_of[j] == m);
        let inclusive: Vec<f64> = (0..layout.nests)
            .map(|m| log_sum_exp(members(m).map(|j| mu[m] * v[j])))
            .collect();
        let scaled: Vec<f64> = (0..layout.nests).map(|m| inclusive[m] / mu[m]).collect();
        let top = log_sum_exp(scaled.iter().copied());
        let nest_prob: Vec<f64> = scaled.iter().map(|a| (a - top).exp()).collect();
        let mut within = vec![0.0; k];
        let mut log_p = vec![0.0; k];
        let mut mean_utility = vec![0.0; layout.nests];
        for j in 0..k {
            let m = layout.nest_of[j];
            let log_within = mu[m] * v[j] - inclusive[m];
            within[j] = log_within.exp();
            log_p[j] = log_within + scaled[m] - top;
            mean_utility[m] += within[j] * v[j];
        }
        NestedLogitRow {
            log_p,
            within,
            nest_prob,
            inclusive,
            mean_utility,
        }
    }
}

type Lookup<'a> = dyn Fn(NodeId) -> &'a Matrix + 'a;

fn evaluate<'a>(op: &Op, val: &Lookup<'a>) -> Result<(Matrix, Saved)> {
    let plain = |m: Matrix| Ok((m, Saved::None));
    match op {
        Op::Input | Op::Param => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => plain(val(*a).matmul(val(*b))?),
        Op::AddBias(a, bias) => {
            let (x, b) = (val(*a), val(*bias));
            if b.rows() != 1 || b.cols() != x.cols() {
                return Err(Error::dim("add_bias", format!("1x{}", x.cols()), format!("{:?}", b.shape())));
            }
            let mut out = x.clone();
            for r in 0..out.rows() {
                for (o, bv) in out.row_mut(r).iter_mut().zip(b.as_slice()) {
                    *o += bv;
                }
            }
            plain(out)
        }
        Op::Relu(a) => plain(val(*a).map(|v| v.max(0.0))),
        Op::Mask(a, mask) => {
            let x = val(*a);
            if x.shape() != mask.shape() {
                return Err(Error::dim("mask", format!("{:?}", x.shape()), format!("{:?}", mask.shape())));
            }
            let mut out = x.clone();
            for (o, m) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *o *= m;
            }
            plain(out)
        }
        Op::BatchNorm {
            input,
            scale,
            shift,
        } => {
            let x = val(*input);
            if x.rows() < 2 {
                return Err(Error::InvalidArgument(
                    "train-mode batch normalization needs at least two samples".into(),
                ));
            }
            let (mean, var) = super::ops::batch_moments(x);
            let out = normalize(x, val(*scale), val(*shift), &mean, &var)?;
            Ok((out, Saved::Moments { mean, var }))
        }
        Op::BatchNormFixed {
            input,
            scale,
            shift,
            mean,
            var,
        } => plain(normalize(val(*input), val(*scale), val(*shift), mean, var)?),
        Op::Concat(parts) => {
            let mats: Vec<&Matrix> = parts.iter().map(|p| val(*p)).collect();
            plain(Matrix::hcat(&mats)?)
        }
        Op::Softmax(a) => {
            let mut out = val(*a).clone();
            if out.cols() < 2 {
                return Err(Error::InvalidArgument("softmax needs at least two columns".into()));
            }
            for r in 0..out.rows() {
                super::ops::softmax_in_place(out.row_mut(r));
            }
            plain(out)
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let v = val(*logits);
            check_labels(labels, v)?;
            let mut total = 0.0;
            let mut p = vec![0.0; v.cols()];
            for (r, &y) in labels.iter().enumerate() {
                p.copy_from_slice(v.row(r));
                super::ops::softmax_in_place(&mut p);
                total -= p[y].max(PROBABILITY_FLOOR).ln();
            }
            plain(Matrix::scalar(total / v.rows() as f64))
        }
        Op::NestedLogitCrossEntropy {
            utilities,
            theta,
            layout,
            labels,
        } => {
            let v = val(*utilities);
            check_labels(labels, v)?;
            if layout.nest_of.len() != v.cols() {
                return Err(Error::dim("nested logit", v.cols(), layout.nest_of.len()));
            }
            let theta_vals = theta.map(|t| val(t).as_slice().to_vec()).unwrap_or_default();
            if theta_vals.len() + 1 != layout.nests {
                return Err(Error::dim("nested logit scales", layout.nests - 1, theta_vals.len()));
            }
            let mu = nest_scales(layout.nests, &theta_vals);
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                let row = NestedLogitRow::compute(v.row(r), layout, &mu);
                total -= row.log_p[y].max(PROBABILITY_FLOOR.ln());
            }
            plain(Matrix::scalar(total / v.rows() as f64))
        }
        Op::L1(a) => plain(Matrix::scalar(val(*a).l1_norm())),
        Op::SumSquares(a) => plain(Matrix::scalar(val(*a).sum_squares())),
        Op::WeightedSum(terms) => {
            let (_, first) = terms
                .first()
                .ok_or_else(|| Error::InvalidArgument("empty weighted sum".into()))?;
            let (r, c) = val(*first).shape();
            let mut out = Matrix::zeros(r, c);
            for &(coef, id) in terms {
                let m = val(id);
                if m.shape() != (r, c) {
                    return Err(Error::dim("weighted_sum", format!("{r}x{c}"), format!("{:?}", m.shape())));
                }
                out.add_scaled(coef, m);
            }
            plain(out)
        }
    }
}

fn check_labels(labels: &[usize], v: &Matrix) -> Result<()> {
    if labels.len() != v.rows() {
        return Err(Error::dim("labels", v.rows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= v.cols()) {
        return Err(Error::dim("label", format!("< {}", v.cols()), bad));
    }
    Ok(())
}

fn normalize(x: &Matrix, scale: &Matrix, shift: &Matrix, mean: &[f64], var: &[f64]) -> Result<Matrix> {
    let cols = x.cols();
    if scale.cols() != cols || shift.cols() != cols || mean.len() != cols || var.len() != cols {
        return Err(Error::dim("batch_norm", cols, scale.cols()));
    }
    let mut out = Matrix::zeros(x.rows(), cols);
    for r in 0..x.rows() {
        for j in 0..cols {
            let xhat = (x.get(r, j) - mean[j]) / (var[j] + BATCH_NORM_EPS).sqrt();
            out.set(r, j, scale.as_slice()[j] * xhat + shift.as_slice()[j]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_softmax_gradient_matches_closed_form() {
        // one sample, logits = x W, gradient of CE is x^T (p - y)
        let x = m(&[vec![0.5, -1.0, 2.0]]);
        let w = m(&[vec![0.1, -0.2], vec![0.3, 0.4], vec![-0.5, 0.6]]);
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let wi = tape.param(w.clone());
        let logits = tape.matmul(xi, wi).unwrap();
        let loss = tape.softmax_cross_entropy(logits, vec![1]).unwrap();
        let grads = tape.backward(loss).unwrap();

        let v = x.matmul(&w).unwrap();
        let p = crate::math::ops::softmax(v.row(0)).unwrap();
        let diff = [p[0], p[1] - 1.0];
        let gw = grads.wrt(wi);
        for i in 0..3 {
            for j in 0..2 {
                assert!((gw.get(i, j) - x.get(0, i) * diff[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_signal_gives_zero_gradient() {
        // p == y exactly only in the limit; with huge separation the
        // softmax rounds to one-hot and the gradient is exactly zero.
        let mut tape = Tape::new();
        let w = tape.param(m(&[vec![1000.0, -1000.0]]));
        let x = tape.input(m(&[vec![1.0]]));
        let v = tape.matmul(x, w).unwrap();
        let loss = tape.softmax_cross_entropy(v, vec![0]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(w).as_slice().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.param(m(&[vec![1.0, 2.0]]));
        let r = tape.relu(a).unwrap();
        assert!(tape.backward(r).is_err());
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.input(m(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.5, 0.2]]));
        let w = tape.param(m(&[vec![0.3, -0.7, 0.2], vec![1.1, 0.4, -0.9]]));
        let b = tape.param(m(&[vec![0.1, 0.2, 0.3]]));
        let s = tape.param(m(&[vec![1.0, 0.5, 2.0]]));
        let t = tape.param(m(&[vec![0.0, -0.1, 0.1]]));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.add_bias(h, b).unwrap();
        let h = tape.batch_norm(h, s, t).unwrap();
        let h = tape.relu(h).unwrap();
        let h = tape.mask(h, Matrix::filled(3, 3, 2.0)).unwrap();
        let loss = tape.softmax_cross_entropy(h, vec![0, 2, 1]).unwrap();
        let replayed = tape.replay().unwrap();
        for i in 0..tape.len() {
            let a = tape.value(NodeId(i)).as_slice();
            let b = replayed[i].as_slice();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let _ = loss;
    }

    #[test]
    fn nested_logit_with_unit_scales_is_softmax() {
        let layout = NestLayout {
            nest_of: vec![0, 0, 1, 1],
            nests: 2,
        };
        let v = [0.3, -0.4, 1.2, 0.1];
        let row = NestedLogitRow::compute(&v, &layout, &[1.0, 1.0]);
        let p = crate::math::ops::softmax(&v).unwrap();
        for k in 0..4 {
            assert!((row.log_p[k].exp() - p[k]).abs() < 1e-12);
        }
    }
}
