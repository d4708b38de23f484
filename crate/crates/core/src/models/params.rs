//! Parameter containers.
//!
//! Every container is generic over the tensor slot type so the same layout
//! can hold weights (`Matrix`), their tape leaves (`NodeId`) or their
//! gradients. `map` and the paired `tensors` / `tensors_mut` traversals are
//! what keep those views aligned.

use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, InputDims};
use crate::error::Result;
use crate::math::{he_init, Matrix, RngStream};

/// What a tensor is, for penalties and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
    NormScale,
    NormShift,
    NestScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm<T> {
    pub scale: T,
    pub shift: T,
    pub running: RunningStats,
}

/// Affine map, optionally followed by batch normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    /// `fan_in x fan_out`.
    pub weight: T,
    /// `1 x fan_out`.
    pub bias: T,
    pub norm: Option<Norm<T>>,
}

/// MNL / NL coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// One `d_x x 1` column per alternative.
    pub beta: Vec<T>,
    /// `d_z x (K-1)`; the last alternative is the reference.
    pub gamma: Option<T>,
    /// `1 x (K-1)` alternative-specific constants.
    pub asc: T,
    /// `1 x (M-1)` unconstrained nest scales for nests `1..M`.
    pub theta: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fdnn<T> {
    pub hidden: Vec<Dense<T>>,
    /// `width x K`.
    pub head: Dense<T>,
}

/// One alternative's pathway in an ASU-DNN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subnet<T> {
    pub pre: Vec<Dense<T>>,
    pub post: Vec<Dense<T>>,
    /// `width x 1`.
    pub head: Dense<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Asu<T> {
    /// Shared stack over the individual attributes; empty when there are
    /// none or when `pre_depth` is zero.
    pub z_stack: Vec<Dense<T>>,
    pub alts: Vec<Subnet<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Net<T> {
    Linear(Linear<T>),
    Fdnn(Fdnn<T>),
    Asu(Asu<T>),
}

pub type ModelParams = Net<Matrix>;

impl<T> Norm<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm {
            scale: f(&self.scale),
            shift: f(&self.shift),
            running: self.running.clone(),
        }
    }
}

impl<T> Dense<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Dense<U> {
        Dense {
            weight: f(&self.weight),
            bias: f(&self.bias),
            norm: self.norm.as_ref().map(|n| n.map(f)),
        }
    }

    fn tensors<'a>(&'a self, out: &mut Vec<(Role, &'a T)>) {
        out.push((Role::Weight, &self.weight));
        out.push((Role::Bias, &self.bias));
        if let Some(n) = &self.norm {
            out.push((Role::NormScale, &n.scale));
            out.push((Role::NormShift, &n.shift));
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(Role, &'a mut T)>) {
        out.push((Role::Weight, &mut self.weight));
        out.push((Role::Bias, &mut self.bias));
        if let Some(n) = &mut self.norm {
            out.push((Role::NormScale, &mut n.scale));
            out.push((Role::NormShift, &mut n.shift));
        }
    }
}

fn map_layers<T, U>(layers: &[Dense<T>], f: &mut impl FnMut(&T) -> U) -> Vec<Dense<U>> {
    layers.iter().map(|l| l.map(f)).collect()
}

impl<T> Net<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Net<U> {
        let f = &mut f;
        match self {
            Net::Linear(p) => Net::Linear(Linear {
                beta: p.beta.iter().map(&mut *f).collect(),
                gamma: p.gamma.as_ref().map(&mut *f),
                asc: f(&p.asc),
                theta: p.theta.as_ref().map(&mut *f),
            }),
            Net::Fdnn(p) => Net::Fdnn(Fdnn {
                hidden: map_layers(&p.hidden, f),
                head: p.head.map(f),
            }),
            Net::Asu(p) => Net::Asu(Asu {
                z_stack: map_layers(&p.z_stack, f),
                alts: p
                    .alts
                    .iter()
                    .map(|s| Subnet {
                        pre: map_layers(&s.pre, f),
                        post: map_layers(&s.post, f),
                        head: s.head.map(f),
                    })
                    .collect(),
            }),
        }
    }

    /// Every trainable tensor in canonical order.
    pub fn tensors(&self) -> Vec<(Role, &T)> {
        let mut out = Vec::new();
        match self {
            Net::Linear(p) => {
                out.extend(p.beta.iter().map(|b| (Role::Weight, b)));
                if let Some(g) = &p.gamma {
                    out.push((Role::Weight, g));
                }
                out.push((Role::Bias, &p.asc));
                if let Some(t) = &p.theta {
                    out.push((Role::NestScale, t));
                }
            }
            Net::Fdnn(p) => {
                p.hidden.iter().for_each(|l| l.tensors(&mut out));
                p.head.tensors(&mut out);
            }
            Net::Asu(p) => {
                p.z_stack.iter().for_each(|l| l.tensors(&mut out));
                for s in &p.alts {
                    s.pre.iter().for_each(|l| l.tensors(&mut out));
                    s.post.iter().for_each(|l| l.tensors(&mut out));
                    s.head.tensors(&mut out);
                }
            }
        }
        out
    }

    /// Same order as [`Net::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(Role, &mut T)> {
        let mut out = Vec::new();
        match self {
            Net::Linear(p) => {
                out.extend(p.beta.iter_mut().map(|b| (Role::Weight, b)));
                if let Some(g) = &mut p.gamma {
                    out.push((Role::Weight, g));
                }
                out.push((Role::Bias, &mut p.asc));
                if let Some(t) = &mut p.theta {
                    out.push((Role::NestScale, t));
                }
            }
            Net::Fdnn(p) => {
                p.hidden.iter_mut().for_each(|l| l.tensors_mut(&mut out));
                p.head.tensors_mut(&mut out);
            }
            Net::Asu(p) => {
                p.z_stack.iter_mut().for_each(|l| l.tensors_mut(&mut out));
                for s in &mut p.alts {
                    s.pre.iter_mut().for_each(|l| l.tensors_mut(&mut out));
                    s.post.iter_mut().for_each(|l| l.tensors_mut(&mut out));
                    s.head.tensors_mut(&mut out);
                }
            }
        }
        out
    }

    /// Batch-norm layers in canonical order.
    pub fn norms(&self) -> Vec<&Norm<T>> {
        self.layers().into_iter().filter_map(|l| l.norm.as_ref()).collect()
    }

    pub fn norms_mut(&mut self) -> Vec<&mut Norm<T>> {
        self.layers_mut().into_iter().filter_map(|l| l.norm.as_mut()).collect()
    }

    fn layers(&self) -> Vec<&Dense<T>> {
        match self {
            Net::Linear(_) => vec![],
            Net::Fdnn(p) => p.hidden.iter().chain(std::iter::once(&p.head)).collect(),
            Net::Asu(p) => {
                let mut out: Vec<&Dense<T>> = p.z_stack.iter().collect();
                for s in &p.alts {
                    out.extend(s.pre.iter().chain(&s.post).chain(std::iter::once(&s.head)));
                }
                out
            }
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense<T>> {
        match self {
            Net::Linear(_) => vec![],
            Net::Fdnn(p) => p.hidden.iter_mut().chain(std::iter::once(&mut p.head)).collect(),
            Net::Asu(p) => {
                let mut out: Vec<&mut Dense<T>> = p.z_stack.iter_mut().collect();
                for s in &mut p.alts {
                    out.extend(
                        s.pre
                            .iter_mut()
                            .chain(s.post.iter_mut())
                            .chain(std::iter::once(&mut s.head)),
                    );
                }
                out
            }
        }
    }

    /// Copy running batch-norm statistics from a view with the same layout.
    pub fn copy_running_from<U>(&mut self, other: &Net<U>) {
        for (dst, src) in self.norms_mut().into_iter().zip(other.norms()) {
            dst.running = src.running.clone();
        }
    }
}

impl Net<Matrix> {
    /// Freshly initialized parameters: He-normal weights for networks,
    /// zeros for biases, unit scale and zero shift for batch norm, and
    /// all-zero coefficients for MNL / NL.
    pub fn init(arch: &ArchSpec, dims: InputDims, batch_norm: bool, rng: &mut RngStream) -> Result<Self> {
        arch.validate(dims.alternatives)?;
        let k = dims.alternatives;
        let net = match arch {
            ArchSpec::Mnl | ArchSpec::Nl { .. } => {
                let nests = match arch {
                    ArchSpec::Nl { nests } => nests.len(),
                    _ => 1,
                };
                Net::Linear(Linear {
                    beta: (0..k).map(|_| Matrix::zeros(dims.alt_dims.max(1), 1)).collect(),
                    gamma: (dims.ind_dims > 0).then(|| Matrix::zeros(dims.ind_dims, k - 1)),
                    asc: Matrix::zeros(1, k - 1),
                    theta: (nests > 1).then(|| Matrix::zeros(1, nests - 1)),
                })
            }
            ArchSpec::Fdnn { depth, width } => {
                let inputs = dims.ind_dims + k * dims.alt_dims;
                let (hidden, w) = stack(inputs, *depth, *width, batch_norm, rng)?;
                Net::Fdnn(Fdnn {
                    hidden,
                    head: dense(w, k, false, rng)?,
                })
            }
            ArchSpec::Asudnn {
                pre_depth,
                post_depth,
                pre_width,
                post_width,
            } => {
                let (z_stack, z_out) = if dims.ind_dims > 0 {
                    stack(dims.ind_dims, *pre_depth, *pre_width, batch_norm, rng)?
                } else {
                    (vec![], 0)
                };
                let mut alts = Vec::with_capacity(k);
                for _ in 0..k {
                    let (pre, x_out) = stack(dims.alt_dims, *pre_depth, *pre_width, batch_norm, rng)?;
                    let (post, w) = stack(x_out + z_out, *post_depth, *post_width, batch_norm, rng)?;
                    alts.push(Subnet {
                        pre,
                        post,
                        head: dense(w, 1, false, rng)?,
                    });
                }
                Net::Asu(Asu { z_stack, alts })
            }
        };
        Ok(net)
    }

    /// Frobenius norms of the weight matrices, in canonical order.
    pub fn weight_norms(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .filter(|(r, _)| *r == Role::Weight)
            .map(|(_, m)| m.frobenius_norm())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

fn dense(fan_in: usize, fan_out: usize, batch_norm: bool, rng: &mut RngStream) -> Result<Dense<Matrix>> {
    Ok(Dense {
        weight: he_init(fan_in, fan_out, rng)?,
        bias: Matrix::zeros(1, fan_out),
        norm: batch_norm.then(|| Norm {
            scale: Matrix::filled(1, fan_out, 1.0),
            shift: Matrix::zeros(1, fan_out),
            running: RunningStats {
                mean: vec![0.0; fan_out],
                var: vec![1.0; fan_out],
            },
        }),
    })
}

fn stack(
    fan_in: usize,
    depth: usize,
    width: usize,
    batch_norm: bool,
    rng: &mut RngStream,
) -> Result<(Vec<Dense<Matrix>>, usize)> {
    let mut layers = Vec::with_capacity(depth);
    let mut w = fan_in;
    for _ in 0..depth {
        layers.push(dense(w, width, batch_norm, rng)?);
        w = width;
    }
    Ok((layers, w))
}
