use serde::{Deserialize, Serialize};

use crate::data::ChoiceDataset;
use crate::error::{Error, Result};
use crate::math::NestLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mnl,
    Nl,
    Fdnn,
    Asudnn,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Mnl => "mnl",
            Family::Nl => "nl",
            Family::Fdnn => "fdnn",
            Family::Asudnn => "asudnn",
        }
    }

    pub fn is_dnn(self) -> bool {
        matches!(self, Family::Fdnn | Family::Asudnn)
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "mnl" => Ok(Family::Mnl),
            "nl" => Ok(Family::Nl),
            "fdnn" => Ok(Family::Fdnn),
            "asudnn" | "asu" => Ok(Family::Asudnn),
            _ => Err(Error::InvalidArgument(format!(
                "unknown model family `{s}` (expected mnl, nl, fdnn or asudnn)"
            ))),
        }
    }
}

/// Model architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ArchSpec {
    /// Linear-in-parameters utilities with softmax probabilities.
    Mnl,
    /// Two-level nested logit; `nests` partitions the alternative indices.
    Nl { nests: Vec<Vec<usize>> },
    /// `depth` fully connected ReLU layers of `width` over all inputs.
    Fdnn { depth: usize, width: usize },
    /// Per-alternative subnetworks: `pre_depth` layers of `pre_width` on
    /// each alternative's attributes (and on the individual attributes),
    /// then `post_depth` layers of `post_width` after concatenation.
    Asudnn {
        pre_depth: usize,
        post_depth: usize,
        pre_width: usize,
        post_width: usize,
    },
}

impl ArchSpec {
    pub fn family(&self) -> Family {
        match self {
            ArchSpec::Mnl => Family::Mnl,
            ArchSpec::Nl { .. } => Family::Nl,
            ArchSpec::Fdnn { .. } => Family::Fdnn,
            ArchSpec::Asudnn { .. } => Family::Asudnn,
        }
    }

    pub fn validate(&self, alternatives: usize) -> Result<()> {
        match self {
            ArchSpec::Mnl => Ok(()),
            ArchSpec::Nl { nests } => nest_layout(nests, alternatives).map(|_| ()),
            ArchSpec::Fdnn { depth, width } => {
                if *depth < 1 || *width < 1 {
                    return Err(Error::InvalidArgument(format!(
                        "F-DNN needs depth >= 1 and width >= 1, got depth {depth}, width {width}"
                    )));
                }
                Ok(())
            }
            ArchSpec::Asudnn {
                pre_width,
                post_width,
                ..
            } => {
                if *pre_width < 1 || *post_width < 1 {
                    return Err(Error::InvalidArgument("ASU-DNN widths must be at least 1".into()));
                }
                Ok(())
            }
        }
    }
}

/// Build the nest lookup for a partition of `0..alternatives`.
pub fn nest_layout(nests: &[Vec<usize>], alternatives: usize) -> Result<NestLayout> {
    let mut nest_of = vec![usize::MAX; alternatives];
    for (m, members) in nests.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::InvalidArgument(format!("nest {m} is empty")));
        }
        for &k in members {
            if k >= alternatives {
                return Err(Error::InvalidArgument(format!(
                    "nest {m} names alternative {k}, but there are only {alternatives}"
                )));
            }
            if nest_of[k] != usize::MAX {
                return Err(Error::InvalidArgument(format!("alternative {k} appears in two nests")));
            }
            nest_of[k] = m;
        }
    }
    if let Some(k) = nest_of.iter().position(|&m| m == usize::MAX) {
        return Err(Error::InvalidArgument(format!("alternative {k} is not in any nest")));
    }
    Ok(NestLayout {
        nest_of,
        nests: nests.len(),
    })
}

/// Input dimensions a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub alternatives: usize,
    /// Attributes per alternative.
    pub alt_dims: usize,
    /// Individual attributes; zero when there are none.
    pub ind_dims: usize,
}

impl InputDims {
    pub fn of(ds: &ChoiceDataset) -> Self {
        InputDims {
            alternatives: ds.num_alternatives(),
            alt_dims: ds.alt_dims(),
            ind_dims: ds.ind_dims(),
        }
    }
}

/// Trainable scalar counts by kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub weights: usize,
    pub biases: usize,
    /// Batch-norm scale and shift.
    pub norm: usize,
    /// Nest scale parameters.
    pub scales: usize,
    /// Subset of `weights` in matrices mapping one hidden layer to the next.
    pub hidden_to_hidden: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases + self.norm + self.scales
    }

    fn dense(&mut self, fan_in: usize, fan_out: usize, batch_norm: bool, from_hidden: bool) {
        self.weights += fan_in * fan_out;
        self.biases += fan_out;
        if batch_norm {
            self.norm += 2 * fan_out;
        }
        if from_hidden {
            self.hidden_to_hidden += fan_in * fan_out;
        }
    }

    /// `depth` hidden layers of `width` on `fan_in` inputs; returns output width.
    fn stack(&mut self, fan_in: usize, depth: usize, width: usize, batch_norm: bool) -> usize {
        let mut w = fan_in;
        for l in 0..depth {
            self.dense(w, width, batch_norm, l > 0);
            w = width;
        }
        w
    }
}

/// Exact number of trainable scalars.
pub fn count_params(arch: &ArchSpec, dims: InputDims, batch_norm: bool) -> ParamCount {
    let k = dims.alternatives;
    let mut c = ParamCount::default();
    match arch {
        ArchSpec::Mnl | ArchSpec::Nl { .. } => {
            c.weights = k * dims.alt_dims + dims.ind_dims * (k - 1);
            c.biases = k - 1;
            if let ArchSpec::Nl { nests } = arch {
                c.scales = nests.len().saturating_sub(1);
            }
        }
        ArchSpec::Fdnn { depth, width } => {
            let inputs = dims.ind_dims + k * dims.alt_dims;
            let out = c.stack(inputs, *depth, *width, batch_norm);
            c.weights += out * k;
            c.biases += k;
        }
        ArchSpec::Asudnn {
            pre_depth,
            post_depth,
            pre_width,
            post_width,
        } => {
            let z_out = if dims.ind_dims > 0 {
                c.stack(dims.ind_dims, *pre_depth, *pre_width, batch_norm)
            } else {
                0
            };
            for _ in 0..k {
                let x_out = c.stack(dims.alt_dims, *pre_depth, *pre_width, batch_norm);
                let joined = x_out + z_out;
                let mut w = joined;
                for l in 0..*post_depth {
                    c.dense(w, *post_width, batch_norm, l > 0 || *pre_depth > 0);
                    w = *post_width;
                }
                c.weights += w;
                c.biases += 1;
            }
        }
    }
    c
}
