//! Synthetic choice data from a known random-utility process.
//!
//! Each alternative's utility is a deterministic function of the sampled
//! attributes plus independent standard Gumbel noise, and the chosen
//! alternative is the utility maximizer. Because the deterministic part is
//! known, the generator doubles as an oracle for true probabilities and
//! for the Bayes accuracy ceiling.

use serde::{Deserialize, Serialize};

use crate::data::{ChoiceDataset, Observation};
use crate::error::{Error, Result};
use crate::math::{softmax, RngStream};
use crate::training::argmax;

/// Sampling distribution of one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum Dist {
    Normal { mean: f64, sd: f64 },
    /// Log-normal with the given mean and standard deviation of the variable itself.
    LogNormal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
    Bernoulli { p: f64 },
    Constant { value: f64 },
}

impl Dist {
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        match *self {
            Dist::Normal { mean, sd } => mean + sd * rng.standard_normal(),
            Dist::LogNormal { mean, sd } => {
                let s2 = (1.0 + (sd / mean).powi(2)).ln();
                let mu = mean.ln() - s2 / 2.0;
                (mu + s2.sqrt() * rng.standard_normal()).exp()
            }
            Dist::Uniform { low, high } => low + (high - low) * rng.uniform(),
            Dist::Bernoulli { p } => f64::from(u8::from(rng.uniform() < p)),
            Dist::Constant { value } => value,
        }
    }

    /// Nominal standard deviation, used to put default coefficients on a
    /// common scale.
    pub fn scale(&self) -> f64 {
        match *self {
            Dist::Normal { sd, .. } | Dist::LogNormal { sd, .. } => sd,
            Dist::Uniform { low, high } => (high - low) / 12f64.sqrt(),
            Dist::Bernoulli { p } => (p * (1.0 - p)).sqrt(),
            Dist::Constant { .. } => 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Dist::Normal { mean, sd } => mean.is_finite() && sd >= 0.0 && sd.is_finite(),
            Dist::LogNormal { mean, sd } => mean > 0.0 && sd >= 0.0 && mean.is_finite() && sd.is_finite(),
            Dist::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
            Dist::Bernoulli { p } => (0.0..=1.0).contains(&p),
            Dist::Constant { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid distribution {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UtilityForm {
    /// `asc + beta . x_k + gamma . z`.
    Linear,
    /// Adds quadratic attribute terms and first-attribute by `z`
    /// interactions; each utility still depends only on `(x_k, z)`.
    NonlinearAsu,
    /// Adds a cross-alternative term on the first attribute.
    NonlinearFull,
}

/// Utility coefficients. Rows are alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub asc: Vec<f64>,
    /// `K x d_x`.
    pub beta: Vec<Vec<f64>>,
    /// `K x d_z`.
    pub gamma: Vec<Vec<f64>>,
    /// `K x d_x`, coefficient on the squared attribute.
    #[serde(default)]
    pub quadratic: Vec<Vec<f64>>,
    /// `K x d_z`, coefficient on `x_k[0] * z[j]`.
    #[serde(default)]
    pub interaction: Vec<Vec<f64>>,
    /// Coefficient on `x_k[0]` times the mean of `x_j[0]` over the other
    /// alternatives.
    #[serde(default)]
    pub cross: f64,
}

impl Coefficients {
    fn scale(&mut self, c: f64) {
        let rows = |m: &mut Vec<Vec<f64>>| m.iter_mut().flatten().for_each(|v| *v *= c);
        self.asc.iter_mut().for_each(|v| *v *= c);
        rows(&mut self.beta);
        rows(&mut self.gamma);
        rows(&mut self.quadratic);
        rows(&mut self.interaction);
        self.cross *= c;
    }
}

/// Extra noise shared by the alternatives of a nest, which correlates
/// their utilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestNoise {
    pub nests: Vec<Vec<usize>>,
    /// Scale of the per-nest Gumbel draw.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub alternatives: Vec<String>,
    pub attributes: Vec<String>,
    #[serde(default)]
    pub individual: Vec<String>,
    /// `K x d_x`; `None` marks an attribute the alternative does not have.
    pub x_dist: Vec<Vec<Option<Dist>>>,
    #[serde(default)]
    pub z_dist: Vec<Dist>,
    pub form: UtilityForm,
    pub coefficients: Coefficients,
    /// Multiplier on the standard Gumbel noise; zero makes choices
    /// deterministic.
    pub noise_scale: f64,
    #[serde(default)]
    pub nest_noise: Option<NestNoise>,
}

impl DgpSpec {
    pub fn num_alternatives(&self) -> usize {
        self.alternatives.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.alternatives.len();
        let dx = self.attributes.len();
        let dz = self.individual.len();
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if k < 2 || dx == 0 {
            return bad("a DGP needs at least two alternatives and one attribute".into());
        }
        if self.x_dist.len() != k || self.x_dist.iter().any(|r| r.len() != dx) {
            return bad(format!("x_dist must be {k} x {dx}"));
        }
        if self.z_dist.len() != dz {
            return bad(format!("z_dist must have {dz} entries"));
        }
        for d in self.x_dist.iter().flatten().flatten().chain(&self.z_dist) {
            d.validate()?;
        }
        let c = &self.coefficients;
        let shape_ok = |m: &Vec<Vec<f64>>, cols: usize, optional: bool| {
            (optional && m.is_empty()) || (m.len() == k && m.iter().all(|r| r.len() == cols))
        };
        if c.asc.len() != k || !shape_ok(&c.beta, dx, false) || !shape_ok(&c.gamma, dz, dz == 0) {
            return bad("coefficient shapes do not match the alternatives and attributes".into());
        }
        if !shape_ok(&c.quadratic, dx, true) || !shape_ok(&c.interaction, dz, true) {
            return bad("nonlinear coefficient shapes do not match".into());
        }
        let all = c
            .asc
            .iter()
            .chain(c.beta.iter().flatten())
            .chain(c.gamma.iter().flatten())
            .chain(c.quadratic.iter().flatten())
            .chain(c.interaction.iter().flatten())
            .chain(std::iter::once(&c.cross));
        if all.into_iter().any(|v| !v.is_finite()) {
            return bad("coefficients must be finite".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be finite and non-negative, got {}", self.noise_scale));
        }
        if self.form == UtilityForm::NonlinearFull && c.cross == 0.0 {
            return bad("the nonlinear-full form needs a nonzero cross coefficient".into());
        }
        if let Some(nn) = &self.nest_noise {
            crate::models::nest_layout(&nn.nests, k)?;
            if !(nn.scale >= 0.0 && nn.scale.is_finite()) {
                return bad("nest noise scale must be finite and non-negative".into());
            }
        }
        Ok(())
    }

    fn presence(&self) -> Vec<bool> {
        self.x_dist.iter().flatten().map(Option::is_some).collect()
    }

    /// True deterministic utilities for one observation.
    pub fn utilities(&self, obs: &Observation) -> Result<Vec<f64>> {
        let k = self.num_alternatives();
        let dx = self.attributes.len();
        if obs.x.len() != k * dx || obs.z.len() != self.individual.len() {
            return Err(Error::dim(
                "observation",
                format!("{} + {}", k * dx, self.individual.len()),
                format!("{} + {}", obs.x.len(), obs.z.len()),
            ));
        }
        let c = &self.coefficients;
        let x = |alt: usize| &obs.x[alt * dx..(alt + 1) * dx];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let mut v = Vec::with_capacity(k);
        for alt in 0..k {
            let xk = x(alt);
            let mut u = c.asc[alt] + dot(&c.beta[alt], xk);
            if !c.gamma.is_empty() {
                u += dot(&c.gamma[alt], &obs.z);
            }
            if self.form != UtilityForm::Linear {
                if !c.quadratic.is_empty() {
                    u += c.quadratic[alt].iter().zip(xk).map(|(q, v)| q * v * v).sum::<f64>();
                }
                if !c.interaction.is_empty() {
                    u += xk[0] * dot(&c.interaction[alt], &obs.z);
                }
            }
            if self.form == UtilityForm::NonlinearFull {
                let others = (0..k).filter(|&j| j != alt).map(|j| x(j)[0]).sum::<f64>() / (k - 1) as f64;
                u += c.cross * xk[0] * others;
            }
            v.push(u);
        }
        Ok(v)
    }

    fn sample_observation(&self, rng: &mut RngStream) -> Observation {
        let x = self
            .x_dist
            .iter()
            .flatten()
            .map(|d| d.map(|d| d.sample(rng)).unwrap_or(0.0))
            .collect();
        let z = self.z_dist.iter().map(|d| d.sample(rng)).collect();
        Observation { x, z }
    }

    /// Multiply every coefficient by `c`.
    pub fn scaled(&self, c: f64) -> DgpSpec {
        let mut out = self.clone();
        out.coefficients.scale(c);
        out
    }

    /// Rescale the coefficients so the expected Bayes accuracy under unit
    /// noise hits `target`, estimated on `samples` attribute draws.
    pub fn calibrate(&self, target: f64, samples: usize, seed: u64) -> Result<DgpSpec> {
        self.validate()?;
        if self.nest_noise.is_some() {
            return Err(Error::InvalidArgument("calibration needs independent noise".into()));
        }
        let k = self.num_alternatives() as f64;
        if !(target > 1.0 / k && target < 1.0) {
            return Err(Error::InvalidArgument(format!("target {target} must lie in (1/K, 1)")));
        }
        let mut rng = RngStream::named(seed, "calibrate");
        let draws: Vec<Vec<f64>> = (0..samples)
            .map(|_| self.utilities(&self.sample_observation(&mut rng)))
            .collect::<Result<_>>()?;
        let accuracy = |c: f64| -> Result<f64> {
            let mut total = 0.0;
            for v in &draws {
                let scaled: Vec<f64> = v.iter().map(|u| u * c).collect();
                let p = softmax(&scaled)?;
                total += p[argmax(&scaled)];
            }
            Ok(total / draws.len() as f64)
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        while accuracy(hi)? < target {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(Error::InvalidArgument("target accuracy is out of reach".into()));
            }
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if accuracy(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(DgpSpec {
            noise_scale: 1.0,
            ..self.scaled(0.5 * (lo + hi))
        })
    }

    /// Five travel modes with attribute moments loosely matching a
    /// city-scale mode-choice survey. Walking has only a walk time; the
    /// other modes carry subsets of cost, walk, wait and in-vehicle time.
    /// Coefficients are in per-standard-deviation units before
    /// calibration.
    pub fn travel_modes(form: UtilityForm) -> DgpSpec {
        let ln = |mean: f64, sd: f64| Some(Dist::LogNormal { mean, sd });
        let alternatives = ["walk", "bus", "ridesharing", "drive", "av"];
        let attributes = ["cost", "walk_time", "wait_time", "ivt"];
        let individual = ["male", "young", "high_income"];
        let x_dist = vec![
            vec![None, ln(60.5, 54.9), None, None],
            vec![ln(2.07, 1.27), ln(11.96, 10.78), ln(7.73, 5.03), ln(25.06, 18.91)],
            vec![ln(14.48, 11.64), None, ln(7.11, 4.80), ln(18.28, 13.39)],
            vec![ln(10.49, 10.57), ln(3.97, 4.18), None, ln(17.43, 14.10)],
            vec![ln(16.08, 14.60), None, ln(7.25, 5.67), ln(20.11, 16.99)],
        ];
        let z_dist = vec![
            Dist::Bernoulli { p: 0.383 },
            Dist::Bernoulli { p: 0.329 },
            Dist::Bernoulli { p: 0.606 },
        ];
        let per_sd = [-1.0, -0.8, -0.5, -0.7];
        let beta: Vec<Vec<f64>> = x_dist
            .iter()
            .map(|row| {
                row.iter()
                    .zip(per_sd)
                    .map(|(d, b)| d.map(|d| b / d.scale()).unwrap_or(0.0))
                    .collect()
            })
            .collect();
        let quadratic = x_dist
            .iter()
            .map(|row| {
                row.iter()
                    .map(|d| d.map(|d| 0.08 / (d.scale() * d.scale())).unwrap_or(0.0))
                    .collect()
            })
            .collect();
        let interaction = x_dist
            .iter()
            .map(|row| {
                let s = row[0].map(|d| d.scale()).unwrap_or(1.0);
                vec![0.0, -0.3 / s, 0.6 / s]
            })
            .collect();
        let gamma = vec![
            vec![0.0, 0.2, -0.3],
            vec![-0.2, 0.3, -0.5],
            vec![0.0, 0.4, 0.2],
            vec![0.4, -0.3, 0.5],
            vec![0.2, 0.6, 0.1],
        ];
        let cross = match form {
            UtilityForm::NonlinearFull => 0.01,
            _ => 0.0,
        };
        DgpSpec {
            alternatives: alternatives.map(String::from).to_vec(),
            attributes: attributes.map(String::from).to_vec(),
            individual: individual.map(String::from).to_vec(),
            x_dist,
            z_dist,
            form,
            coefficients: Coefficients {
                asc: vec![0.0, 0.6, -0.4, 1.0, -0.2],
                beta,
                gamma,
                quadratic,
                interaction,
                cross,
            },
            noise_scale: 1.0,
            nest_noise: None,
        }
    }

    /// Binary logit with one normally distributed attribute and
    /// `V = asc + beta * x` for each alternative.
    pub fn binary(asc: [f64; 2], beta: f64) -> DgpSpec {
        DgpSpec {
            alternatives: vec!["a".into(), "b".into()],
            attributes: vec!["x".into()],
            individual: vec![],
            x_dist: vec![vec![Some(Dist::Normal { mean: 0.0, sd: 1.0 })]; 2],
            z_dist: vec![],
            form: UtilityForm::Linear,
            coefficients: Coefficients {
                asc: asc.to_vec(),
                beta: vec![vec![beta]; 2],
                gamma: vec![vec![]; 2],
                quadratic: vec![],
                interaction: vec![],
                cross: 0.0,
            },
            noise_scale: 1.0,
            nest_noise: None,
        }
    }
}

/// Inverse-CDF standard Gumbel draw.
pub fn gumbel(rng: &mut RngStream) -> f64 {
    -(-rng.uniform_open().ln()).ln()
}

/// Draw `n` observations: attributes, true utilities plus noise, argmax choice.
pub fn generate(spec: &DgpSpec, n: usize, rng: &mut RngStream) -> Result<ChoiceDataset> {
    spec.validate()?;
    let k = spec.num_alternatives();
    let nest_of = spec
        .nest_noise
        .as_ref()
        .map(|nn| crate::models::nest_layout(&nn.nests, k))
        .transpose()?;
    let mut x = Vec::with_capacity(n * k * spec.attributes.len());
    let mut z = Vec::with_capacity(n * spec.individual.len());
    let mut y = Vec::with_capacity(n);
    let mut utility = vec![0.0; k];
    for _ in 0..n {
        let obs = spec.sample_observation(rng);
        let v = spec.utilities(&obs)?;
        for (u, vk) in utility.iter_mut().zip(&v) {
            *u = vk + spec.noise_scale * gumbel(rng);
        }
        if let (Some(layout), Some(nn)) = (&nest_of, &spec.nest_noise) {
            let shared: Vec<f64> = (0..layout.nests).map(|_| nn.scale * gumbel(rng)).collect();
            for (j, u) in utility.iter_mut().enumerate() {
                *u += shared[layout.nest_of[j]];
            }
        }
        y.push(argmax(&utility));
        x.extend(obs.x);
        z.extend(obs.z);
    }
    ChoiceDataset::from_parts(
        spec.alternatives.clone(),
        spec.attributes.clone(),
        spec.individual.clone(),
        spec.presence(),
        x,
        z,
        y,
    )
}

/// True choice probabilities of one observation.
pub fn oracle_probabilities(spec: &DgpSpec, obs: &Observation) -> Result<Vec<f64>> {
    if spec.nest_noise.is_some() {
        return Err(Error::InvalidArgument(
            "nest-correlated noise has no closed-form probabilities".into(),
        ));
    }
    let v = spec.utilities(obs)?;
    if spec.noise_scale == 0.0 {
        let mut p = vec![0.0; v.len()];
        p[argmax(&v)] = 1.0;
        return Ok(p);
    }
    let scaled: Vec<f64> = v.iter().map(|u| u / spec.noise_scale).collect();
    softmax(&scaled)
}

/// Accuracy of predicting the argmax of the true utilities.
pub fn bayes_accuracy(spec: &DgpSpec, ds: &ChoiceDataset) -> Result<f64> {
    if ds.alternatives != spec.alternatives
        || ds.attributes != spec.attributes
        || ds.individual != spec.individual
    {
        return Err(Error::InvalidArgument("dataset layout does not match the DGP".into()));
    }
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut correct = 0usize;
    for i in 0..ds.len() {
        let v = spec.utilities(&ds.observation(i))?;
        correct += usize::from(argmax(&v) == ds.choice(i));
    }
    Ok(correct as f64 / ds.len() as f64)
}
