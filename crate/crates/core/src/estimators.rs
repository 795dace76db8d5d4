//! ELBO value estimators and reparameterized gradient estimators.
//!
//! Every gradient estimator is a function of one fixed noise draw, so
//! different estimator kinds can be compared on common random numbers.
//!
//! Three surrogate objectives are built on the tape:
//!
//! * [`Surrogate::Total`]: `log p(x, z) - log q_phi(z)` with `z = t(eps, phi)`
//!   and `phi` live everywhere. Its gradient is the total derivative.
//! * [`Surrogate::Path`]: the same expression with the density evaluated at
//!   detached parameters. Its gradient is the path derivative alone.
//! * [`Surrogate::Score`]: `log q_phi(z)` at a detached sample. Its gradient
//!   is the score `grad_phi log q_phi(z)`, so `total = path - score`.
//!
//! [`EstimatorKind`] picks which gradient a call returns. `ScaledCV(c)`
//! interpolates as `path - (1 - c) * score`: `c = 0` is the total
//! derivative, `c = 1` the path derivative.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::distributions::{
    bernoulli_logpmf, gaussian_entropy, gaussian_kl, gaussian_logpdf, gaussian_reparam_sample,
    log_mixture_weights, mixture_logpdf, mixture_weight, DiagGaussian, GaussianNodes,
    MixtureNodes, MixtureParams,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A joint density `p(x, z)` for fixed data `x`, evaluated row-wise in `z`.
pub trait Model {
    /// `log p(x, z)`, summed over the last axis of `z`.
    fn log_joint(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId>;

    /// `log p(x | z)`, when the model separates likelihood and prior.
    fn log_likelihood(&self, _tape: &mut Tape, _z: NodeId) -> Option<Result<NodeId>> {
        None
    }

    /// Gaussian prior `p(z)`, when the model has one.
    fn prior(&self) -> Option<&DiagGaussian> {
        None
    }
}

/// Checks `log p(x, z) = log p(x | z) + log p(z)` at `z`, to `1e-12` relative.
/// Models that do not expose both parts pass trivially.
pub fn check_joint_decomposition(model: &dyn Model, z: &Tensor) -> Result<()> {
    let Some(prior) = model.prior() else {
        return Ok(());
    };
    let mut tape = Tape::new();
    let zn = tape.constant(z.clone());
    let Some(lik) = model.log_likelihood(&mut tape, zn) else {
        return Ok(());
    };
    let lik = lik?;
    let pn = prior.record(&mut tape, false);
    let lp = gaussian_logpdf(&mut tape, &pn, zn)?;
    let sum = tape.add(lik, lp)?;
    let joint = model.log_joint(&mut tape, zn)?;
    for (a, b) in tape.value(joint)?.data().iter().zip(tape.value(sum)?.data()) {
        if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
            return Err(Error::contract(format!(
                "log joint {a} differs from likelihood + prior {b}"
            )));
        }
    }
    Ok(())
}

/// Gaussian prior, Gaussian likelihood with one observation per latent
/// coordinate: `z ~ N(m0, s0^2)`, `x | z ~ N(z, s^2)`. The posterior is a
/// diagonal Gaussian and `log p(x)` is available in closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct ConjugateGaussian {
    pub prior: DiagGaussian,
    pub obs: Tensor,
    pub noise_log_sigma: Tensor,
}

impl ConjugateGaussian {
    pub fn new(prior: DiagGaussian, obs: Tensor, noise_log_sigma: Tensor) -> Result<Self> {
        if obs.shape() != prior.mu.shape() || noise_log_sigma.shape() != prior.mu.shape() {
            return Err(Error::shape("observation, noise and prior dimensions differ"));
        }
        Ok(ConjugateGaussian {
            prior,
            obs,
            noise_log_sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn posterior(&self) -> DiagGaussian {
        let d = self.dim();
        let mut mu = Vec::with_capacity(d);
        let mut ls = Vec::with_capacity(d);
        for i in 0..d {
            let p0 = (-2.0 * self.prior.log_sigma.data()[i]).exp();
            let pl = (-2.0 * self.noise_log_sigma.data()[i]).exp();
            let prec = p0 + pl;
            mu.push((self.prior.mu.data()[i] * p0 + self.obs.data()[i] * pl) / prec);
            ls.push(-0.5 * prec.ln());
        }
        DiagGaussian::from_vecs(mu, ls).expect("finite posterior")
    }

    /// `log p(x) = sum_i log N(x_i; m0_i, s0_i^2 + s_i^2)`.
    pub fn log_evidence(&self) -> f64 {
        (0..self.dim())
            .map(|i| {
                let var = (2.0 * self.prior.log_sigma.data()[i]).exp()
                    + (2.0 * self.noise_log_sigma.data()[i]).exp();
                let r = self.obs.data()[i] - self.prior.mu.data()[i];
                -0.5 * (crate::distributions::LN_2PI + var.ln()) - 0.5 * r * r / var
            })
            .sum()
    }

    fn lik(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        // N(x; z, s) is symmetric in x and z, so evaluate it as a density in x
        // centred on z.
        let noise = tape.constant(self.noise_log_sigma.clone());
        let x = tape.constant(self.obs.clone());
        let q = GaussianNodes {
            mu: z,
            log_sigma: noise,
        };
        gaussian_logpdf(tape, &q, x)
    }
}

impl Model for ConjugateGaussian {
    fn log_joint(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let lik = self.lik(tape, z)?;
        let p = self.prior.record(tape, false);
        let lp = gaussian_logpdf(tape, &p, z)?;
        tape.add(lik, lp)
    }

    fn log_likelihood(&self, tape: &mut Tape, z: NodeId) -> Option<Result<NodeId>> {
        Some(self.lik(tape, z))
    }

    fn prior(&self) -> Option<&DiagGaussian> {
        Some(&self.prior)
    }
}

/// Unnormalized Gaussian target: `log p(x, z) = log N(z; target) + log_evidence`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTarget {
    pub target: DiagGaussian,
    pub log_evidence: f64,
}

impl Model for GaussianTarget {
    fn log_joint(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let p = self.target.record(tape, false);
        let lp = gaussian_logpdf(tape, &p, z)?;
        if self.log_evidence == 0.0 {
            return Ok(lp);
        }
        let c = tape.scalar(self.log_evidence);
        tape.add(lp, c)
    }
}

/// Posterior that is itself a Gaussian mixture, with `p(x) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureTarget {
    pub target: MixtureParams,
}

impl Model for MixtureTarget {
    fn log_joint(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let m = self.target.record(tape, false);
        mixture_logpdf(tape, &m, z, false)
    }
}

/// Bernoulli likelihood over a linear decoder with a standard-normal prior.
/// Small enough for finite-difference checks of the full estimator stack.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBernoulli {
    pub weights: Tensor,
    pub bias: Tensor,
    pub x: Tensor,
    prior: DiagGaussian,
}

impl LinearBernoulli {
    /// `weights` is `[latent, pixels]`, `bias` and `x` are `[pixels]`.
    pub fn new(weights: Tensor, bias: Tensor, x: Tensor) -> Result<Self> {
        let &[latent, pixels] = weights.shape() else {
            return Err(Error::shape("decoder weights must be a matrix"));
        };
        if bias.shape() != [pixels] || x.shape() != [pixels] {
            return Err(Error::shape("bias and observation must match the pixel count"));
        }
        Ok(LinearBernoulli {
            weights,
            bias,
            x,
            prior: DiagGaussian::standard(latent),
        })
    }

    fn lik(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let shape = tape.value(z)?.shape().to_vec();
        let rows = if shape.len() == 1 {
            tape.reshape(z, &[1, shape[0]])?
        } else {
            z
        };
        let w = tape.constant(self.weights.clone());
        let b = tape.constant(self.bias.clone());
        let h = tape.matmul(rows, w)?;
        let logits = tape.add(h, b)?;
        let lp = bernoulli_logpmf(tape, logits, &self.x)?;
        if shape.len() == 1 {
            tape.reshape(lp, &[])
        } else {
            Ok(lp)
        }
    }
}

impl Model for LinearBernoulli {
    fn log_joint(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let lik = self.lik(tape, z)?;
        let p = self.prior.record(tape, false);
        let lp = gaussian_logpdf(tape, &p, z)?;
        tape.add(lik, lp)
    }

    fn log_likelihood(&self, tape: &mut Tape, z: NodeId) -> Option<Result<NodeId>> {
        Some(self.lik(tape, z))
    }

    fn prior(&self) -> Option<&DiagGaussian> {
        Some(&self.prior)
    }
}

/// Control-variate scale, either shared or one per gradient coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CvScale {
    Scalar(f64),
    PerCoordinate(Vec<f64>),
}

impl CvScale {
    fn all_equal(&self, target: f64) -> bool {
        match self {
            CvScale::Scalar(c) => *c == target,
            CvScale::PerCoordinate(cs) => cs.iter().all(|c| *c == target),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EstimatorKind {
    TotalDerivative,
    PathDerivative,
    /// `path - (1 - c) * score`.
    ScaledCV(CvScale),
    ScoreFunction,
}

impl EstimatorKind {
    pub fn scaled(c: f64) -> Self {
        EstimatorKind::ScaledCV(CvScale::Scalar(c))
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorKind::TotalDerivative => write!(f, "td"),
            EstimatorKind::PathDerivative => write!(f, "pd"),
            EstimatorKind::ScaledCV(CvScale::Scalar(c)) => write!(f, "cv:{c}"),
            EstimatorKind::ScaledCV(CvScale::PerCoordinate(_)) => write!(f, "cv:per-coordinate"),
            EstimatorKind::ScoreFunction => write!(f, "score"),
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "td" => Ok(EstimatorKind::TotalDerivative),
            "pd" => Ok(EstimatorKind::PathDerivative),
            "score" => Ok(EstimatorKind::ScoreFunction),
            _ => match s.strip_prefix("cv:").map(str::parse::<f64>) {
                Some(Ok(c)) if c.is_finite() => Ok(EstimatorKind::scaled(c)),
                _ => Err(Error::config(format!(
                    "unknown estimator '{s}' (expected td, pd, score or cv:<c>)"
                ))),
            },
        }
    }
}

/// Linear annealing of the control-variate scale from `start` to `end` over
/// `steps` iterations, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl CvSchedule {
    pub fn scale_at(&self, iteration: u64) -> f64 {
        if self.steps == 0 || iteration >= self.steps {
            return self.end;
        }
        let t = iteration as f64 / self.steps as f64;
        self.start + (self.end - self.start) * t
    }

    pub fn kind_at(&self, iteration: u64) -> EstimatorKind {
        EstimatorKind::scaled(self.scale_at(iteration))
    }
}

impl FromStr for CvSchedule {
    type Err = Error;

    /// `linear:<start>:<end>:<steps>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad schedule '{s}' (expected linear:<start>:<end>:<steps>)"));
        let parts: Vec<&str> = s.split(':').collect();
        let ["linear", start, end, steps] = parts.as_slice() else {
            return Err(bad());
        };
        Ok(CvSchedule {
            start: start.parse().map_err(|_| bad())?,
            end: end.parse().map_err(|_| bad())?,
            steps: steps.parse().map_err(|_| bad())?,
        })
    }
}

/// Which surrogate objective to record on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surrogate {
    Total,
    Path,
    Score,
}

/// Gradient of the ELBO (or bound) with respect to the variational leaves,
/// in leaf order, plus the bound's value at the same noise.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEstimate {
    pub grads: Vec<Tensor>,
    pub elbo_value: f64,
    pub kind: EstimatorKind,
}

impl GradEstimate {
    pub fn flat(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.data().iter().copied()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }
}

/// Runs the estimator `kind` on a tape. `build` records the scalar objective
/// for a surrogate; it may be called for more than one surrogate. Returns the
/// gradients at `leaves` and the node holding the bound value.
pub fn estimate_on_tape<F>(
    tape: &mut Tape,
    kind: &EstimatorKind,
    leaves: &[NodeId],
    mut build: F,
) -> Result<(Vec<Tensor>, NodeId)>
where
    F: FnMut(&mut Tape, Surrogate) -> Result<NodeId>,
{
    let grads_of = |tape: &Tape, loss: NodeId| -> Result<Vec<Tensor>> {
        let map = tape.backward(loss)?;
        leaves.iter().map(|&l| map.get_or_zeros(tape, l)).collect()
    };
    match kind {
        EstimatorKind::TotalDerivative => {
            let obj = build(tape, Surrogate::Total)?;
            Ok((grads_of(tape, obj)?, obj))
        }
        EstimatorKind::PathDerivative => {
            let obj = build(tape, Surrogate::Path)?;
            Ok((grads_of(tape, obj)?, obj))
        }
        EstimatorKind::ScoreFunction => {
            let value = build(tape, Surrogate::Path)?;
            let score = build(tape, Surrogate::Score)?;
            Ok((grads_of(tape, score)?, value))
        }
        EstimatorKind::ScaledCV(c) if c.all_equal(0.0) => {
            estimate_on_tape(tape, &EstimatorKind::TotalDerivative, leaves, build)
        }
        EstimatorKind::ScaledCV(c) if c.all_equal(1.0) => {
            estimate_on_tape(tape, &EstimatorKind::PathDerivative, leaves, build)
        }
        EstimatorKind::ScaledCV(c) => {
            let path = build(tape, Surrogate::Path)?;
            let score = build(tape, Surrogate::Score)?;
            let gp = grads_of(tape, path)?;
            let gs = grads_of(tape, score)?;
            let total: usize = gp.iter().map(Tensor::len).sum();
            if let CvScale::PerCoordinate(cs) = c {
                if cs.len() != total {
                    return Err(Error::shape(format!(
                        "{} control-variate scales for {total} gradient coordinates",
                        cs.len()
                    )));
                }
            }
            let mut offset = 0;
            let mut out = Vec::with_capacity(gp.len());
            for (p, s) in gp.iter().zip(&gs) {
                let data = p
                    .data()
                    .iter()
                    .zip(s.data())
                    .enumerate()
                    .map(|(i, (p, s))| {
                        let c = match c {
                            CvScale::Scalar(c) => *c,
                            CvScale::PerCoordinate(cs) => cs[offset + i],
                        };
                        p - (1.0 - c) * s
                    })
                    .collect();
                offset += p.len();
                out.push(Tensor::new(p.shape().to_vec(), data)?);
            }
            Ok((out, path))
        }
    }
}

fn finite_value(tape: &Tape, node: NodeId, what: &str) -> Result<f64> {
    let v = tape.item(node)?;
    if !v.is_finite() {
        return Err(Error::numeric(format!("{what} evaluated to {v}")));
    }
    Ok(v)
}

fn check_noise(q: &DiagGaussian, eps: &Tensor) -> Result<()> {
    if eps.shape() != q.mu.shape() {
        return Err(Error::shape(format!(
            "noise shape {:?} does not match variational dimension {:?}",
            eps.shape(),
            q.mu.shape()
        )));
    }
    Ok(())
}

/// `log p(x, z) - log q(z)` at `z = mu + sigma * eps`, with the density's
/// parameters live (`Total`) or detached (`Path`); for `Score`, `log q(z)`
/// at a detached sample.
pub fn elbo_surrogate(
    tape: &mut Tape,
    model: &dyn Model,
    q: &GaussianNodes,
    eps: NodeId,
    surrogate: Surrogate,
) -> Result<NodeId> {
    let z = gaussian_reparam_sample(tape, q, eps)?;
    match surrogate {
        Surrogate::Total | Surrogate::Path => {
            let density = if surrogate == Surrogate::Path {
                q.detach(tape)?
            } else {
                *q
            };
            let lj = model.log_joint(tape, z)?;
            let lq = gaussian_logpdf(tape, &density, z)?;
            tape.sub(lj, lq)
        }
        Surrogate::Score => {
            let fixed = tape.detach(z)?;
            gaussian_logpdf(tape, q, fixed)
        }
    }
}

/// Single-sample ELBO `log p(x, z) - log q(z)`.
pub fn elbo_fmc(model: &dyn Model, q: &DiagGaussian, eps: &Tensor) -> Result<f64> {
    check_noise(q, eps)?;
    let mut tape = Tape::new();
    let qn = q.record(&mut tape, false);
    let e = tape.constant(eps.clone());
    let v = elbo_surrogate(&mut tape, model, &qn, e, Surrogate::Total)?;
    finite_value(&tape, v, "ELBO")
}

/// `log p(x, z) + H[q]`.
pub fn elbo_entropy_form(model: &dyn Model, q: &DiagGaussian, eps: &Tensor) -> Result<f64> {
    check_noise(q, eps)?;
    let mut tape = Tape::new();
    let qn = q.record(&mut tape, false);
    let e = tape.constant(eps.clone());
    let z = gaussian_reparam_sample(&mut tape, &qn, e)?;
    let lj = model.log_joint(&mut tape, z)?;
    let h = gaussian_entropy(&mut tape, &qn)?;
    let v = tape.add(lj, h)?;
    finite_value(&tape, v, "entropy-form ELBO")
}

/// `log p(x | z) - KL(q || prior)`.
pub fn elbo_kl_form(
    model: &dyn Model,
    q: &DiagGaussian,
    prior: &DiagGaussian,
    eps: &Tensor,
) -> Result<f64> {
    check_noise(q, eps)?;
    let mut tape = Tape::new();
    let qn = q.record(&mut tape, false);
    let e = tape.constant(eps.clone());
    let z = gaussian_reparam_sample(&mut tape, &qn, e)?;
    let lik = model
        .log_likelihood(&mut tape, z)
        .ok_or_else(|| Error::contract("KL-form ELBO needs a separate likelihood"))??;
    let pn = prior.record(&mut tape, false);
    let kl = gaussian_kl(&mut tape, &qn, &pn)?;
    let v = tape.sub(lik, kl)?;
    finite_value(&tape, v, "KL-form ELBO")
}

/// Reparameterized ELBO gradient with respect to `(mu, log_sigma)` for one
/// noise draw.
pub fn grad_estimate(
    model: &dyn Model,
    q: &DiagGaussian,
    eps: &Tensor,
    kind: &EstimatorKind,
) -> Result<GradEstimate> {
    check_noise(q, eps)?;
    let mut tape = Tape::new();
    let qn = q.record(&mut tape, true);
    let e = tape.constant(eps.clone());
    let (grads, value) = estimate_on_tape(&mut tape, kind, &[qn.mu, qn.log_sigma], |t, s| {
        elbo_surrogate(t, model, &qn, e, s)
    })?;
    Ok(GradEstimate {
        grads,
        elbo_value: finite_value(&tape, value, "ELBO")?,
        kind: kind.clone(),
    })
}

/// Variance-minimizing scale under `path - (1 - c) * score`:
/// `1 - c* = sum_j Cov(path_j, score_j) / sum_j Var(score_j)`.
/// Returns 1 when the score has no variance.
pub fn estimate_cv_scale(samples: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let (cov, var) = cv_moments(samples)?;
    let (c, v): (f64, f64) = (cov.iter().sum(), var.iter().sum());
    if v == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - c / v)
}

/// Per-coordinate variant of [`estimate_cv_scale`].
pub fn estimate_cv_scale_per_coordinate(samples: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
    let (cov, var) = cv_moments(samples)?;
    Ok(cov
        .iter()
        .zip(&var)
        .map(|(c, v)| if *v == 0.0 { 1.0 } else { 1.0 - c / v })
        .collect())
}

fn cv_moments(samples: &[(Vec<f64>, Vec<f64>)]) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.len() < 2 {
        return Err(Error::contract("control-variate scale needs at least two samples"));
    }
    let d = samples[0].0.len();
    if samples.iter().any(|(p, s)| p.len() != d || s.len() != d) {
        return Err(Error::shape("control-variate samples differ in length"));
    }
    let n = samples.len() as f64;
    let mut mp = vec![0.0; d];
    let mut ms = vec![0.0; d];
    for (p, s) in samples {
        for j in 0..d {
            mp[j] += p[j] / n;
            ms[j] += s[j] / n;
        }
    }
    let mut cov = vec![0.0; d];
    let mut var = vec![0.0; d];
    for (p, s) in samples {
        for j in 0..d {
            cov[j] += (p[j] - mp[j]) * (s[j] - ms[j]) / (n - 1.0);
            var[j] += (s[j] - ms[j]).powi(2) / (n - 1.0);
        }
    }
    Ok((cov, var))
}

/// Mixture ELBO `sum_c pi_c [log p(x, z_c) - log q_M(z_c)]`, `z_c` drawn from
/// component `c` with noise `eps_c`. The outer weights are always live. The
/// mixture density's weights and components are detached for `Path`. For
/// `Score` the samples and outer weights are fixed and the density is live.
pub fn mixture_surrogate(
    tape: &mut Tape,
    model: &dyn Model,
    m: &MixtureNodes,
    eps: &[NodeId],
    surrogate: Surrogate,
) -> Result<NodeId> {
    if m.components.is_empty() {
        return Err(Error::contract("mixture estimator with zero components"));
    }
    if eps.len() != m.components.len() {
        return Err(Error::contract(format!(
            "{} noise draws for {} mixture components",
            eps.len(),
            m.components.len()
        )));
    }
    let log_w = log_mixture_weights(tape, m.logits)?;
    let mut total = None;
    for (c, (comp, &e)) in m.components.iter().zip(eps).enumerate() {
        let z = gaussian_reparam_sample(tape, comp, e)?;
        let lw = mixture_weight(tape, log_w, c)?;
        let term = match surrogate {
            Surrogate::Total | Surrogate::Path => {
                let lj = model.log_joint(tape, z)?;
                let lq = mixture_logpdf(tape, m, z, surrogate == Surrogate::Path)?;
                let elbo = tape.sub(lj, lq)?;
                let pi = tape.exp(lw)?;
                tape.mul(pi, elbo)?
            }
            Surrogate::Score => {
                let fixed = tape.detach(z)?;
                let lq = mixture_logpdf(tape, m, fixed, false)?;
                let lw = tape.detach(lw)?;
                let pi = tape.exp(lw)?;
                tape.mul(pi, lq)?
            }
        };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("at least one component"))
}

/// Mixture ELBO gradient with respect to `[logits, mu_1, log_sigma_1, ...]`.
pub fn mixture_grad_estimate(
    model: &dyn Model,
    m: &MixtureParams,
    eps: &[Tensor],
    kind: &EstimatorKind,
) -> Result<GradEstimate> {
    if m.is_empty() {
        return Err(Error::contract("mixture estimator with zero components"));
    }
    if eps.len() != m.len() {
        return Err(Error::contract(format!(
            "{} noise draws for {} mixture components",
            eps.len(),
            m.len()
        )));
    }
    for e in eps {
        check_noise(&m.components[0], e)?;
    }
    let mut tape = Tape::new();
    let mn = m.record(&mut tape, true);
    let en: Vec<NodeId> = eps.iter().map(|e| tape.constant(e.clone())).collect();
    let mut leaves = vec![mn.logits];
    for c in &mn.components {
        leaves.push(c.mu);
        leaves.push(c.log_sigma);
    }
    let (grads, value) = estimate_on_tape(&mut tape, kind, &leaves, |t, s| {
        mixture_surrogate(t, model, &mn, &en, s)
    })?;
    Ok(GradEstimate {
        grads,
        elbo_value: finite_value(&tape, value, "mixture ELBO")?,
        kind: kind.clone(),
    })
}

/// How `K` draws per group are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    /// Average of the `K` single-sample ELBOs.
    Elbo,
    /// `log (1/K) sum_i w_i`.
    Iwae,
}

impl FromStr for Bound {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elbo" => Ok(Bound::Elbo),
            "iwae" => Ok(Bound::Iwae),
            _ => Err(Error::config(format!("unknown bound '{s}' (elbo or iwae)"))),
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bound::Elbo => "elbo",
            Bound::Iwae => "iwae",
        })
    }
}

/// Multi-sample bound for `B` groups of `K` draws each.
///
/// `q` holds either one parameter vector (`[d]`, one group) or one row per
/// group (`[B, d]`). `eps` is `[K * B, d]`, sample-major: row `i * B + b` is
/// draw `i` of group `b`. The result has one value per group (`[B]`), or is a
/// scalar when `q` is a single vector.
pub fn bound_surrogate(
    tape: &mut Tape,
    model: &dyn Model,
    q: &GaussianNodes,
    eps: NodeId,
    k: usize,
    bound: Bound,
    surrogate: Surrogate,
) -> Result<NodeId> {
    if k == 0 {
        return Err(Error::contract("bound needs at least one sample"));
    }
    let q_shape = tape.value(q.mu)?.shape().to_vec();
    let eps_shape = tape.value(eps)?.shape().to_vec();
    let groups = if q_shape.len() == 2 { q_shape[0] } else { 1 };
    if eps_shape.len() != 2 || eps_shape[0] != k * groups || eps_shape[1] != *q_shape.last().unwrap_or(&0)
    {
        return Err(Error::shape(format!(
            "noise {eps_shape:?} does not hold {k} draws for parameters {q_shape:?}"
        )));
    }
    let q_rows = if q_shape.len() == 2 {
        let rows: Vec<usize> = (0..k * groups).map(|r| r % groups).collect();
        q.gather(tape, &rows)?
    } else {
        *q
    };
    let grouped: Vec<usize> = if q_shape.len() == 2 { vec![k, groups] } else { vec![k] };

    let z = gaussian_reparam_sample(tape, &q_rows, eps)?;
    let log_weights = |tape: &mut Tape, detach: bool| -> Result<NodeId> {
        let density = if detach { q_rows.detach(tape)? } else { q_rows };
        let lj = model.log_joint(tape, z)?;
        let lq = gaussian_logpdf(tape, &density, z)?;
        let lw = tape.sub(lj, lq)?;
        tape.reshape(lw, &grouped)
    };
    match surrogate {
        Surrogate::Total | Surrogate::Path => {
            let lw = log_weights(tape, surrogate == Surrogate::Path)?;
            match bound {
                Bound::Elbo => tape.mean(lw, Some(0)),
                Bound::Iwae => {
                    let lse = tape.logsumexp(lw, 0)?;
                    let log_k = tape.scalar((k as f64).ln());
                    tape.sub(lse, log_k)
                }
            }
        }
        Surrogate::Score => {
            let fixed = tape.detach(z)?;
            let lq = gaussian_logpdf(tape, &q_rows, fixed)?;
            let lq = tape.reshape(lq, &grouped)?;
            match bound {
                Bound::Elbo => tape.mean(lq, Some(0)),
                Bound::Iwae => {
                    // Normalized importance weights enter as constants.
                    let lw = log_weights(tape, true)?;
                    let w = normalized_weights(tape.value(lw)?)?;
                    let w = tape.constant(w);
                    let weighted = tape.mul(w, lq)?;
                    tape.sum(weighted, Some(0))
                }
            }
        }
    }
}

/// Softmax along the leading axis.
fn normalized_weights(log_w: &Tensor) -> Result<Tensor> {
    let max = log_w.max_along(0)?;
    let shifted = log_w.sub(&max)?.exp()?;
    let total = shifted.sum(Some(0))?;
    shifted.div(&total)
}

fn stack_noise(q: &DiagGaussian, eps_list: &[Tensor]) -> Result<Tensor> {
    if eps_list.is_empty() {
        return Err(Error::contract("importance-weighted bound needs K >= 1"));
    }
    let mut data = Vec::with_capacity(eps_list.len() * q.dim());
    for e in eps_list {
        check_noise(q, e)?;
        data.extend_from_slice(e.data());
    }
    Tensor::matrix(eps_list.len(), q.dim(), data)
}

/// `log (1/K) sum_i p(x, z_i) / q(z_i)`, through a log-sum-exp of log-weights.
pub fn iwae_bound(model: &dyn Model, q: &DiagGaussian, eps_list: &[Tensor]) -> Result<f64> {
    let eps = stack_noise(q, eps_list)?;
    let mut tape = Tape::new();
    let qn = q.record(&mut tape, false);
    let e = tape.constant(eps);
    let v = bound_surrogate(&mut tape, model, &qn, e, eps_list.len(), Bound::Iwae, Surrogate::Total)?;
    finite_value(&tape, v, "IWAE bound")
}

/// Importance-weighted bound gradient. For the path derivative every
/// `q(z_i)` in the weights is evaluated at detached parameters, while the
/// samples stay live.
pub fn iwae_grad_estimate(
    model: &dyn Model,
    q: &DiagGaussian,
    eps_list: &[Tensor],
    kind: &EstimatorKind,
) -> Result<GradEstimate> {
    let eps = stack_noise(q, eps_list)?;
    let k = eps_list.len();
    let mut tape = Tape::new();
    let qn = q.record(&mut tape, true);
    let e = tape.constant(eps);
    let (grads, value) = estimate_on_tape(&mut tape, kind, &[qn.mu, qn.log_sigma], |t, s| {
        bound_surrogate(t, model, &qn, e, k, Bound::Iwae, s)
    })?;
    Ok(GradEstimate {
        grads,
        elbo_value: finite_value(&tape, value, "IWAE bound")?,
        kind: kind.clone(),
    })
}

/// Per-draw gradients for many independent draws at once.
#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleGradients {
    /// One flat `[mu..., log_sigma...]` gradient per draw.
    pub grads: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

/// Evaluates `n` independent estimator draws on one tape. The variational
/// parameters are replicated into `n` rows, so the gradient of the summed
/// objective with respect to row `r` is exactly draw `r`'s gradient.
///
/// `eps` is `[k * n, d]` in the sample-major layout of [`bound_surrogate`].
pub fn per_sample_gradients(
    model: &dyn Model,
    q: &DiagGaussian,
    eps: &Tensor,
    k: usize,
    bound: Bound,
    kind: &EstimatorKind,
) -> Result<PerSampleGradients> {
    let d = q.dim();
    let &[rows, cols] = eps.shape() else {
        return Err(Error::shape("noise for per-sample gradients must be a matrix"));
    };
    if k == 0 || cols != d || rows % k != 0 {
        return Err(Error::shape(format!(
            "noise {:?} is not k={k} draws of dimension {d}",
            eps.shape()
        )));
    }
    let n = rows / k;
    let tile = |t: &Tensor| -> Result<Tensor> {
        Tensor::matrix(n, d, t.data().iter().copied().cycle().take(n * d).collect())
    };
    let mut tape = Tape::new();
    let qn = GaussianNodes {
        mu: tape.leaf(tile(&q.mu)?, true),
        log_sigma: tape.leaf(tile(&q.log_sigma)?, true),
    };
    let e = tape.constant(eps.clone());
    let mut per_group = None;
    let (grads, _) = estimate_on_tape(&mut tape, kind, &[qn.mu, qn.log_sigma], |t, s| {
        let v = bound_surrogate(t, model, &qn, e, k, bound, s)?;
        if s != Surrogate::Score {
            per_group = Some(v);
        }
        t.sum(v, None)
    })?;
    let values = tape
        .value(per_group.expect("value surrogate recorded"))?
        .data()
        .to_vec();
    let (gm, gs) = (grads[0].data(), grads[1].data());
    let grads = (0..n)
        .map(|r| {
            gm[r * d..(r + 1) * d]
                .iter()
                .chain(&gs[r * d..(r + 1) * d])
                .copied()
                .collect()
        })
        .collect();
    Ok(PerSampleGradients { grads, values })
}

/// Sample moments of a stochastic gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub mean: Vec<f64>,
    /// Unbiased per-coordinate variance.
    pub variance: Vec<f64>,
    /// Trace of the covariance, `sum_j variance_j`.
    pub trace: f64,
}

impl ProbeStats {
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<ProbeStats> {
        if samples.len() < 2 {
            return Err(Error::contract("variance probe needs n >= 2"));
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::shape("probe samples differ in length"));
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut variance = vec![0.0; d];
        for s in samples {
            for ((acc, v), m) in variance.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        variance.iter_mut().for_each(|v| *v /= n - 1.0);
        let trace = variance.iter().sum();
        Ok(ProbeStats {
            mean,
            variance,
            trace,
        })
    }

    /// Standard error of each mean coordinate.
    pub fn standard_errors(&self, n: usize) -> Vec<f64> {
        self.variance.iter().map(|v| (v / n as f64).sqrt()).collect()
    }
}

/// Evaluates `estimator` `n` times with noise from a generator seeded by
/// `seed` and returns per-coordinate moments of the flat gradients. Draws
/// are taken in order from a single stream, so results depend only on the
/// seed.
pub fn variance_probe<F>(n: usize, seed: u64, mut estimator: F) -> Result<ProbeStats>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<Vec<f64>>,
{
    if n < 2 {
        return Err(Error::contract("variance probe needs n >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n).map(|_| estimator(&mut rng)).collect::<Result<Vec<_>>>()?;
    ProbeStats::from_samples(&samples)
}
