//! Reparameterizable densities recorded on a [`Tape`].
//!
//! Every log-density takes its parameters as tape nodes so callers can feed
//! either live or detached copies. Densities sum over the last axis: a `[d]`
//! input gives a scalar, an `[n, d]` input gives one value per row.
//!
//! The owned parameter types also carry plain closed-form evaluators that do
//! not touch the tape. Tests use those as an independent route.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{softplus, Tensor};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Draws a tensor of independent standard-normal values.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

/// Diagonal Gaussian with mean `mu` and log standard deviation `log_sigma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl DiagGaussian {
    pub fn new(mu: Tensor, log_sigma: Tensor) -> Result<Self> {
        if mu.shape() != log_sigma.shape() {
            return Err(Error::shape(format!(
                "mean {:?} and log-std {:?} differ in shape",
                mu.shape(),
                log_sigma.shape()
            )));
        }
        if !mu.is_finite() || !log_sigma.is_finite() {
            return Err(Error::numeric("Gaussian parameters must be finite"));
        }
        Ok(DiagGaussian { mu, log_sigma })
    }

    pub fn from_vecs(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<Self> {
        DiagGaussian::new(Tensor::vector(mu), Tensor::vector(log_sigma))
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mu: Tensor::zeros(&[dim]),
            log_sigma: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Records both parameter tensors as leaves.
    pub fn record(&self, tape: &mut Tape, requires_grad: bool) -> GaussianNodes {
        GaussianNodes {
            mu: tape.leaf(self.mu.clone(), requires_grad),
            log_sigma: tape.leaf(self.log_sigma.clone(), requires_grad),
        }
    }

    /// `[mu..., log_sigma...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.mu.data().iter().chain(self.log_sigma.data()).copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::shape("flat Gaussian parameters must have even length"));
        }
        let d = flat.len() / 2;
        DiagGaussian::from_vecs(flat[..d].to_vec(), flat[d..].to_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let eps = standard_normal(rng, self.mu.shape());
        self.transform(&eps)
    }

    /// `mu + sigma * eps` without a tape.
    pub fn transform(&self, eps: &Tensor) -> Tensor {
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.log_sigma.data())
            .zip(eps.data())
            .map(|((m, ls), e)| m + ls.exp() * e)
            .collect();
        Tensor::new(self.mu.shape().to_vec(), data).expect("same shape")
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.mu
            .data()
            .iter()
            .zip(self.log_sigma.data())
            .zip(z)
            .map(|((m, ls), z)| {
                let u = (z - m) / ls.exp();
                -0.5 * LN_2PI - ls - 0.5 * u * u
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_sigma
            .data()
            .iter()
            .map(|ls| 0.5 * (LN_2PI + 1.0) + ls)
            .sum()
    }

    /// `KL(self || other)` in closed form.
    pub fn kl(&self, other: &DiagGaussian) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::shape(format!(
                "KL between dimensions {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let mut total = 0.0;
        for i in 0..self.dim() {
            let (mq, lq) = (self.mu.data()[i], self.log_sigma.data()[i]);
            let (mp, lp) = (other.mu.data()[i], other.log_sigma.data()[i]);
            let vq = (2.0 * lq).exp();
            let vp = (2.0 * lp).exp();
            total += lp - lq + (vq + (mq - mp).powi(2)) / (2.0 * vp) - 0.5;
        }
        Ok(total)
    }
}

/// A Gaussian whose parameters live on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussianNodes {
    pub mu: NodeId,
    pub log_sigma: NodeId,
}

impl GaussianNodes {
    pub fn detach(&self, tape: &mut Tape) -> Result<GaussianNodes> {
        Ok(GaussianNodes {
            mu: tape.detach(self.mu)?,
            log_sigma: tape.detach(self.log_sigma)?,
        })
    }

    /// Selects parameter rows, e.g. to repeat per-datapoint parameters once
    /// per importance sample.
    pub fn gather(&self, tape: &mut Tape, rows: &[usize]) -> Result<GaussianNodes> {
        Ok(GaussianNodes {
            mu: tape.gather(self.mu, rows)?,
            log_sigma: tape.gather(self.log_sigma, rows)?,
        })
    }
}

/// Standard-normal noise, tagged with the mixture component it feeds.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub eps: Tensor,
    pub component: Option<usize>,
}

/// `z = mu + exp(log_sigma) * eps`.
pub fn gaussian_reparam_sample(tape: &mut Tape, q: &GaussianNodes, eps: NodeId) -> Result<NodeId> {
    let sigma = tape.exp(q.log_sigma)?;
    let scaled = tape.mul(eps, sigma)?;
    tape.add(scaled, q.mu)
}

/// `sum_i [-ln(2π)/2 - log_sigma_i - ((z_i - mu_i) / sigma_i)^2 / 2]`.
pub fn gaussian_logpdf(tape: &mut Tape, q: &GaussianNodes, z: NodeId) -> Result<NodeId> {
    let diff = tape.sub(z, q.mu)?;
    let neg_ls = tape.neg(q.log_sigma)?;
    let inv_sigma = tape.exp(neg_ls)?;
    let u = tape.mul(diff, inv_sigma)?;
    let sq = tape.mul(u, u)?;
    let half_sq = tape.scale(sq, -0.5)?;
    let body = tape.sub(half_sq, q.log_sigma)?;
    let c = tape.scalar(-0.5 * LN_2PI);
    let terms = tape.add(body, c)?;
    tape.sum_last(terms)
}

/// `sum_i [ln(2πe)/2 + log_sigma_i]`.
pub fn gaussian_entropy(tape: &mut Tape, q: &GaussianNodes) -> Result<NodeId> {
    let c = tape.scalar(0.5 * (LN_2PI + 1.0));
    let terms = tape.add(q.log_sigma, c)?;
    tape.sum_last(terms)
}

/// Closed-form `KL(q || p)` for diagonal Gaussians.
pub fn gaussian_kl(tape: &mut Tape, q: &GaussianNodes, p: &GaussianNodes) -> Result<NodeId> {
    let (sq, sp) = (tape.value(q.mu)?.shape().to_vec(), tape.value(p.mu)?.shape().to_vec());
    if sq != sp {
        return Err(Error::shape(format!("KL between shapes {sq:?} and {sp:?}")));
    }
    // log sp - log sq + (vq + (mq - mp)^2) / (2 vp) - 1/2
    let log_ratio = tape.sub(p.log_sigma, q.log_sigma)?;
    let two_lq = tape.scale(q.log_sigma, 2.0)?;
    let vq = tape.exp(two_lq)?;
    let two_lp = tape.scale(p.log_sigma, 2.0)?;
    let vp = tape.exp(two_lp)?;
    let dm = tape.sub(q.mu, p.mu)?;
    let dm2 = tape.mul(dm, dm)?;
    let num = tape.add(vq, dm2)?;
    let two_vp = tape.scale(vp, 2.0)?;
    let frac = tape.div(num, two_vp)?;
    let body = tape.add(log_ratio, frac)?;
    let half = tape.scalar(0.5);
    let terms = tape.sub(body, half)?;
    tape.sum_last(terms)
}

/// Finite mixture of diagonal Gaussians. Weights are stored as unnormalized
/// logits; the mixture weights are their softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub logits: Tensor,
    pub components: Vec<DiagGaussian>,
}

impl MixtureParams {
    pub fn new(logits: Tensor, components: Vec<DiagGaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::contract("a mixture needs at least one component"));
        }
        if logits.shape() != [components.len()] {
            return Err(Error::shape(format!(
                "{} components but logits of shape {:?}",
                components.len(),
                logits.shape()
            )));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::shape("mixture components differ in dimension"));
        }
        Ok(MixtureParams { logits, components })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> Vec<f64> {
        let l = self.logits.data();
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn record(&self, tape: &mut Tape, requires_grad: bool) -> MixtureNodes {
        MixtureNodes {
            logits: tape.leaf(self.logits.clone(), requires_grad),
            components: self
                .components
                .iter()
                .map(|c| c.record(tape, requires_grad))
                .collect(),
        }
    }

    /// `[logits..., mu_1..., log_sigma_1..., ..., mu_K..., log_sigma_K...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.logits.data().to_vec();
        for c in &self.components {
            out.extend(c.to_flat());
        }
        out
    }

    pub fn from_flat(flat: &[f64], k: usize, dim: usize) -> Result<Self> {
        if flat.len() != k + 2 * k * dim {
            return Err(Error::shape(format!(
                "flat mixture of {k}x{dim} needs {} values, got {}",
                k + 2 * k * dim,
                flat.len()
            )));
        }
        let logits = Tensor::vector(flat[..k].to_vec());
        let components = flat[k..]
            .chunks(2 * dim)
            .map(DiagGaussian::from_flat)
            .collect::<Result<Vec<_>>>()?;
        MixtureParams::new(logits, components)
    }

    /// Direct `log sum_k pi_k N(z; mu_k, sigma_k)` without a tape.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights()
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_density(z))
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Tensor, NoiseDraw) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let weights = self.weights();
        let mut c = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                c = i;
                break;
            }
        }
        let eps = standard_normal(rng, &[self.dim()]);
        let z = self.components[c].transform(&eps);
        (
            z,
            NoiseDraw {
                eps,
                component: Some(c),
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixtureNodes {
    pub logits: NodeId,
    pub components: Vec<GaussianNodes>,
}

impl MixtureNodes {
    pub fn detach(&self, tape: &mut Tape) -> Result<MixtureNodes> {
        Ok(MixtureNodes {
            logits: tape.detach(self.logits)?,
            components: self
                .components
                .iter()
                .map(|c| c.detach(tape))
                .collect::<Result<_>>()?,
        })
    }
}

/// `log softmax(logits)` as a `[K]` node.
pub fn log_mixture_weights(tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
    let lse = tape.logsumexp(logits, 0)?;
    tape.sub(logits, lse)
}

/// Mixture weight `k` as a rank-0 node.
pub fn mixture_weight(tape: &mut Tape, weights: NodeId, k: usize) -> Result<NodeId> {
    let w = tape.gather(weights, &[k])?;
    tape.reshape(w, &[])
}

/// `log sum_k pi_k q_k(z)`. With `detach_params` every weight and component
/// parameter enters through a detached copy; the value is unaffected.
pub fn mixture_logpdf(
    tape: &mut Tape,
    m: &MixtureNodes,
    z: NodeId,
    detach_params: bool,
) -> Result<NodeId> {
    if m.components.is_empty() {
        return Err(Error::contract("mixture density with zero components"));
    }
    let params = if detach_params {
        m.detach(tape)?
    } else {
        m.clone()
    };
    let log_w = log_mixture_weights(tape, params.logits)?;
    let mut terms = Vec::with_capacity(params.components.len());
    for (k, comp) in params.components.iter().enumerate() {
        let lw = mixture_weight(tape, log_w, k)?;
        let lp = gaussian_logpdf(tape, comp, z)?;
        terms.push(tape.add(lp, lw)?);
    }
    let mut shift = tape.value(terms[0])?.clone();
    for t in &terms[1..] {
        let v = tape.value(*t)?;
        shift = Tensor::new(
            shift.shape().to_vec(),
            shift.data().iter().zip(v.data()).map(|(a, b)| a.max(*b)).collect(),
        )?;
    }
    let shift = tape.constant(shift);
    let mut total = None;
    for t in terms {
        let centered = tape.sub(t, shift)?;
        let e = tape.exp(centered)?;
        total = Some(match total {
            None => e,
            Some(acc) => tape.add(acc, e)?,
        });
    }
    let log_total = tape.log(total.expect("at least one component"))?;
    tape.add(log_total, shift)
}

/// `sum_i [x_i log s(l_i) + (1 - x_i) log(1 - s(l_i))] = sum_i [x_i l_i - softplus(l_i)]`
/// for binary `x`.
pub fn bernoulli_logpmf(tape: &mut Tape, logits: NodeId, x: &Tensor) -> Result<NodeId> {
    if x.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("Bernoulli observations must be 0 or 1"));
    }
    let xs = tape.constant(x.clone());
    let linear = tape.mul(xs, logits)?;
    let sp = tape.softplus(logits)?;
    let terms = tape.sub(linear, sp)?;
    tape.sum_last(terms)
}

/// Plain evaluation of the logit-form Bernoulli log-mass.
pub fn bernoulli_log_mass(logits: &[f64], x: &[f64]) -> f64 {
    logits.iter().zip(x).map(|(l, x)| x * l - softplus(*l)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval_logpdf(q: &DiagGaussian, z: &Tensor) -> f64 {
        let mut t = Tape::new();
        let qn = q.record(&mut t, false);
        let zn = t.constant(z.clone());
        let l = gaussian_logpdf(&mut t, &qn, zn).unwrap();
        t.item(l).unwrap()
    }

    #[test]
    fn reparam_sample_examples() {
        let mut t = Tape::new();
        let q = DiagGaussian::from_vecs(vec![3.0], vec![0.0]).unwrap().record(&mut t, true);
        let eps = t.constant(Tensor::vector(vec![0.0]));
        let z = gaussian_reparam_sample(&mut t, &q, eps).unwrap();
        assert_eq!(t.value(z).unwrap().data(), &[3.0]);

        let mut t = Tape::new();
        let q = DiagGaussian::from_vecs(vec![0.0], vec![2f64.ln()])
            .unwrap()
            .record(&mut t, true);
        let eps = t.constant(Tensor::vector(vec![1.0]));
        let z = gaussian_reparam_sample(&mut t, &q, eps).unwrap();
        assert!((t.value(z).unwrap().data()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn reparam_sample_gradients() {
        let (mu, ls, e) = (0.4, -0.3, 1.7);
        let mut t = Tape::new();
        let q = DiagGaussian::from_vecs(vec![mu], vec![ls]).unwrap().record(&mut t, true);
        let eps = t.constant(Tensor::vector(vec![e]));
        let z = gaussian_reparam_sample(&mut t, &q, eps).unwrap();
        let loss = t.sum(z, None).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(q.mu).unwrap().data(), &[1.0]);
        let sigma_eps = ls.exp() * e;
        assert!((g.get(q.log_sigma).unwrap().data()[0] - sigma_eps).abs() < 1e-15);
        let fd = crate::autodiff::finite_difference(
            |v| Ok(mu + v.item()?.exp() * e),
            &Tensor::scalar(ls),
            1e-5,
        )
        .unwrap();
        assert!((fd.item().unwrap() - sigma_eps).abs() < 1e-8);
    }

    #[test]
    fn logpdf_examples() {
        let std = DiagGaussian::standard(1);
        assert!((eval_logpdf(&std, &Tensor::vector(vec![0.0])) + 0.918_938_533_2).abs() < 1e-10);
        let shifted = DiagGaussian::from_vecs(vec![1.0], vec![0.0]).unwrap();
        assert!(
            (eval_logpdf(&shifted, &Tensor::vector(vec![1.0])) + 0.918_938_533_2).abs() < 1e-10
        );
        assert!((eval_logpdf(&std, &Tensor::vector(vec![2.0])) + 2.918_938_533_2).abs() < 1e-10);
    }

    #[test]
    fn logpdf_rows_match_plain_evaluation() {
        let q = DiagGaussian::from_vecs(vec![0.5, -1.0, 2.0], vec![0.1, -0.4, 0.3]).unwrap();
        let z = Tensor::matrix(2, 3, vec![0.0, 1.0, 2.0, -3.0, 0.5, 1.5]).unwrap();
        let mut t = Tape::new();
        let qn = q.record(&mut t, false);
        let zn = t.constant(z.clone());
        let l = gaussian_logpdf(&mut t, &qn, zn).unwrap();
        let v = t.value(l).unwrap();
        assert_eq!(v.shape(), &[2]);
        for r in 0..2 {
            let direct = q.log_density(&z.data()[r * 3..(r + 1) * 3]);
            assert!((v.data()[r] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn density_integrates_to_one_by_quadrature() {
        let q = DiagGaussian::from_vecs(vec![0.3], vec![-0.2]).unwrap();
        let (lo, hi, n) = (-12.0, 12.0, 24_000);
        let h = (hi - lo) / n as f64;
        // Composite Simpson on a fine grid.
        let mut total = 0.0;
        for i in 0..=n {
            let z = lo + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            total += w * eval_logpdf(&q, &Tensor::vector(vec![z])).exp();
        }
        total *= h / 3.0;
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn entropy_examples() {
        let mut t = Tape::new();
        let q = DiagGaussian::standard(1).record(&mut t, false);
        let h = gaussian_entropy(&mut t, &q).unwrap();
        assert!((t.item(h).unwrap() - 1.418_938_533_2).abs() < 1e-10);

        let base = DiagGaussian::from_vecs(vec![0.0; 3], vec![0.2, -0.1, 0.5]).unwrap();
        let doubled = DiagGaussian::new(
            base.mu.clone(),
            base.log_sigma.map(|v| v + 2f64.ln()),
        )
        .unwrap();
        assert!((doubled.entropy() - base.entropy() - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_monte_carlo() {
        let q = DiagGaussian::from_vecs(vec![0.5, -0.5], vec![0.3, -0.7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = q.sample(&mut rng);
            let v = -q.log_density(z.data());
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - q.entropy()).abs() <= 3.0 * se, "{mean} vs {}", q.entropy());
    }

    #[test]
    fn kl_examples() {
        let q = DiagGaussian::from_vecs(vec![0.2, 1.0], vec![0.1, -0.3]).unwrap();
        assert!(q.kl(&q).unwrap().abs() < 1e-15);
        let a = DiagGaussian::from_vecs(vec![1.0], vec![0.0]).unwrap();
        let b = DiagGaussian::standard(1);
        assert!((a.kl(&b).unwrap() - 0.5).abs() < 1e-15);

        let mut t = Tape::new();
        let an = a.record(&mut t, false);
        let bn = b.record(&mut t, false);
        let kl = gaussian_kl(&mut t, &an, &bn).unwrap();
        assert!((t.item(kl).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = DiagGaussian::from_vecs(vec![0.5, -0.2], vec![-0.1, 0.2]).unwrap();
        let p = DiagGaussian::from_vecs(vec![0.0, 0.3], vec![0.3, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = q.sample(&mut rng);
            let v = q.log_density(z.data()) - p.log_density(z.data());
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = q.kl(&p).unwrap();
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact}");

        let mut t = Tape::new();
        let qn = q.record(&mut t, false);
        let pn = p.record(&mut t, false);
        let kl = gaussian_kl(&mut t, &qn, &pn).unwrap();
        assert!((t.item(kl).unwrap() - exact).abs() < 1e-14);
    }

    fn eval_mixture(m: &MixtureParams, z: &[f64], detach: bool) -> f64 {
        let mut t = Tape::new();
        let mn = m.record(&mut t, true);
        let zn = t.constant(Tensor::vector(z.to_vec()));
        let l = mixture_logpdf(&mut t, &mn, zn, detach).unwrap();
        t.item(l).unwrap()
    }

    #[test]
    fn single_component_mixture_is_the_component() {
        let c = DiagGaussian::from_vecs(vec![0.3, -1.0], vec![0.2, 0.1]).unwrap();
        let m = MixtureParams::new(Tensor::vector(vec![0.7]), vec![c.clone()]).unwrap();
        let z = Tensor::vector(vec![1.0, 0.5]);
        assert_eq!(eval_mixture(&m, z.data(), false), eval_logpdf(&c, &z));
    }

    #[test]
    fn duplicate_components_collapse() {
        let c = DiagGaussian::from_vecs(vec![0.3, -1.0], vec![0.2, 0.1]).unwrap();
        let m = MixtureParams::new(Tensor::vector(vec![0.0, 0.0]), vec![c.clone(), c.clone()])
            .unwrap();
        let z = Tensor::vector(vec![-0.4, 0.9]);
        assert!((eval_mixture(&m, z.data(), false) - eval_logpdf(&c, &z)).abs() < 1e-12);
    }

    #[test]
    fn two_component_mixture_matches_direct_sum() {
        let a = DiagGaussian::from_vecs(vec![-1.0], vec![0.0]).unwrap();
        let b = DiagGaussian::from_vecs(vec![2.0], vec![-0.5]).unwrap();
        let m = MixtureParams::new(Tensor::vector(vec![0.3, -0.4]), vec![a, b]).unwrap();
        let z = 0.7;
        let w0 = 0.3f64.exp() / (0.3f64.exp() + (-0.4f64).exp());
        let n = |x: f64, mu: f64, s: f64| {
            (-(x - mu).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
        };
        let direct = (w0 * n(z, -1.0, 1.0) + (1.0 - w0) * n(z, 2.0, (-0.5f64).exp())).ln();
        assert!((eval_mixture(&m, &[z], false) - direct).abs() < 1e-12);
        assert!((m.log_density(&[z]) - direct).abs() < 1e-12);
    }

    #[test]
    fn mixture_detach_is_value_transparent() {
        let a = DiagGaussian::from_vecs(vec![-1.0, 0.2], vec![0.0, 0.4]).unwrap();
        let b = DiagGaussian::from_vecs(vec![2.0, -0.3], vec![-0.5, 0.1]).unwrap();
        let m = MixtureParams::new(Tensor::vector(vec![0.3, -0.4]), vec![a, b]).unwrap();
        let z = [0.25, -1.5];
        assert_eq!(
            eval_mixture(&m, &z, true).to_bits(),
            eval_mixture(&m, &z, false).to_bits()
        );
    }

    #[test]
    fn mixture_weights_sum_to_one() {
        let c = DiagGaussian::standard(1);
        let m = MixtureParams::new(
            Tensor::vector(vec![3.0, -2.0, 0.5, 10.0]),
            vec![c.clone(), c.clone(), c.clone(), c],
        )
        .unwrap();
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mixture_is_rejected() {
        assert!(matches!(
            MixtureParams::new(Tensor::vector(vec![]), vec![]),
            Err(Error::Contract(_))
        ));
        let mut t = Tape::new();
        let logits = t.constant(Tensor::vector(vec![]));
        let z = t.constant(Tensor::vector(vec![0.0]));
        let m = MixtureNodes {
            logits,
            components: vec![],
        };
        assert!(matches!(mixture_logpdf(&mut t, &m, z, false), Err(Error::Contract(_))));
    }

    #[test]
    fn bernoulli_examples() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[4]));
        let x = Tensor::vector(vec![1.0, 0.0, 0.0, 1.0]);
        let lp = bernoulli_logpmf(&mut t, l, &x).unwrap();
        assert!((t.item(lp).unwrap() + 4.0 * 2f64.ln()).abs() < 1e-15);

        let l = t.constant(Tensor::vector(vec![800.0]));
        let lp = bernoulli_logpmf(&mut t, l, &Tensor::vector(vec![1.0])).unwrap();
        assert_eq!(t.item(lp).unwrap(), 0.0);

        let bad = bernoulli_logpmf(&mut t, l, &Tensor::vector(vec![0.5]));
        assert!(matches!(bad, Err(Error::Contract(_))));
    }

    #[test]
    fn bernoulli_matches_sigmoid_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..50).map(|_| rng.random_range(-6.0..6.0)).collect();
        let x: Vec<f64> = (0..50).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let naive: f64 = logits
            .iter()
            .zip(&x)
            .map(|(l, x)| {
                let p = 1.0 / (1.0 + (-l).exp());
                x * p.ln() + (1.0 - x) * (1.0 - p).ln()
            })
            .sum();
        let mut t = Tape::new();
        let l = t.constant(Tensor::vector(logits.clone()));
        let lp = bernoulli_logpmf(&mut t, l, &Tensor::vector(x.clone())).unwrap();
        assert!((t.item(lp).unwrap() - naive).abs() < 1e-10);
        assert!((bernoulli_log_mass(&logits, &x) - naive).abs() < 1e-10);
    }
}
