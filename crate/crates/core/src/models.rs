//! Single-stochastic-layer VAE with tanh MLPs and a Bernoulli decoder.
//!
//! The encoder maps each datapoint to its own `(mu, log_sigma)`. Estimators
//! that detach the variational parameters detach these encoder outputs, so
//! the encoder weights still receive the path gradient.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::distributions::{bernoulli_logpmf, gaussian_logpdf, standard_normal, DiagGaussian, GaussianNodes};
use crate::error::{Error, Result};
use crate::estimators::{bound_surrogate, estimate_on_tape, Bound, EstimatorKind, Model, Surrogate};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;
use crate::trace::TraceRecord;

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let &[fan_in, fan_out] = shape else {
        return Err(Error::shape(format!("xavier init needs a 2-d shape, got {shape:?}")));
    };
    if fan_in + fan_out == 0 {
        return Tensor::matrix(fan_in, fan_out, Vec::new());
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Layer {
            weight: xavier_init(&[fan_in, fan_out], rng)?,
            bias: Tensor::zeros(&[fan_out]),
        })
    }

    fn dims(&self) -> Result<(usize, usize)> {
        match (self.weight.shape(), self.bias.shape()) {
            (&[i, o], &[b]) if b == o => Ok((i, o)),
            (w, b) => Err(Error::shape(format!("layer weight {w:?} and bias {b:?} disagree"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Xavier weights and zero biases for layer sizes `sizes[0] -> sizes[1] -> ...`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::shape("an MLP needs at least an input and an output size"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Layer::xavier(w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(MlpParams { layers })
    }

    pub fn validate(&self) -> Result<(usize, usize)> {
        let mut dims = self.layers.iter().map(Layer::dims);
        let (input, mut out) = dims
            .next()
            .ok_or_else(|| Error::shape("MLP has no layers"))??;
        for d in dims {
            let (i, o) = d?;
            if i != out {
                return Err(Error::shape(format!("layer input {i} does not follow output {out}")));
            }
            out = o;
        }
        Ok((input, out))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            input: 784,
            hidden: vec![50, 50],
            latent: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeParams {
    /// `input -> hidden...`, tanh after every layer.
    pub encoder: MlpParams,
    pub mu_head: Layer,
    pub log_sigma_head: Layer,
    /// `latent -> hidden... -> input` logits, tanh after all but the last layer.
    pub decoder: MlpParams,
}

impl VaeParams {
    pub fn new<R: Rng + ?Sized>(config: &VaeConfig, rng: &mut R) -> Result<Self> {
        if config.input == 0 || config.latent == 0 || config.hidden.is_empty() {
            return Err(Error::config("VAE needs positive input, latent and at least one hidden size"));
        }
        let mut enc = vec![config.input];
        enc.extend(&config.hidden);
        let top = *config.hidden.last().expect("non-empty");
        let mut dec = vec![config.latent];
        dec.extend(config.hidden.iter().rev());
        dec.push(config.input);
        let p = VaeParams {
            encoder: MlpParams::new(&enc, rng)?,
            mu_head: Layer::xavier(top, config.latent, rng)?,
            log_sigma_head: Layer::xavier(top, config.latent, rng)?,
            decoder: MlpParams::new(&dec, rng)?,
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks layer chaining and returns `(input, latent)`.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let (input, top) = self.encoder.validate()?;
        let (hi, latent) = self.mu_head.dims()?;
        let (hs, ls) = self.log_sigma_head.dims()?;
        let (din, dout) = self.decoder.validate()?;
        if hi != top || hs != top || ls != latent || din != latent || dout != input {
            return Err(Error::shape("encoder heads and decoder dimensions are inconsistent"));
        }
        Ok((input, latent))
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.layers[0].weight.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.bias.len()
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder
            .layers
            .iter()
            .chain([&self.mu_head, &self.log_sigma_head])
            .chain(&self.decoder.layers)
    }

    /// All parameter tensors in a fixed order: weight then bias per layer.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .layers
            .iter_mut()
            .chain([&mut self.mu_head, &mut self.log_sigma_head])
            .chain(&mut self.decoder.layers)
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn record(&self, tape: &mut Tape, requires_grad: bool) -> VaeNodes {
        let mut rec = |l: &Layer| (tape.leaf(l.weight.clone(), requires_grad), tape.leaf(l.bias.clone(), requires_grad));
        VaeNodes {
            encoder: self.encoder.layers.iter().map(&mut rec).collect(),
            mu_head: rec(&self.mu_head),
            log_sigma_head: rec(&self.log_sigma_head),
            decoder: self.decoder.layers.iter().map(&mut rec).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::numeric(format!("cannot encode parameters: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: VaeParams = serde_json::from_str(&text).map_err(|e| Error::Format {
            offset: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        p.validate()?;
        Ok(p)
    }
}

/// Tape handles for [`VaeParams`], in the order of [`VaeParams::tensors`].
#[derive(Clone, Debug)]
pub struct VaeNodes {
    pub encoder: Vec<(NodeId, NodeId)>,
    pub mu_head: (NodeId, NodeId),
    pub log_sigma_head: (NodeId, NodeId),
    pub decoder: Vec<(NodeId, NodeId)>,
}

impl VaeNodes {
    pub fn all(&self) -> Vec<NodeId> {
        self.encoder
            .iter()
            .chain([&self.mu_head, &self.log_sigma_head])
            .chain(&self.decoder)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

fn linear(tape: &mut Tape, (w, b): (NodeId, NodeId), x: NodeId) -> Result<NodeId> {
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

fn as_rows(tape: &mut Tape, x: NodeId, width: usize, what: &str) -> Result<(NodeId, bool)> {
    let shape = tape.value(x)?.shape().to_vec();
    match shape.as_slice() {
        [n] if *n == width => Ok((tape.reshape(x, &[1, width])?, true)),
        [_, n] if *n == width => Ok((x, false)),
        _ => Err(Error::shape(format!("{what} expects width {width}, got {shape:?}"))),
    }
}

/// Per-row variational parameters for `x: [B, input]`.
pub fn encode_nodes(tape: &mut Tape, p: &VaeNodes, x: NodeId) -> Result<GaussianNodes> {
    let mut h = x;
    for &layer in &p.encoder {
        let a = linear(tape, layer, h)?;
        h = tape.tanh(a)?;
    }
    Ok(GaussianNodes {
        mu: linear(tape, p.mu_head, h)?,
        log_sigma: linear(tape, p.log_sigma_head, h)?,
    })
}

/// Pixel logits for `z: [R, latent]`.
pub fn decode_nodes(tape: &mut Tape, p: &VaeNodes, z: NodeId) -> Result<NodeId> {
    let mut h = z;
    let last = p.decoder.len() - 1;
    for (i, &layer) in p.decoder.iter().enumerate() {
        h = linear(tape, layer, h)?;
        if i < last {
            h = tape.tanh(h)?;
        }
    }
    Ok(h)
}

fn strip_row(t: Tensor, single: bool) -> Result<Tensor> {
    if single {
        let n = t.len();
        t.reshape(&[n])
    } else {
        Ok(t)
    }
}

/// Variational parameters for one datapoint (`[input]`) or a batch (`[B, input]`).
pub fn encode(params: &VaeParams, x: &Tensor) -> Result<DiagGaussian> {
    let mut tape = Tape::new();
    let nodes = params.record(&mut tape, false);
    let xn = tape.constant(x.clone());
    let (xn, single) = as_rows(&mut tape, xn, params.input_dim(), "encoder")?;
    let q = encode_nodes(&mut tape, &nodes, xn)?;
    DiagGaussian::new(
        strip_row(tape.value(q.mu)?.clone(), single)?,
        strip_row(tape.value(q.log_sigma)?.clone(), single)?,
    )
}

/// Pixel logits for one latent (`[latent]`) or a batch (`[R, latent]`).
pub fn decode(params: &VaeParams, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = params.record(&mut tape, false);
    let zn = tape.constant(z.clone());
    let (zn, single) = as_rows(&mut tape, zn, params.latent_dim(), "decoder")?;
    let logits = decode_nodes(&mut tape, &nodes, zn)?;
    strip_row(tape.value(logits)?.clone(), single)
}

/// `log p(x, z) = log Bernoulli(x | decoder(z)) + log N(z; 0, I)`, one row of
/// `x` per row of `z`.
pub struct DecoderModel<'a> {
    pub nodes: &'a VaeNodes,
    pub x: Tensor,
    prior: DiagGaussian,
}

impl<'a> DecoderModel<'a> {
    pub fn new(nodes: &'a VaeNodes, x: Tensor, latent: usize) -> Self {
        DecoderModel {
            nodes,
            x,
            prior: DiagGaussian::standard(latent),
        }
    }
}

impl Model for DecoderModel<'_> {
    fn log_joint(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let lik = self.log_likelihood(tape, z).expect("decoder has a likelihood")?;
        let p = self.prior.record(tape, false);
        let lp = gaussian_logpdf(tape, &p, z)?;
        tape.add(lik, lp)
    }

    fn log_likelihood(&self, tape: &mut Tape, z: NodeId) -> Option<Result<NodeId>> {
        Some(decode_nodes(tape, self.nodes, z).and_then(|l| bernoulli_logpmf(tape, l, &self.x)))
    }

    fn prior(&self) -> Option<&DiagGaussian> {
        Some(&self.prior)
    }
}

/// Per-datapoint bound for a batch `x: [B, input]` with noise `eps: [k * B, latent]`
/// (sample-major). Returns `[B]`.
pub fn batch_bound(
    tape: &mut Tape,
    nodes: &VaeNodes,
    x: &Tensor,
    eps: NodeId,
    k: usize,
    bound: Bound,
    surrogate: Surrogate,
) -> Result<NodeId> {
    let &[b, _] = x.shape() else {
        return Err(Error::shape("batch must be a matrix"));
    };
    let latent = tape.value(nodes.mu_head.1)?.len();
    let xn = tape.constant(x.clone());
    let q = encode_nodes(tape, nodes, xn)?;
    let rows: Vec<usize> = (0..k * b).map(|r| r % b).collect();
    let model = DecoderModel::new(nodes, x.gather(&rows)?, latent);
    bound_surrogate(tape, &model, &q, eps, k, bound, surrogate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    /// Samples per datapoint.
    pub k: usize,
    pub bound: Bound,
    pub kind: EstimatorKind,
    /// Reported when training aborts, so the failure can be replayed.
    pub seed: u64,
}

impl TrainSettings {
    pub fn vae(kind: EstimatorKind, seed: u64) -> Self {
        TrainSettings {
            batch_size: 20,
            k: 1,
            bound: Bound::Elbo,
            kind,
            seed,
        }
    }

    pub fn iwae(kind: EstimatorKind, k: usize, seed: u64) -> Self {
        TrainSettings {
            batch_size: 20,
            k,
            bound: Bound::Iwae,
            kind,
            seed,
        }
    }
}

/// Model parameters together with optimizer state and the global step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub params: VaeParams,
    pub adam: AdamState,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(params: VaeParams, adam: AdamConfig) -> Self {
        let state = AdamState::new(adam, &params.tensors());
        Trainer {
            params,
            adam: state,
            iteration: 0,
        }
    }
}

/// Mean bound over the batch and its gradient with respect to every
/// parameter tensor, for fixed noise.
pub fn batch_gradient(
    params: &VaeParams,
    x: &Tensor,
    eps: &Tensor,
    k: usize,
    bound: Bound,
    kind: &EstimatorKind,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let nodes = params.record(&mut tape, true);
    let e = tape.constant(eps.clone());
    let (grads, value) = estimate_on_tape(&mut tape, kind, &nodes.all(), |t, s| {
        let per_point = batch_bound(t, &nodes, x, e, k, bound, s)?;
        t.mean(per_point, None)
    })?;
    Ok((tape.item(value)?, grads))
}

/// One shuffled pass over `data: [N, input]`, one Adam step per minibatch.
/// Each record holds the minibatch bound before the step and the gradient norm.
pub fn train_epoch(
    trainer: &mut Trainer,
    data: &Tensor,
    settings: &TrainSettings,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TraceRecord>> {
    let &[n, _] = data.shape() else {
        return Err(Error::shape("training data must be a matrix"));
    };
    if settings.batch_size == 0 || settings.k == 0 {
        return Err(Error::config("batch size and k must be positive"));
    }
    let latent = trainer.params.latent_dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut records = Vec::new();
    for (batch, idx) in order.chunks(settings.batch_size).enumerate() {
        let x = data.gather(idx)?;
        let eps = standard_normal(rng, &[settings.k * idx.len(), latent]);
        let abort = |what: &str| {
            Error::Divergence(format!(
                "{what} at epoch {epoch}, batch {batch} (seed {})",
                settings.seed
            ))
        };
        let (value, grads) =
            match batch_gradient(&trainer.params, &x, &eps, settings.k, settings.bound, &settings.kind) {
                Err(Error::Numeric(m)) => return Err(abort(&m)),
                other => other?,
            };
        if !value.is_finite() {
            return Err(abort(&format!("non-finite loss {value}")));
        }
        let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(abort("non-finite gradient"));
        }
        let descent: Vec<Tensor> = grads.iter().map(|g| g.scale(-1.0)).collect();
        trainer.adam.step(&mut trainer.params.tensors_mut(), &descent)?;
        records.push(TraceRecord::new(trainer.iteration, value, norm));
        trainer.iteration += 1;
    }
    Ok(records)
}

/// Importance-weighted bound with `k` samples for every row of `data`,
/// evaluated in chunks.
pub fn iwae_bounds(params: &VaeParams, data: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::contract("NLL evaluation needs K >= 1"));
    }
    let &[n, _] = data.shape() else {
        return Err(Error::shape("evaluation data must be a matrix"));
    };
    let latent = params.latent_dim();
    let chunk = (2048 / k).max(1);
    let mut out = Vec::with_capacity(n);
    let all: Vec<usize> = (0..n).collect();
    for idx in all.chunks(chunk) {
        let x = data.gather(idx)?;
        let eps = standard_normal(rng, &[k * idx.len(), latent]);
        let mut tape = Tape::new();
        let nodes = params.record(&mut tape, false);
        let e = tape.constant(eps);
        let v = batch_bound(&mut tape, &nodes, &x, e, k, Bound::Iwae, Surrogate::Total)?;
        out.extend_from_slice(tape.value(v)?.data());
    }
    if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("importance-weighted bound evaluated to {bad}")));
    }
    Ok(out)
}

/// Mean over datapoints of the negative `k`-sample importance-weighted bound.
pub fn nll_eval(params: &VaeParams, data: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let bounds = iwae_bounds(params, data, k, rng)?;
    if bounds.is_empty() {
        return Err(Error::contract("NLL evaluation on an empty dataset"));
    }
    Ok(-bounds.iter().sum::<f64>() / bounds.len() as f64)
}
