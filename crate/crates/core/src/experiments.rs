//! Experiment drivers behind the CLI subcommands. Each writes its traces, a
//! `summary.json` and the effective `config.txt` into the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Optimizer, RunConfig};
use crate::data::{load_mnist_idx, Dataset};
use crate::distributions::{standard_normal, DiagGaussian, MixtureParams};
use crate::error::{Error, Result};
use crate::estimators::{
    grad_estimate, mixture_grad_estimate, per_sample_gradients, variance_probe, Bound,
    ConjugateGaussian, EstimatorKind, GaussianTarget, MixtureTarget,
};
use crate::models::{nll_eval, train_epoch, TrainSettings, Trainer, VaeConfig, VaeParams};
use crate::optim::{sgd_step, AdamState};
use crate::tensor::Tensor;
use crate::trace::{TraceRecord, TraceWriter};

/// Salt for the evaluation stream, shared by both arms of a pair.
const EVAL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let path = cfg.out.join("config.txt");
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::numeric(format!("cannot encode {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn trace_path(cfg: &RunConfig, stem: &str) -> PathBuf {
    cfg.out.join(format!("{stem}.{}", cfg.trace_format.extension()))
}

struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Clock {
            start: Instant::now(),
            enabled,
        }
    }

    fn stamp(&self, mut r: TraceRecord) -> TraceRecord {
        if self.enabled {
            r.wall_clock = Some(self.start.elapsed().as_secs_f64());
        }
        r
    }
}

/// Target of the Gaussian fit: `mu ~ N(0, 1)`, `log_sigma ~ U(-1, 1)` per coordinate.
pub fn fit_gauss_target(dim: usize, seed: u64) -> DiagGaussian {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = standard_normal(&mut rng, &[dim]);
    let ls = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    DiagGaussian::new(mu, Tensor::vector(ls)).expect("finite target")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitGaussSummary {
    pub estimator: String,
    pub dim: usize,
    pub iterations: u64,
    pub initial_kl: f64,
    pub final_kl: f64,
    /// Mean KL over the last (up to) 100 trace rows.
    pub final_mean_kl: f64,
    pub trace: PathBuf,
}

/// Fits a diagonal Gaussian, started at `N(0, I)`, to a fixed Gaussian
/// target. One trace row per iteration holds `KL(q || target)` before the
/// step, so `iterations = 0` yields only the initial KL.
pub fn run_fit_gauss(cfg: &RunConfig) -> Result<FitGaussSummary> {
    prepare_out(cfg)?;
    let dim = cfg.dim.unwrap_or(100);
    let target = fit_gauss_target(dim, cfg.target_seed);
    let model = GaussianTarget {
        target: target.clone(),
        log_evidence: 0.0,
    };
    let optimizer = cfg.optimizer.unwrap_or(Optimizer::Sgd);
    let lr = cfg.lr.unwrap_or(match optimizer {
        Optimizer::Sgd => 0.05,
        Optimizer::Adam => 1e-2,
    });
    let mut q = DiagGaussian::standard(dim);
    let mut adam = AdamState::new(
        crate::optim::AdamConfig { lr, ..cfg.adam() },
        &[&q.mu, &q.log_sigma],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let path = trace_path(cfg, "fit-gauss");
    let mut writer = TraceWriter::create(&path, cfg.trace_format)?;
    let clock = Clock::new(cfg.record_wall_clock);
    let mut kls = Vec::new();
    for it in 0..=cfg.iterations {
        let kl = q.kl(&target)?;
        if !kl.is_finite() || kl > 1e6 {
            writer.flush()?;
            return Err(Error::Divergence(format!(
                "KL to target reached {kl} at iteration {it} (seed {})",
                cfg.seed
            )));
        }
        kls.push(kl);
        let eps = standard_normal(&mut rng, &[dim]);
        let g = match grad_estimate(&model, &q, &eps, &cfg.estimator_at(it)) {
            Err(Error::Numeric(m)) => {
                writer.flush()?;
                return Err(Error::Divergence(format!("{m} at iteration {it}")));
            }
            other => other?,
        };
        let mut rec = TraceRecord::new(it, g.elbo_value, g.norm());
        rec.kl = Some(kl);
        writer.write(&clock.stamp(rec))?;
        if it == cfg.iterations {
            break;
        }
        let descent: Vec<Tensor> = g.grads.iter().map(|t| t.scale(-1.0)).collect();
        let mut params = [&mut q.mu, &mut q.log_sigma];
        match optimizer {
            Optimizer::Sgd => sgd_step(&mut params, &descent, lr)?,
            Optimizer::Adam => adam.step(&mut params, &descent)?,
        }
    }
    writer.flush()?;
    let tail = &kls[kls.len().saturating_sub(100)..];
    let summary = FitGaussSummary {
        estimator: cfg.estimator.to_string(),
        dim,
        iterations: cfg.iterations,
        initial_kl: kls[0],
        final_kl: *kls.last().expect("at least one row"),
        final_mean_kl: tail.iter().sum::<f64>() / tail.len() as f64,
        trace: path,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Known mixture posterior: logits `N(0, 0.25)`, means `N(0, 4)`,
/// log-stds `U(-0.5, 0.5)`.
pub fn mixture_target(k: usize, dim: usize, seed: u64) -> Result<MixtureParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = standard_normal(&mut rng, &[k]).scale(0.5);
    let components = (0..k)
        .map(|_| {
            let mu = standard_normal(&mut rng, &[dim]).scale(2.0);
            let ls = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            DiagGaussian::new(mu, Tensor::vector(ls))
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureParams::new(logits, components)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    /// Position on the path, `0` at the start and `1` at the target.
    pub t: f64,
    pub path_trace: f64,
    pub score_trace: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub components: usize,
    pub dim: usize,
    pub samples: usize,
    pub points: Vec<ProbePoint>,
    /// Largest path-component trace over points with `t >= 0.75`.
    pub last_quarter_max_path_trace: f64,
    pub endpoint_path_trace: f64,
    pub endpoint_score_trace: f64,
    pub trace: PathBuf,
}

/// Walks the mixture parameters on a straight line from a perturbed start
/// to the true posterior and measures the gradient covariance trace of the
/// path-derivative and score components at `path_steps` evenly spaced
/// points, the last being the target itself.
pub fn run_mixture_probe(cfg: &RunConfig) -> Result<ProbeSummary> {
    prepare_out(cfg)?;
    let k = cfg.k.unwrap_or(5);
    let dim = cfg.dim.unwrap_or(2);
    let truth = mixture_target(k, dim, cfg.target_seed)?;
    let model = MixtureTarget {
        target: truth.clone(),
    };
    let end = truth.to_flat();
    let mut path_rng = ChaCha8Rng::seed_from_u64(cfg.path_seed);
    let start: Vec<f64> = standard_normal(&mut path_rng, &[end.len()])
        .data()
        .iter()
        .zip(&end)
        .map(|(n, e)| e + cfg.path_scale * n)
        .collect();
    let path = trace_path(cfg, "mixture-probe");
    let mut writer = TraceWriter::create(&path, cfg.trace_format)?;
    let clock = Clock::new(cfg.record_wall_clock);
    let m = cfg.path_steps;
    let n = cfg.probe_samples;
    let mut points = Vec::with_capacity(m);
    for j in 1..=m {
        let t = j as f64 / m as f64;
        let flat: Vec<f64> = if j == m {
            end.clone()
        } else {
            start.iter().zip(&end).map(|(s, e)| s + t * (e - s)).collect()
        };
        let params = MixtureParams::from_flat(&flat, k, dim)?;
        let seed = cfg.seed.wrapping_add(j as u64);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Tensor> {
            (0..k).map(|_| standard_normal(rng, &[dim])).collect()
        };
        let mut elbo_sum = 0.0;
        let path_stats = variance_probe(n, seed, |rng| {
            let g = mixture_grad_estimate(&model, &params, &draw(rng), &EstimatorKind::PathDerivative)?;
            elbo_sum += g.elbo_value;
            Ok(g.flat())
        })?;
        let score_stats = variance_probe(n, seed, |rng| {
            Ok(mixture_grad_estimate(&model, &params, &draw(rng), &EstimatorKind::ScoreFunction)?.flat())
        })?;
        let mean_norm = path_stats.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut rec = TraceRecord::new(j as u64, elbo_sum / n as f64, mean_norm);
        rec.grad_variance = Some(path_stats.trace);
        rec.score_variance = Some(score_stats.trace);
        writer.write(&clock.stamp(rec))?;
        points.push(ProbePoint {
            t,
            path_trace: path_stats.trace,
            score_trace: score_stats.trace,
        });
    }
    writer.flush()?;
    let last = points.last().expect("path_steps is positive");
    let summary = ProbeSummary {
        components: k,
        dim,
        samples: n,
        last_quarter_max_path_trace: points
            .iter()
            .filter(|p| p.t >= 0.75)
            .map(|p| p.path_trace)
            .fold(0.0, f64::max),
        endpoint_path_trace: last.path_trace,
        endpoint_score_trace: last.score_trace,
        points,
        trace: path,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Training and test images, binarized with `binarize_seed` and
/// `binarize_seed + 1`.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let dir = &cfg.data_dir;
    let train = load_mnist_idx(
        &dir.join(TRAIN_IMAGES),
        Some(&dir.join(TRAIN_LABELS)),
        cfg.n_train,
        cfg.binarize_seed,
    )?;
    let test = load_mnist_idx(
        &dir.join(TEST_IMAGES),
        Some(&dir.join(TEST_LABELS)),
        cfg.n_test,
        cfg.binarize_seed.wrapping_add(1),
    )?;
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub estimator: String,
    pub seed: u64,
    pub test_nll: f64,
    /// Mean minibatch bound over the last epoch.
    pub final_train_bound: f64,
    pub trace: PathBuf,
}

fn vae_config(cfg: &RunConfig, input: usize) -> VaeConfig {
    VaeConfig {
        input,
        hidden: cfg.hidden.clone(),
        latent: cfg.latent,
    }
}

fn default_k(bound: Bound) -> usize {
    match bound {
        Bound::Elbo => 1,
        Bound::Iwae => 5,
    }
}

/// Trains one model from `seed` and evaluates its test NLL. Initialization
/// and training noise come from one generator seeded by `seed`; evaluation
/// noise from a second one, so two arms with the same seed share both.
pub fn train_arm(
    cfg: &RunConfig,
    kind: &EstimatorKind,
    bound: Bound,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    stem: &str,
) -> Result<(VaeParams, ArmResult)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::config("training and test sets must be non-empty"));
    }
    let k = cfg.k.unwrap_or(default_k(bound));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = VaeParams::new(&vae_config(cfg, train.images.shape()[1]), &mut rng)?;
    let mut trainer = Trainer::new(params, cfg.adam());
    let path = trace_path(cfg, stem);
    let mut writer = TraceWriter::create(&path, cfg.trace_format)?;
    let clock = Clock::new(cfg.record_wall_clock);
    let mut last_epoch = Vec::new();
    for epoch in 0..cfg.epochs {
        let settings = TrainSettings {
            batch_size: cfg.batch_size,
            k,
            bound,
            kind: match kind {
                EstimatorKind::ScaledCV(_) => cfg.estimator_at(trainer.iteration),
                other => other.clone(),
            },
            seed,
        };
        last_epoch = train_epoch(&mut trainer, &train.images, &settings, epoch, &mut rng)?;
        for r in &last_epoch {
            writer.write(&clock.stamp(r.clone()))?;
        }
    }
    writer.flush()?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT);
    let test_nll = nll_eval(&trainer.params, &test.images, cfg.nll_k, &mut eval_rng)?;
    let final_train_bound = if last_epoch.is_empty() {
        f64::NAN
    } else {
        last_epoch.iter().map(|r| r.elbo).sum::<f64>() / last_epoch.len() as f64
    };
    Ok((
        trainer.params,
        ArmResult {
            estimator: kind.to_string(),
            seed,
            test_nll,
            final_train_bound,
            trace: path,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub bound: String,
    pub k: usize,
    pub epochs: usize,
    pub nll_k: usize,
    pub result: ArmResult,
    pub params: PathBuf,
}

/// Trains a single model with `cfg.estimator` and saves its parameters.
pub fn run_training(cfg: &RunConfig, bound: Bound) -> Result<TrainSummary> {
    prepare_out(cfg)?;
    let (train, test) = load_splits(cfg)?;
    let (params, result) = train_arm(cfg, &cfg.estimator, bound, cfg.seed, &train, &test, "train")?;
    let params_path = cfg.out.join("params.json");
    params.save(&params_path)?;
    let summary = TrainSummary {
        bound: bound.to_string(),
        k: cfg.k.unwrap_or(default_k(bound)),
        epochs: cfg.epochs,
        nll_k: cfg.nll_k,
        result,
        params: params_path,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub seed: u64,
    pub arm_a: ArmResult,
    pub arm_b: ArmResult,
    /// `arm_b.test_nll - arm_a.test_nll`.
    pub difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub bound: String,
    pub k: usize,
    pub epochs: usize,
    pub nll_k: usize,
    pub margin: f64,
    pub pairs: Vec<PairResult>,
    /// Pairs with `arm_b.test_nll <= arm_a.test_nll + margin`.
    pub pairs_within_margin: usize,
}

pub const PAIR_MARGIN: f64 = 0.5;

/// Trains `cfg.arm_a` and `cfg.arm_b` from identical seeds for `cfg.pairs`
/// consecutive seeds starting at `cfg.seed`.
pub fn run_paired_training(cfg: &RunConfig) -> Result<PairedSummary> {
    prepare_out(cfg)?;
    let (train, test) = load_splits(cfg)?;
    let mut pairs = Vec::with_capacity(cfg.pairs);
    for p in 0..cfg.pairs as u64 {
        let seed = cfg.seed.wrapping_add(p);
        let (_, a) = train_arm(cfg, &cfg.arm_a, cfg.bound, seed, &train, &test, &format!("pair{p}_a"))?;
        let (_, b) = train_arm(cfg, &cfg.arm_b, cfg.bound, seed, &train, &test, &format!("pair{p}_b"))?;
        pairs.push(PairResult {
            seed,
            difference: b.test_nll - a.test_nll,
            arm_a: a,
            arm_b: b,
        });
    }
    let summary = PairedSummary {
        bound: cfg.bound.to_string(),
        k: cfg.k.unwrap_or(default_k(cfg.bound)),
        epochs: cfg.epochs,
        nll_k: cfg.nll_k,
        margin: PAIR_MARGIN,
        pairs_within_margin: pairs.iter().filter(|p| p.difference <= PAIR_MARGIN).count(),
        pairs,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllSummary {
    pub params: PathBuf,
    pub n_test: usize,
    pub nll_k: usize,
    pub test_nll: f64,
}

/// Test NLL of a saved parameter file.
pub fn run_nll_eval(cfg: &RunConfig) -> Result<NllSummary> {
    let path = cfg
        .params
        .clone()
        .ok_or_else(|| Error::config("nll-eval needs 'params' (a parameter file)"))?;
    prepare_out(cfg)?;
    let params = VaeParams::load(&path)?;
    let dir = &cfg.data_dir;
    let test = load_mnist_idx(&dir.join(TEST_IMAGES), None, cfg.n_test, cfg.binarize_seed.wrapping_add(1))?;
    if test.images.shape()[1] != params.input_dim() {
        return Err(Error::shape("parameter file does not match the image size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_SALT);
    let summary = NllSummary {
        params: path,
        n_test: cfg.n_test,
        nll_k: cfg.nll_k,
        test_nll: nll_eval(&params, &test.images, cfg.nll_k, &mut rng)?,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub k: usize,
    pub draws: usize,
    pub mean_td: Vec<f64>,
    pub mean_pd: Vec<f64>,
    pub abs_difference: Vec<f64>,
    /// Standard error of the paired difference `TD - PD`, per coordinate.
    pub se_difference: Vec<f64>,
    pub se_td: Vec<f64>,
    pub se_pd: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IwaeReport {
    pub model: String,
    pub q_mu: Vec<f64>,
    pub q_log_sigma: Vec<f64>,
    pub rows: Vec<BiasRow>,
}

/// Conjugate toy of the bias report: standard-normal prior, unit noise.
pub fn report_model() -> Result<(ConjugateGaussian, DiagGaussian)> {
    let model = ConjugateGaussian::new(
        DiagGaussian::standard(2),
        Tensor::vector(vec![1.0, -0.5]),
        Tensor::zeros(&[2]),
    )?;
    let q = DiagGaussian::from_vecs(vec![0.1, 0.2], vec![0.0, -0.6])?;
    Ok((model, q))
}

#[derive(Default)]
struct Moments {
    n: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Moments {
    fn push(&mut self, v: &[f64]) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; v.len()];
            self.sq = vec![0.0; v.len()];
        }
        self.n += 1;
        for (j, x) in v.iter().enumerate() {
            self.sum[j] += x;
            self.sq[j] += x * x;
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    fn se(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(&self.sq)
            .map(|(s, q)| {
                let m = s / n;
                ((q / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt()
            })
            .collect()
    }
}

/// Compares the means of the total- and path-derivative importance-weighted
/// gradients for K = 2 and 5 on common noise. The result is reported, not
/// tested against a threshold.
pub fn run_iwae_report(cfg: &RunConfig) -> Result<IwaeReport> {
    prepare_out(cfg)?;
    let (model, q) = report_model()?;
    let chunk = 10_000usize;
    let mut rows = Vec::new();
    for k in [2usize, 5] {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
        let (mut td, mut pd, mut diff) = (Moments::default(), Moments::default(), Moments::default());
        let mut done = 0;
        while done < cfg.draws {
            let n = chunk.min(cfg.draws - done);
            let eps = standard_normal(&mut rng, &[k * n, q.dim()]);
            let a = per_sample_gradients(&model, &q, &eps, k, Bound::Iwae, &EstimatorKind::TotalDerivative)?;
            let b = per_sample_gradients(&model, &q, &eps, k, Bound::Iwae, &EstimatorKind::PathDerivative)?;
            for (x, y) in a.grads.iter().zip(&b.grads) {
                td.push(x);
                pd.push(y);
                let d: Vec<f64> = x.iter().zip(y).map(|(x, y)| x - y).collect();
                diff.push(&d);
            }
            done += n;
        }
        rows.push(BiasRow {
            k,
            draws: cfg.draws,
            mean_td: td.mean(),
            mean_pd: pd.mean(),
            abs_difference: diff.mean().iter().map(|v| v.abs()).collect(),
            se_difference: diff.se(),
            se_td: td.se(),
            se_pd: pd.se(),
        });
    }
    let report = IwaeReport {
        model: "conjugate Gaussian, d = 2, x = (1, -0.5)".into(),
        q_mu: q.mu.data().to_vec(),
        q_log_sigma: q.log_sigma.data().to_vec(),
        rows,
    };
    write_json(&cfg.out.join("iwae-report.json"), &report)?;
    Ok(report)
}
