//! Run configuration: a flat `key = value` text format with a fixed schema.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys and
//! malformed values are configuration errors that name the line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::estimators::{Bound, CvSchedule, EstimatorKind};
use crate::trace::TraceFormat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::config(format!("unknown optimizer '{s}' (sgd or adam)"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

/// Every experiment setting. Fields left `None` fall back to a
/// per-experiment default, see the accessor methods.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: String,
    pub estimator: EstimatorKind,
    pub cv_schedule: Option<CvSchedule>,
    /// Estimators of the two arms of a paired run.
    pub arm_a: EstimatorKind,
    pub arm_b: EstimatorKind,
    /// Training objective of paired runs.
    pub bound: Bound,
    pub dim: Option<usize>,
    /// Mixture components (mixture-probe) or importance samples (training).
    pub k: Option<usize>,
    /// Model initialization and noise.
    pub seed: u64,
    /// Target distribution of the synthetic experiments.
    pub target_seed: u64,
    /// Start point of the mixture-probe path.
    pub path_seed: u64,
    pub path_scale: f64,
    pub binarize_seed: u64,
    pub optimizer: Option<Optimizer>,
    pub lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub iterations: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub probe_samples: usize,
    pub path_steps: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub data_dir: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub nll_k: usize,
    pub pairs: usize,
    pub draws: usize,
    pub params: Option<PathBuf>,
    pub out: PathBuf,
    pub trace_format: TraceFormat,
    pub record_wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: String::new(),
            estimator: EstimatorKind::PathDerivative,
            cv_schedule: None,
            arm_a: EstimatorKind::TotalDerivative,
            arm_b: EstimatorKind::PathDerivative,
            bound: Bound::Elbo,
            dim: None,
            k: None,
            seed: 0,
            target_seed: 1,
            path_seed: 2,
            path_scale: 0.3,
            binarize_seed: 3,
            optimizer: None,
            lr: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-4,
            iterations: 2000,
            epochs: 20,
            batch_size: 20,
            probe_samples: 1000,
            path_steps: 20,
            hidden: vec![50, 50],
            latent: 10,
            data_dir: PathBuf::from("data"),
            n_train: 1000,
            n_test: 200,
            nll_k: 256,
            pairs: 1,
            draws: 1_000_000,
            params: None,
            out: PathBuf::from("out"),
            trace_format: TraceFormat::Csv,
            record_wall_clock: false,
        }
    }
}

/// `(key, description)` for every accepted key.
pub const SCHEMA: &[(&str, &str)] = &[
    ("experiment", "experiment name, set by the subcommand"),
    ("estimator", "td | pd | score | cv:<c>"),
    ("cv_schedule", "linear:<start>:<end>:<steps>, overrides the scale of cv estimators"),
    ("arm_a", "estimator of the first arm of a paired run"),
    ("arm_b", "estimator of the second arm of a paired run"),
    ("bound", "elbo | iwae, objective of paired runs"),
    ("dim", "latent dimension of synthetic experiments"),
    ("k", "mixture components or importance samples"),
    ("seed", "model initialization and noise seed"),
    ("target_seed", "seed of the synthetic target"),
    ("path_seed", "seed of the mixture-probe start point"),
    ("path_scale", "distance of the mixture-probe start point from the target"),
    ("binarize_seed", "seed of the per-pixel Bernoulli binarization"),
    ("optimizer", "sgd | adam"),
    ("lr", "learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator offset"),
    ("iterations", "optimization steps of fit-gauss"),
    ("epochs", "training epochs"),
    ("batch_size", "minibatch size"),
    ("probe_samples", "estimator draws per probe point"),
    ("path_steps", "probe points along the path"),
    ("hidden", "comma-separated hidden layer sizes"),
    ("latent", "VAE latent dimension"),
    ("data_dir", "directory holding the IDX files"),
    ("n_train", "training images to load"),
    ("n_test", "test images to load"),
    ("nll_k", "importance samples for NLL evaluation"),
    ("pairs", "seed pairs of a paired run"),
    ("draws", "draws per estimator in iwae-report"),
    ("params", "parameter file for nll-eval"),
    ("out", "output directory"),
    ("trace_format", "csv | jsonl"),
    ("record_wall_clock", "true | false; wall-clock column makes traces non-reproducible"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value '{value}' for '{key}'")))
}

fn positive<T: PartialOrd + Default>(key: &str, v: T) -> Result<T> {
    if v > T::default() {
        Ok(v)
    } else {
        Err(Error::config(format!("'{key}' must be positive")))
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key. Values are validated here, so a config that parsed is usable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "experiment" => self.experiment = value.to_string(),
            "estimator" => self.estimator = value.parse()?,
            "cv_schedule" => self.cv_schedule = Some(value.parse()?),
            "arm_a" => self.arm_a = value.parse()?,
            "arm_b" => self.arm_b = value.parse()?,
            "bound" => self.bound = value.parse()?,
            "dim" => self.dim = Some(positive(key, parse(key, value)?)?),
            "k" => self.k = Some(positive(key, parse(key, value)?)?),
            "seed" => self.seed = parse(key, value)?,
            "target_seed" => self.target_seed = parse(key, value)?,
            "path_seed" => self.path_seed = parse(key, value)?,
            "path_scale" => self.path_scale = positive(key, parse(key, value)?)?,
            "binarize_seed" => self.binarize_seed = parse(key, value)?,
            "optimizer" => self.optimizer = Some(value.parse()?),
            "lr" => self.lr = Some(positive(key, parse(key, value)?)?),
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = positive(key, parse(key, value)?)?,
            "iterations" => self.iterations = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = positive(key, parse(key, value)?)?,
            "probe_samples" => {
                self.probe_samples = parse(key, value)?;
                if self.probe_samples < 2 {
                    return Err(Error::config("'probe_samples' must be at least 2"));
                }
            }
            "path_steps" => self.path_steps = positive(key, parse(key, value)?)?,
            "hidden" => {
                let sizes = value
                    .split(',')
                    .map(|s| parse::<usize>(key, s.trim()).and_then(|v| positive(key, v)))
                    .collect::<Result<Vec<_>>>()?;
                self.hidden = sizes;
            }
            "latent" => self.latent = positive(key, parse(key, value)?)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "n_train" => self.n_train = parse(key, value)?,
            "n_test" => self.n_test = parse(key, value)?,
            "nll_k" => self.nll_k = positive(key, parse(key, value)?)?,
            "pairs" => self.pairs = positive(key, parse(key, value)?)?,
            "draws" => self.draws = positive(key, parse(key, value)?)?,
            "params" => self.params = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "trace_format" => self.trace_format = value.parse()?,
            "record_wall_clock" => self.record_wall_clock = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(c)
    }

    /// The effective configuration in the file format, with every key set.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            if !v.is_empty() {
                let _ = writeln!(s, "{k} = {v}");
            }
        };
        put("experiment", self.experiment.clone());
        put("estimator", self.estimator.to_string());
        put(
            "cv_schedule",
            opt(self.cv_schedule.map(|c| format!("linear:{}:{}:{}", c.start, c.end, c.steps))),
        );
        put("arm_a", self.arm_a.to_string());
        put("arm_b", self.arm_b.to_string());
        put("bound", self.bound.to_string());
        put("dim", opt(self.dim.map(|v| v.to_string())));
        put("k", opt(self.k.map(|v| v.to_string())));
        put("seed", self.seed.to_string());
        put("target_seed", self.target_seed.to_string());
        put("path_seed", self.path_seed.to_string());
        put("path_scale", self.path_scale.to_string());
        put("binarize_seed", self.binarize_seed.to_string());
        put("optimizer", opt(self.optimizer.map(|v| v.to_string())));
        put("lr", opt(self.lr.map(|v| v.to_string())));
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("iterations", self.iterations.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("probe_samples", self.probe_samples.to_string());
        put("path_steps", self.path_steps.to_string());
        put("hidden", join(&self.hidden));
        put("latent", self.latent.to_string());
        put("data_dir", self.data_dir.display().to_string());
        put("n_train", self.n_train.to_string());
        put("n_test", self.n_test.to_string());
        put("nll_k", self.nll_k.to_string());
        put("pairs", self.pairs.to_string());
        put("draws", self.draws.to_string());
        put("params", opt(self.params.as_ref().map(|p| p.display().to_string())));
        put("out", self.out.display().to_string());
        put("trace_format", self.trace_format.extension().to_string());
        put("record_wall_clock", self.record_wall_clock.to_string());
        s
    }

    /// Estimator at optimization step `iteration`, honouring a schedule.
    pub fn estimator_at(&self, iteration: u64) -> EstimatorKind {
        match (&self.estimator, self.cv_schedule) {
            (EstimatorKind::ScaledCV(_), Some(s)) => s.kind_at(iteration),
            (kind, _) => kind.clone(),
        }
    }

    pub fn adam(&self) -> crate::optim::AdamConfig {
        crate::optim::AdamConfig {
            lr: self.lr.unwrap_or(1e-3),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\n\nestimator = cv:0.5\nhidden=20, 10\nk = 5\nlr = 0.05\ncv_schedule = linear:0:1:100\n")
            .unwrap();
        assert_eq!(c.hidden, vec![20, 10]);
        assert_eq!(c.estimator_at(50), EstimatorKind::scaled(0.5));
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn errors_name_the_line() {
        let mut c = RunConfig::default();
        let e = c.apply_text("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("line 2") && m.contains("bogus")));
        assert!(c.apply_text("batch_size = 0").is_err());
        assert!(c.apply_text("seed = -1").is_err());
        assert!(c.apply_text("estimator = magic").is_err());
        assert!(c.apply_text("no equals sign").is_err());
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn schema_lists_every_key() {
        let text = RunConfig {
            dim: Some(1),
            k: Some(1),
            cv_schedule: Some(CvSchedule { start: 0.0, end: 1.0, steps: 1 }),
            optimizer: Some(Optimizer::Sgd),
            lr: Some(0.1),
            params: Some("p.json".into()),
            experiment: "x".into(),
            ..RunConfig::default()
        }
        .to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let schema: Vec<&str> = SCHEMA.iter().map(|(k, _)| *k).collect();
        assert_eq!(keys, schema);
    }
}
