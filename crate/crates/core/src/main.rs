use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use pathgrad::config::{RunConfig, SCHEMA};
use pathgrad::estimators::Bound;
use pathgrad::experiments;
use pathgrad::Result;

#[derive(Parser)]
#[command(name = "pathgrad", version, about = "Total- versus path-derivative ELBO gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// td | pd | score | cv:<c>
    #[arg(long, global = true)]
    estimator: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Mixture components or importance samples.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Any other configuration key, as `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a diagonal Gaussian to a Gaussian target.
    FitGauss,
    /// Gradient variance along a path to a mixture posterior.
    MixtureProbe,
    /// Train a VAE with one estimator.
    TrainVae,
    /// Train an importance-weighted autoencoder with one estimator.
    TrainIwae,
    /// Train two estimator arms from identical seeds and compare test NLL.
    Paired,
    /// Test NLL of a saved parameter file.
    NllEval,
    /// Mean total- versus path-derivative importance-weighted gradients.
    IwaeReport,
    /// List the configuration keys.
    Schema,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::FitGauss => "fit-gauss",
            Command::MixtureProbe => "mixture-probe",
            Command::TrainVae => "train-vae",
            Command::TrainIwae => "train-iwae",
            Command::Paired => "paired",
            Command::NllEval => "nll-eval",
            Command::IwaeReport => "iwae-report",
            Command::Schema => "schema",
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.experiment = cli.command.name().to_string();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| pathgrad::Error::config(format!("--set expects key=value, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = &cli.estimator {
        cfg.set("estimator", e)?;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(k) = cli.k {
        cfg.set("k", &k.to_string())?;
    }
    Ok(cfg)
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| pathgrad::Error::numeric(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Schema = cli.command {
        for (k, d) in SCHEMA {
            println!("{k:<18} {d}");
        }
        return Ok(());
    }
    let cfg = build_config(cli)?;
    match cli.command {
        Command::FitGauss => print(&experiments::run_fit_gauss(&cfg)?),
        Command::MixtureProbe => print(&experiments::run_mixture_probe(&cfg)?),
        Command::TrainVae => print(&experiments::run_training(&cfg, Bound::Elbo)?),
        Command::TrainIwae => print(&experiments::run_training(&cfg, Bound::Iwae)?),
        Command::Paired => print(&experiments::run_paired_training(&cfg)?),
        Command::NllEval => print(&experiments::run_nll_eval(&cfg)?),
        Command::IwaeReport => print(&experiments::run_iwae_report(&cfg)?),
        Command::Schema => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
