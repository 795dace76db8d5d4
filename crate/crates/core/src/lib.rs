//! Reparameterized gradient estimators for the evidence lower bound, built on
//! a small reverse-mode autodiff tape.
//!
//! The crate contrasts the usual total-derivative estimator with the
//! path-derivative estimator, which drops the score-function term by
//! evaluating the variational density at detached parameters. Both are
//! available for single Gaussians, Gaussian mixtures and the
//! importance-weighted bound, together with the models, optimizer and
//! experiment drivers used to compare them.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod trace;

pub use autodiff::{finite_difference, GradMap, NodeId, Tape};
pub use distributions::{DiagGaussian, GaussianNodes, MixtureNodes, MixtureParams, NoiseDraw};
pub use error::{Error, Result};
pub use estimators::{Bound, CvScale, EstimatorKind, GradEstimate, Model, Surrogate};
pub use tensor::Tensor;
pub use models::{TrainSettings, Trainer, VaeConfig, VaeParams};
pub use optim::{AdamConfig, AdamState};
pub use trace::{emit_trace, TraceFormat, TraceRecord};
pub use config::RunConfig;
