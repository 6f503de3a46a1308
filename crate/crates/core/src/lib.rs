//! Calibration of drifting low-cost sensor networks from pairwise colocations.
//!
//! Each non-reference sensor carries a vector of calibration parameters that
//! drift over time under independent Gaussian-process priors. Colocation
//! events tie pairs of sensors together through a likelihood that integrates
//! out the shared (unknown) true value; a sparse variational approximation
//! with inducing points is fitted by stochastic optimisation of the ELBO.
//!
//! Modules:
//! - [`kernels`]: covariance functions over `(time, sensor, parameter)` points
//! - [`gp`]: variational state, conditional prediction, KL and sampling
//! - [`inference`]: the whitened sparse-variational training engine
//! - [`pair`]: continuous calibration-pair likelihood, training and prediction
//! - [`categorical`]: confusion-matrix calibration of crowd labels
//! - [`multihop`]: windowed rendezvous-graph baseline
//! - [`synth`]: seeded synthetic scenarios with ground truth
//! - [`metrics`]: NMSE, MAE, NLPD and accuracy
//! - [`io`]: CSV formats, run configuration and ingestion filters

pub mod categorical;
pub mod error;
pub mod gp;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod multihop;
pub mod optim;
pub mod pair;
pub mod rng;
pub mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{CalibError, Result};

/// Identifier of a sensor (or, for label data, of a labeler).
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SensorId(pub u32);

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u32> for SensorId {
    fn from(v: u32) -> Self {
        SensorId(v)
    }
}
