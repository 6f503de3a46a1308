//! Covariance functions over `(time, sensor, parameter)` index points.
//!
//! Every `(sensor, parameter)` pair owns an independent Gaussian process over
//! time, so the covariance between points of different processes is exactly
//! zero and any covariance matrix is block diagonal once points are grouped
//! by process.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{CalibError, Result, SensorId};

/// One evaluation of one latent process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexPoint {
    /// Hours (or label-order position for label data).
    pub time: f64,
    pub sensor: SensorId,
    pub param: usize,
}

impl IndexPoint {
    pub fn new(time: f64, sensor: SensorId, param: usize) -> Self {
        IndexPoint { time, sensor, param }
    }

    /// Key of the Gaussian process this point belongs to.
    pub fn gp(&self) -> (SensorId, usize) {
        (self.sensor, self.param)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// Exponentiated quadratic, `variance * exp(-(ta - tb)^2 / (2 l^2))`.
    Eq { variance: f64, lengthscale: f64 },
    /// Constant covariance: the parameter does not vary over time.
    Bias { variance: f64 },
    /// Sum of an EQ and a Bias term.
    EqBias {
        variance: f64,
        lengthscale: f64,
        bias_variance: f64,
    },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CalibError::Config(m.to_string()));
        match *self {
            KernelSpec::Eq { variance, lengthscale } => {
                if !(variance >= 0.0) {
                    return bad("kernel variance must be >= 0");
                }
                if !(lengthscale > 0.0) || !lengthscale.is_finite() {
                    return bad("kernel lengthscale must be > 0");
                }
            }
            KernelSpec::Bias { variance } => {
                if !(variance >= 0.0) {
                    return bad("kernel variance must be >= 0");
                }
            }
            KernelSpec::EqBias { variance, lengthscale, bias_variance } => {
                if !(variance >= 0.0) || !(bias_variance >= 0.0) {
                    return bad("kernel variance must be >= 0");
                }
                if !(lengthscale > 0.0) || !lengthscale.is_finite() {
                    return bad("kernel lengthscale must be > 0");
                }
            }
        }
        Ok(())
    }

    /// Covariance between two times of the same process.
    pub fn cov(&self, ta: f64, tb: f64) -> f64 {
        match *self {
            KernelSpec::Eq { variance, lengthscale } => eq(variance, lengthscale, ta - tb),
            KernelSpec::Bias { variance } => variance,
            KernelSpec::EqBias { variance, lengthscale, bias_variance } => {
                eq(variance, lengthscale, ta - tb) + bias_variance
            }
        }
    }

    /// Prior variance at any single time.
    pub fn variance(&self) -> f64 {
        self.cov(0.0, 0.0)
    }
}

fn eq(variance: f64, lengthscale: f64, dt: f64) -> f64 {
    variance * (-(dt * dt) / (2.0 * lengthscale * lengthscale)).exp()
}

/// Kernel value between two index points under one spec; zero across
/// different processes.
pub fn eval_kernel(spec: &KernelSpec, a: &IndexPoint, b: &IndexPoint) -> f64 {
    if a.gp() != b.gp() {
        return 0.0;
    }
    spec.cov(a.time, b.time)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Static,
    Mobile,
    Reference,
}

/// Resolves the kernel of every `(sensor, parameter)` process.
///
/// Rules are keyed by sensor kind and optionally a parameter index; a rule
/// without a parameter applies to every parameter of that kind unless a
/// more specific rule exists.
#[derive(Clone, Debug, Default)]
pub struct KernelAssignment {
    rules: BTreeMap<(SensorKind, Option<usize>), KernelSpec>,
    kinds: BTreeMap<SensorId, SensorKind>,
}

impl KernelAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rule(mut self, kind: SensorKind, param: Option<usize>, spec: KernelSpec) -> Self {
        self.rules.insert((kind, param), spec);
        self
    }

    pub fn with_sensor(mut self, sensor: SensorId, kind: SensorKind) -> Self {
        self.kinds.insert(sensor, kind);
        self
    }

    pub fn set_sensor_kind(&mut self, sensor: SensorId, kind: SensorKind) {
        self.kinds.insert(sensor, kind);
    }

    pub fn add_rule(&mut self, kind: SensorKind, param: Option<usize>, spec: KernelSpec) {
        self.rules.insert((kind, param), spec);
    }

    pub fn validate(&self) -> Result<()> {
        self.rules.values().try_for_each(KernelSpec::validate)
    }

    pub fn sensor_kind(&self, sensor: SensorId) -> Option<SensorKind> {
        self.kinds.get(&sensor).copied()
    }

    pub fn resolve(&self, sensor: SensorId, param: usize) -> Result<KernelSpec> {
        let kind = self.kinds.get(&sensor).ok_or_else(|| {
            CalibError::Config(format!("sensor {sensor} has no kernel kind assigned"))
        })?;
        self.rules
            .get(&(*kind, Some(param)))
            .or_else(|| self.rules.get(&(*kind, None)))
            .copied()
            .ok_or_else(|| {
                CalibError::Config(format!(
                    "no kernel for sensor {sensor} ({kind:?}) parameter {param}"
                ))
            })
    }
}

/// Covariance matrix between two point lists.
pub fn build_cov(
    assign: &KernelAssignment,
    rows: &[IndexPoint],
    cols: &[IndexPoint],
) -> Result<DMatrix<f64>> {
    let mut specs: BTreeMap<(SensorId, usize), KernelSpec> = BTreeMap::new();
    for p in rows.iter().chain(cols) {
        if let std::collections::btree_map::Entry::Vacant(e) = specs.entry(p.gp()) {
            e.insert(assign.resolve(p.sensor, p.param)?);
        }
    }
    Ok(DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        let (a, b) = (&rows[i], &cols[j]);
        if a.gp() != b.gp() {
            0.0
        } else {
            specs[&a.gp()].cov(a.time, b.time)
        }
    }))
}
