//! Continuous calibration-pair model.
//!
//! Two colocated readings `y1, y2` are mapped through the calibration
//! function `phi(y, f)` of their sensors. Both calibrated values are normal
//! around a shared latent truth `h ~ N(0, gamma2)` with noise `sigma2`; once
//! `h` is integrated out the calibrated pair is bivariate normal with
//! covariance `[[sigma2 + gamma2, gamma2], [gamma2, sigma2 + gamma2]]`. The
//! density of the raw readings picks up the log-Jacobian `log |dphi/dy|` of
//! each non-reference side. Reference sensors use the identity.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::gp::{make_inducing_grid, VariationalState};
use crate::inference::{fit, BatchPlan, Engine, FitOptions, InducingLayout, PairLikelihood};
use crate::kernels::{IndexPoint, KernelAssignment, SensorKind};
use crate::linalg::robust_cholesky;
use crate::rng;
use crate::{CalibError, Result, SensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorType {
    Static,
    Mobile,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorInfo {
    pub id: SensorId,
    #[serde(rename = "type")]
    pub sensor_type: SensorType,
    pub is_reference: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SensorTable {
    sensors: BTreeMap<SensorId, SensorInfo>,
}

impl SensorTable {
    pub fn new(list: impl IntoIterator<Item = SensorInfo>) -> Result<Self> {
        let mut sensors = BTreeMap::new();
        for s in list {
            if sensors.insert(s.id, s).is_some() {
                return Err(CalibError::InvalidInput(format!("duplicate sensor id {}", s.id)));
            }
        }
        Ok(SensorTable { sensors })
    }

    pub fn get(&self, id: SensorId) -> Result<&SensorInfo> {
        self.sensors.get(&id).ok_or(CalibError::UnknownSensor(id))
    }

    pub fn is_reference(&self, id: SensorId) -> Result<bool> {
        Ok(self.get(id)?.is_reference)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SensorInfo> {
        self.sensors.values()
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn has_reference(&self) -> bool {
        self.sensors.values().any(|s| s.is_reference)
    }

    pub fn kind(&self, id: SensorId) -> Result<SensorKind> {
        let s = self.get(id)?;
        Ok(if s.is_reference {
            SensorKind::Reference
        } else {
            match s.sensor_type {
                SensorType::Static => SensorKind::Static,
                SensorType::Mobile => SensorKind::Mobile,
            }
        })
    }

    /// Non-reference sensors, ascending id.
    pub fn calibrated_ids(&self) -> Vec<SensorId> {
        self.sensors.values().filter(|s| !s.is_reference).map(|s| s.id).collect()
    }

    pub fn reference_ids(&self) -> Vec<SensorId> {
        self.sensors.values().filter(|s| s.is_reference).map(|s| s.id).collect()
    }

    /// Copies `rules` and registers the kind of every sensor in the table.
    pub fn bind(&self, rules: &KernelAssignment) -> KernelAssignment {
        let mut a = rules.clone();
        for s in self.sensors.values() {
            a.set_sensor_kind(s.id, self.kind(s.id).expect("sensor present"));
        }
        a
    }
}

/// One pairwise colocation event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColocationRecord {
    pub t1: f64,
    pub t2: f64,
    #[serde(rename = "sensor1")]
    pub s1: SensorId,
    #[serde(rename = "sensor2")]
    pub s2: SensorId,
    pub y1: f64,
    pub y2: f64,
}

impl ColocationRecord {
    pub fn new(t: f64, s1: SensorId, s2: SensorId, y1: f64, y2: f64) -> Self {
        ColocationRecord { t1: t, t2: t, s1, s2, y1, y2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s1 == self.s2 {
            return Err(CalibError::InvalidInput(format!("colocation of sensor {} with itself", self.s1)));
        }
        if !(self.y1.is_finite() && self.y2.is_finite() && self.t1.is_finite() && self.t2.is_finite()) {
            return Err(CalibError::InvalidInput("non-finite colocation value".into()));
        }
        Ok(())
    }

    fn key(&self) -> u64 {
        rng::mix(
            self.t1.to_bits(),
            &[self.t2.to_bits(), self.s1.0 as u64, self.s2.0 as u64, self.y1.to_bits(), self.y2.to_bits()],
        )
    }
}

/// Parametric map from a raw reading to a calibrated value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationFunction {
    /// `f * y`
    Scale,
    /// `exp(f) * y`; `f = 0` is a gain of one.
    LogScale,
    /// `f1 * y + f2`
    Linear,
}

impl CalibrationFunction {
    pub fn n_params(&self) -> usize {
        match self {
            CalibrationFunction::Scale | CalibrationFunction::LogScale => 1,
            CalibrationFunction::Linear => 2,
        }
    }

    /// Calibrated value and `log |dphi/dy|`.
    pub fn apply(&self, y: f64, f: &[f64]) -> Result<(f64, f64)> {
        match self {
            CalibrationFunction::Scale => {
                if f[0] == 0.0 {
                    return Err(CalibError::DegenerateCalibration);
                }
                Ok((f[0] * y, f[0].abs().ln()))
            }
            CalibrationFunction::LogScale => Ok((f[0].exp() * y, f[0])),
            CalibrationFunction::Linear => {
                if f[0] == 0.0 {
                    return Err(CalibError::DegenerateCalibration);
                }
                Ok((f[0] * y + f[1], f[0].abs().ln()))
            }
        }
    }

    /// As [`apply`](Self::apply), also filling `d value / d f` and
    /// `d log|dphi/dy| / d f`.
    fn apply_grad(&self, y: f64, f: &[f64], dv: &mut [f64], dj: &mut [f64]) -> Result<(f64, f64)> {
        let out = self.apply(y, f)?;
        match self {
            CalibrationFunction::Scale => {
                dv[0] = y;
                dj[0] = 1.0 / f[0];
            }
            CalibrationFunction::LogScale => {
                dv[0] = out.0;
                dj[0] = 1.0;
            }
            CalibrationFunction::Linear => {
                dv[0] = y;
                dv[1] = 1.0;
                dj[0] = 1.0 / f[0];
                dj[1] = 0.0;
            }
        }
        Ok(out)
    }
}

/// Calibrated value and log-derivative, with the identity for references.
pub fn calibrated_value(
    phi: CalibrationFunction,
    y: f64,
    f: &[f64],
    is_reference: bool,
) -> Result<(f64, f64)> {
    if is_reference {
        return Ok((y, 0.0));
    }
    if f.len() != phi.n_params() || f.iter().any(|v| !v.is_finite()) {
        return Err(CalibError::InvalidInput(format!(
            "calibration function needs {} finite parameters",
            phi.n_params()
        )));
    }
    phi.apply(y, f)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodConfig {
    /// Noise variance of each calibrated reading around the latent truth.
    pub sigma2: f64,
    /// Prior variance of the latent truth.
    pub gamma2: f64,
}

impl LikelihoodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !(self.gamma2 > 0.0) {
            return Err(CalibError::Config("likelihood sigma2 and gamma2 must be > 0".into()));
        }
        Ok(())
    }

    /// `100 x` the variance of every raw reading in `data`.
    pub fn default_gamma2(data: &[ColocationRecord]) -> f64 {
        let ys: Vec<f64> = data.iter().flat_map(|r| [r.y1, r.y2]).collect();
        if ys.len() < 2 {
            return 100.0;
        }
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
        100.0 * var.max(1e-12)
    }

    /// Mean squared raw reading in `data`: the prior variance that matches
    /// the spread of the readings about zero. The much wider default leaves
    /// the Jacobian terms free to inflate every low-cost gain in networks
    /// dominated by low-cost pairs.
    pub fn moment_gamma2(data: &[ColocationRecord]) -> f64 {
        if data.is_empty() {
            return 100.0;
        }
        let s: f64 = data.iter().map(|r| r.y1 * r.y1 + r.y2 * r.y2).sum();
        (s / (2 * data.len()) as f64).max(1e-12)
    }

    /// `log N2([a, b]; 0, Sigma)` and its partial derivatives.
    fn log_density(&self, a: f64, b: f64) -> (f64, f64, f64) {
        let (s2, g2) = (self.sigma2, self.gamma2);
        let det = s2 * (s2 + 2.0 * g2);
        let diag = s2 + g2;
        let q = (diag * (a * a + b * b) - 2.0 * g2 * (a * b)) / det;
        let lp = -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * q;
        let da = -(diag * a - g2 * b) / det;
        let db = -(diag * b - g2 * a) / det;
        (lp, da, db)
    }
}

/// `log p(y1, y2 | f1, f2)` for one record.
pub fn pair_loglik(
    rec: &ColocationRecord,
    f1: &[f64],
    f2: &[f64],
    phi: CalibrationFunction,
    sensors: &SensorTable,
    cfg: &LikelihoodConfig,
) -> Result<f64> {
    cfg.validate()?;
    let (a, ja) = calibrated_value(phi, rec.y1, f1, sensors.is_reference(rec.s1)?)?;
    let (b, jb) = calibrated_value(phi, rec.y2, f2, sensors.is_reference(rec.s2)?)?;
    Ok(cfg.log_density(a, b).0 + (ja + jb))
}

/// The continuous likelihood plugged into the variational engine.
pub struct PairModel<'a> {
    pub phi: CalibrationFunction,
    pub cfg: LikelihoodConfig,
    pub sensors: &'a SensorTable,
}

impl PairModel<'_> {
    fn side_is_latent(&self, s: SensorId) -> bool {
        !self.sensors.is_reference(s).unwrap_or(true)
    }
}

impl PairLikelihood for PairModel<'_> {
    type Record = ColocationRecord;

    fn latents(&self, rec: &ColocationRecord) -> Vec<IndexPoint> {
        let c = self.phi.n_params();
        let mut out = Vec::with_capacity(2 * c);
        for (t, s) in [(rec.t1, rec.s1), (rec.t2, rec.s2)] {
            if self.side_is_latent(s) {
                out.extend((0..c).map(|p| IndexPoint::new(t, s, p)));
            }
        }
        out
    }

    fn log_lik(&self, rec: &ColocationRecord, f: &[f64], grad: &mut [f64]) -> f64 {
        let c = self.phi.n_params();
        let mut offset = 0;
        let mut vals = [0.0; 2];
        let mut logj = 0.0;
        // (offset into f, d value / d f, d logj / d f) for each latent side
        let mut sides: [Option<(usize, [f64; 2], [f64; 2])>; 2] = [None, None];
        for (k, (y, s)) in [(rec.y1, rec.s1), (rec.y2, rec.s2)].into_iter().enumerate() {
            if self.side_is_latent(s) {
                let mut dv = [0.0; 2];
                let mut dj = [0.0; 2];
                match self.phi.apply_grad(y, &f[offset..offset + c], &mut dv[..c], &mut dj[..c]) {
                    Ok((v, j)) => {
                        vals[k] = v;
                        logj += j;
                    }
                    Err(_) => return f64::NEG_INFINITY,
                }
                sides[k] = Some((offset, dv, dj));
                offset += c;
            } else {
                vals[k] = y;
            }
        }
        let (lp, da, db) = self.cfg.log_density(vals[0], vals[1]);
        for (k, side) in sides.iter().enumerate() {
            if let Some((off, dv, dj)) = side {
                let dphi = if k == 0 { da } else { db };
                for p in 0..c {
                    grad[off + p] = dphi * dv[p] + dj[p];
                }
            }
        }
        lp + logj
    }

    fn record_key(&self, rec: &ColocationRecord) -> u64 {
        rec.key()
    }
}

/// Minibatch resampling distribution and the matching per-record weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceWeights {
    pub probs: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Oversamples records that touch a reference sensor by `oversample_factor`;
/// `weight_i = (1/N) / prob_i` keeps the weighted estimate unbiased.
pub fn make_importance_weights(
    data: &[ColocationRecord],
    sensors: &SensorTable,
    oversample_factor: f64,
) -> Result<ImportanceWeights> {
    if !(oversample_factor >= 1.0) {
        return Err(CalibError::Config("oversample factor must be >= 1".into()));
    }
    let n = data.len();
    let raw = data
        .iter()
        .map(|r| {
            let touches = sensors.is_reference(r.s1)? || sensors.is_reference(r.s2)?;
            Ok(if touches { oversample_factor } else { 1.0 })
        })
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|r| r / total).collect();
    let weights = probs.iter().map(|p| (1.0 / n as f64) / p).collect();
    Ok(ImportanceWeights { probs, weights })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    /// Monte Carlo samples per record per step.
    pub samples: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub final_learning_rate: Option<f64>,
    pub seed: u64,
    pub oversample_factor: f64,
    /// Inducing points per process over the data's time span.
    pub inducing_per_gp: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            samples: 5,
            batch_size: 256,
            steps: 2000,
            learning_rate: 0.01,
            final_learning_rate: None,
            seed: 0,
            oversample_factor: 1.0,
            inducing_per_gp: 20,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CalibError::Config(m.to_string()));
        if self.samples < 1 {
            return bad("samples must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if let Some(lr) = self.final_learning_rate {
            if !(lr > 0.0) {
                return bad("final_learning_rate must be > 0");
            }
        }
        if !(self.oversample_factor >= 1.0) {
            return bad("oversample_factor must be >= 1");
        }
        if self.inducing_per_gp < 2 {
            return bad("inducing_per_gp must be >= 2");
        }
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            samples: self.samples,
            steps: self.steps,
            learning_rate: self.learning_rate,
            final_learning_rate: self.final_learning_rate,
            seed: self.seed,
        }
    }
}

/// Chooses full-batch optimisation when every record fits in one batch and
/// no oversampling is requested, resampled minibatches otherwise.
pub fn batch_plan(iw: ImportanceWeights, batch_size: usize, oversample_factor: f64) -> BatchPlan {
    let n = iw.probs.len();
    if batch_size >= n && oversample_factor == 1.0 {
        BatchPlan::Full { weights: vec![1.0; n] }
    } else {
        BatchPlan::Sampled { probs: iw.probs, weights: iw.weights, batch: batch_size }
    }
}

/// Time span covered by the records, widened when degenerate.
pub fn time_span<I: IntoIterator<Item = f64>>(times: I) -> Option<(f64, f64)> {
    let (lo, hi) = times
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
    if !lo.is_finite() {
        return None;
    }
    Some(if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) })
}

pub struct PairFit {
    pub state: VariationalState,
    pub trace: Vec<f64>,
}

fn validate_data(data: &[ColocationRecord], sensors: &SensorTable, phi: CalibrationFunction) -> Result<()> {
    for (i, r) in data.iter().enumerate() {
        r.validate().map_err(|e| CalibError::InvalidInput(format!("record {i}: {e}")))?;
        sensors.get(r.s1)?;
        sensors.get(r.s2)?;
        if phi == CalibrationFunction::LogScale && (r.y1 < 0.0 || r.y2 < 0.0) {
            return Err(CalibError::InvalidInput(format!(
                "record {i}: negative reading under log-scale calibration"
            )));
        }
    }
    Ok(())
}

/// Inducing grid over every non-reference sensor in the table.
pub fn inducing_points(
    sensors: &SensorTable,
    n_params: usize,
    span: (f64, f64),
    per_gp: usize,
) -> Result<Vec<IndexPoint>> {
    make_inducing_grid(&sensors.calibrated_ids(), n_params, span.0, span.1, per_gp)
}

/// Fits `q(u)` to the colocation data by stochastic ELBO maximisation.
pub fn train(
    data: &[ColocationRecord],
    sensors: &SensorTable,
    phi: CalibrationFunction,
    rules: &KernelAssignment,
    cfg: &LikelihoodConfig,
    opts: &TrainOptions,
) -> Result<PairFit> {
    if data.is_empty() {
        return Err(CalibError::InvalidInput("no colocation records".into()));
    }
    cfg.validate()?;
    opts.validate()?;
    validate_data(data, sensors, phi)?;
    let assign = sensors.bind(rules);
    assign.validate()?;
    let span = time_span(data.iter().flat_map(|r| [r.t1, r.t2])).expect("nonempty data");
    let z = inducing_points(sensors, phi.n_params(), span, opts.inducing_per_gp)?;
    let layout = InducingLayout::new(&z, &assign)?;
    let init = VariationalState::prior(z, &assign)?;
    let model = PairModel { phi, cfg: *cfg, sensors };
    let engine = Engine::new(&model, &layout, data)?;
    let iw = make_importance_weights(data, sensors, opts.oversample_factor)?;
    let plan = batch_plan(iw, opts.batch_size, opts.oversample_factor);
    let out = fit(&engine, &init, &plan, &opts.fit_options())?;
    Ok(PairFit { state: out.state, trace: out.trace })
}

/// Monte Carlo ELBO of `state` over the full data set with per-record
/// weights; draws are keyed by `seed` and each record's content.
#[allow(clippy::too_many_arguments)]
pub fn elbo(
    state: &VariationalState,
    data: &[ColocationRecord],
    phi: CalibrationFunction,
    sensors: &SensorTable,
    rules: &KernelAssignment,
    cfg: &LikelihoodConfig,
    n_samples: usize,
    weights: &[f64],
    seed: u64,
) -> Result<f64> {
    if n_samples < 1 {
        return Err(CalibError::InvalidInput("sample count must be >= 1".into()));
    }
    if weights.len() != data.len() || weights.iter().any(|w| !(*w > 0.0)) {
        return Err(CalibError::InvalidInput("one positive weight per record required".into()));
    }
    cfg.validate()?;
    let assign = sensors.bind(rules);
    let layout = InducingLayout::new(&state.z, &assign)?;
    let model = PairModel { phi, cfg: *cfg, sensors };
    let engine = Engine::new(&model, &layout, data)?;
    let theta = layout.whiten(state)?.pack();
    engine.evaluate(&theta, &engine.full_batch(weights), n_samples, seed, 0, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedSamples {
    pub raw: f64,
    pub samples: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl CalibratedSamples {
    /// Standard deviation of the true value: the spread of the calibrated
    /// samples plus the likelihood noise `sigma2`.
    pub fn predictive_std(&self, sigma2: f64) -> f64 {
        (self.std * self.std + sigma2).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationPrediction {
    pub sensor: SensorId,
    pub time: f64,
    /// Empty for reference sensors.
    pub param_mean: Vec<f64>,
    pub param_std: Vec<f64>,
    /// `samples[p][c]`
    pub param_samples: Vec<Vec<f64>>,
    pub calibrated: Option<CalibratedSamples>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query {
    pub sensor: SensorId,
    pub time: f64,
    pub raw: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Posterior calibration parameters at each query, plus calibrated samples
/// of the raw reading when one is supplied.
pub fn predict_calibration(
    state: &VariationalState,
    queries: &[Query],
    phi: CalibrationFunction,
    sensors: &SensorTable,
    rules: &KernelAssignment,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<CalibrationPrediction>> {
    let assign = sensors.bind(rules);
    let layout = InducingLayout::new(&state.z, &assign)?;
    let w = layout.whiten(state)?;
    let c = phi.n_params();
    let p = n_samples.max(1);
    queries
        .iter()
        .map(|q| {
            if sensors.is_reference(q.sensor)? {
                let calibrated = q.raw.map(|y| CalibratedSamples { raw: y, samples: vec![y; p], mean: y, std: 0.0 });
                return Ok(CalibrationPrediction {
                    sensor: q.sensor,
                    time: q.time,
                    param_mean: Vec::new(),
                    param_std: Vec::new(),
                    param_samples: Vec::new(),
                    calibrated,
                });
            }
            let pts: Vec<IndexPoint> = (0..c).map(|k| IndexPoint::new(q.time, q.sensor, k)).collect();
            let proj = layout.project(&pts)?;
            let (mu, s) = layout.moments(&proj, &w);
            let l = robust_cholesky(&s)?;
            let mut stream = rng::stream(seed, &[q.sensor.0 as u64, q.time.to_bits()]);
            let mut eps = vec![0.0; c];
            let mut param_samples = Vec::with_capacity(p);
            for _ in 0..p {
                rng::fill_standard_normal(&mut stream, &mut eps);
                let f = &mu + &l * DVector::from_column_slice(&eps);
                param_samples.push(f.as_slice().to_vec());
            }
            let calibrated = match q.raw {
                Some(y) => {
                    let samples = param_samples
                        .iter()
                        .map(|f| phi.apply(y, f).map(|v| v.0))
                        .collect::<Result<Vec<f64>>>()?;
                    let (mean, std) = mean_std(&samples);
                    Some(CalibratedSamples { raw: y, samples, mean, std })
                }
                None => None,
            };
            Ok(CalibrationPrediction {
                sensor: q.sensor,
                time: q.time,
                param_mean: mu.as_slice().to_vec(),
                param_std: (0..c).map(|k| s[(k, k)].max(0.0).sqrt()).collect(),
                param_samples,
                calibrated,
            })
        })
        .collect()
}
