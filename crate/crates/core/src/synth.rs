//! Seeded synthetic data sets with ground truth.
//!
//! The pollution network: a diurnal true pollution signal, static sensors on
//! a unit square, and mobile sensors that visit static sites with probability
//! proportional to the inverse distance from their home. Every sensor reports
//! `scaling(t) * pollution(t) + noise`; references report the pollution
//! exactly. The labelling set: three non-expert labelers whose confusion
//! matrices drift over item order, plus an expert on the training items.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::categorical::Label;
use crate::pair::{ColocationRecord, SensorInfo, SensorTable, SensorType};
use crate::rng;
use crate::{CalibError, Result, SensorId};

// Stream tags, one per independent source of randomness.
const TAG_PERIODS: u64 = 1;
const TAG_POSITIONS: u64 = 2;
const TAG_VISITS: u64 = 3;
const TAG_NOISE: u64 = 4;
const TAG_TESTS: u64 = 5;
const TAG_SPECIES: u64 = 6;
const TAG_SPLIT: u64 = 7;
const TAG_LABELS: u64 = 8;

/// True multiplicative scaling of a sensor over time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalingCurve {
    Constant { value: f64 },
    Sinusoid { amplitude: f64, period: f64, phase: f64 },
    /// Linear from `start` at `t0` to `end` at `t1`, held constant outside.
    Linear { start: f64, end: f64, t0: f64, t1: f64 },
}

impl ScalingCurve {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            ScalingCurve::Constant { value } => value,
            ScalingCurve::Sinusoid { amplitude, period, phase } => 1.0 + amplitude * (2.0 * PI * t / period + phase).sin(),
            ScalingCurve::Linear { start, end, t0, t1 } => {
                let u = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
                start + (end - start) * u
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PollutionSignal {
    pub base: f64,
    pub amplitude: f64,
    pub period: f64,
}

impl Default for PollutionSignal {
    fn default() -> Self {
        PollutionSignal { base: 50.0, amplitude: 30.0, period: 24.0 }
    }
}

impl PollutionSignal {
    pub fn eval(&self, t: f64) -> f64 {
        self.base + self.amplitude * (2.0 * PI * t / self.period).sin()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSensor {
    pub id: SensorId,
    pub sensor_type: SensorType,
    pub is_reference: bool,
    pub scaling: ScalingCurve,
    pub noise_sd: f64,
    /// Site of a static sensor, home of a mobile one.
    pub position: (f64, f64),
}

/// A fully specified network to simulate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub sensors: Vec<SimSensor>,
    pub pollution: PollutionSignal,
    pub horizon: f64,
    /// Hours between candidate mobile visits.
    pub tick: f64,
    pub visit_prob: f64,
    pub samples_per_visit: usize,
    /// Hours between readings within one visit.
    pub sample_spacing: f64,
    /// One test reading per non-reference sensor per interval, at a random
    /// offset inside it.
    pub test_interval: f64,
    /// Static pairs colocated at every tick.
    pub co_sited: Vec<(SensorId, SensorId)>,
}

/// A held-out reading with its ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestPoint {
    pub sensor: SensorId,
    pub time: f64,
    pub raw: f64,
    pub true_value: f64,
    pub true_scaling: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PollutionData {
    pub sensors: SensorTable,
    pub colocations: Vec<ColocationRecord>,
    pub tests: Vec<TestPoint>,
    pub scalings: BTreeMap<SensorId, ScalingCurve>,
}

impl Network {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CalibError::Config(m.to_string()));
        if !(self.horizon > 0.0 && self.tick > 0.0 && self.test_interval > 0.0 && self.sample_spacing >= 0.0) {
            return bad("horizon, tick and test_interval must be > 0");
        }
        if !(0.0..=1.0).contains(&self.visit_prob) {
            return bad("visit_prob must lie in [0, 1]");
        }
        if self.samples_per_visit == 0 {
            return bad("samples_per_visit must be >= 1");
        }
        if self.sensors.iter().any(|s| !(s.noise_sd >= 0.0)) {
            return bad("noise_sd must be >= 0");
        }
        Ok(())
    }

    fn reading(&self, s: &SimSensor, t: f64, noise: &mut impl Rng) -> f64 {
        let p = self.pollution.eval(t);
        if s.is_reference {
            return p;
        }
        let eps: f64 = noise.sample(StandardNormal);
        s.scaling.eval(t) * p + s.noise_sd * eps
    }

    pub fn simulate(&self, seed: u64) -> Result<PollutionData> {
        self.validate()?;
        let table = SensorTable::new(self.sensors.iter().map(|s| SensorInfo {
            id: s.id,
            sensor_type: s.sensor_type,
            is_reference: s.is_reference,
        }))?;
        let statics: Vec<&SimSensor> = self.sensors.iter().filter(|s| s.sensor_type == SensorType::Static).collect();
        let mobiles: Vec<&SimSensor> = self.sensors.iter().filter(|s| s.sensor_type == SensorType::Mobile).collect();
        let by_id: BTreeMap<SensorId, &SimSensor> = self.sensors.iter().map(|s| (s.id, s)).collect();
        let targets = mobiles
            .iter()
            .map(|m| {
                let w: Vec<f64> = statics
                    .iter()
                    .map(|s| {
                        let d = (m.position.0 - s.position.0).hypot(m.position.1 - s.position.1);
                        1.0 / d.max(1e-6)
                    })
                    .collect();
                WeightedIndex::new(&w).map_err(|e| CalibError::Config(format!("visit weights: {e}")))
            })
            .collect::<Result<Vec<_>>>();
        let targets = if statics.is_empty() { Vec::new() } else { targets? };

        let mut visits = rng::stream(seed, &[TAG_VISITS]);
        let mut noise = rng::stream(seed, &[TAG_NOISE]);
        let mut colocations = Vec::new();
        let mut emit = |a: &SimSensor, b: &SimSensor, t0: f64, noise: &mut rand_chacha::ChaCha8Rng| {
            for k in 0..self.samples_per_visit {
                let t = t0 + k as f64 * self.sample_spacing;
                let ya = self.reading(a, t, noise);
                let yb = self.reading(b, t, noise);
                colocations.push(ColocationRecord::new(t, a.id, b.id, ya, yb));
            }
        };
        let n_ticks = (self.horizon / self.tick).floor() as usize;
        for tick in 0..n_ticks {
            let t0 = tick as f64 * self.tick;
            for &(a, b) in &self.co_sited {
                let sa = by_id.get(&a).ok_or(CalibError::UnknownSensor(a))?;
                let sb = by_id.get(&b).ok_or(CalibError::UnknownSensor(b))?;
                emit(sa, sb, t0, &mut noise);
            }
            for (m, dist) in mobiles.iter().zip(&targets) {
                if visits.random::<f64>() >= self.visit_prob {
                    continue;
                }
                let s = statics[dist.sample(&mut visits)];
                let start = t0 + visits.random::<f64>() * self.tick * 0.5;
                emit(m, s, start, &mut noise);
            }
        }

        let mut test_rng = rng::stream(seed, &[TAG_TESTS]);
        let n_tests = (self.horizon / self.test_interval).floor() as usize;
        let mut tests = Vec::new();
        for s in self.sensors.iter().filter(|s| !s.is_reference) {
            for k in 0..n_tests {
                let t = (k as f64 + test_rng.random::<f64>()) * self.test_interval;
                let raw = self.reading(s, t, &mut test_rng);
                tests.push(TestPoint {
                    sensor: s.id,
                    time: t,
                    raw,
                    true_value: self.pollution.eval(t),
                    true_scaling: s.scaling.eval(t),
                });
            }
        }
        let scalings = self.sensors.iter().map(|s| (s.id, s.scaling)).collect();
        Ok(PollutionData { sensors: table, colocations, tests, scalings })
    }
}

/// The standard synthetic network: sinusoidal drift with log-normally
/// distributed periods, references among the static sensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PollutionScenario {
    pub n_static: usize,
    pub n_reference: usize,
    pub n_mobile: usize,
    pub horizon: f64,
    pub noise_scale: f64,
    pub scaling_amplitude: f64,
    pub static_period_median: f64,
    pub mobile_period_median: f64,
    /// Standard deviation of the log period.
    pub period_log_sd: f64,
    pub tick: f64,
    pub visit_prob: f64,
    pub samples_per_visit: usize,
    pub sample_spacing: f64,
    pub test_interval: f64,
    pub pollution: PollutionSignal,
    /// Index pairs into the static sensors.
    pub co_sited: Vec<(u32, u32)>,
}

impl Default for PollutionScenario {
    fn default() -> Self {
        PollutionScenario {
            n_static: 10,
            n_reference: 4,
            n_mobile: 4,
            horizon: 4320.0,
            noise_scale: 10.0,
            scaling_amplitude: 0.5,
            static_period_median: 3070.0,
            mobile_period_median: 1007.0,
            period_log_sd: 0.5,
            tick: 6.0,
            visit_prob: 0.5,
            samples_per_visit: 6,
            sample_spacing: 1.0 / 6.0,
            test_interval: 24.0,
            pollution: PollutionSignal::default(),
            co_sited: Vec::new(),
        }
    }
}

impl PollutionScenario {
    pub fn validate(&self) -> Result<()> {
        if self.n_reference > self.n_static {
            return Err(CalibError::Config("n_reference must not exceed n_static".into()));
        }
        if !(self.noise_scale >= 0.0) || !(self.period_log_sd >= 0.0) {
            return Err(CalibError::Config("noise_scale and period_log_sd must be >= 0".into()));
        }
        if !(self.static_period_median > 0.0 && self.mobile_period_median > 0.0) {
            return Err(CalibError::Config("period medians must be > 0".into()));
        }
        Ok(())
    }

    /// Static sensors take ids `0..n_static` (references first), mobiles follow.
    pub fn network(&self, seed: u64) -> Result<Network> {
        self.validate()?;
        let mut periods = rng::stream(seed, &[TAG_PERIODS]);
        let mut positions = rng::stream(seed, &[TAG_POSITIONS]);
        let mut sensors = Vec::new();
        for i in 0..self.n_static + self.n_mobile {
            let mobile = i >= self.n_static;
            let is_reference = i < self.n_reference;
            let median = if mobile { self.mobile_period_median } else { self.static_period_median };
            let z: f64 = periods.sample(StandardNormal);
            let period = median * (self.period_log_sd * z).exp();
            let phase = periods.random::<f64>() * 2.0 * PI;
            let position = (positions.random::<f64>(), positions.random::<f64>());
            sensors.push(SimSensor {
                id: SensorId(i as u32),
                sensor_type: if mobile { SensorType::Mobile } else { SensorType::Static },
                is_reference,
                scaling: if is_reference {
                    ScalingCurve::Constant { value: 1.0 }
                } else {
                    ScalingCurve::Sinusoid { amplitude: self.scaling_amplitude, period, phase }
                },
                noise_sd: if is_reference { 0.0 } else { self.noise_scale },
                position,
            });
        }
        let co_sited = self
            .co_sited
            .iter()
            .map(|&(a, b)| {
                if a as usize >= self.n_static || b as usize >= self.n_static || a == b {
                    return Err(CalibError::Config(format!("co-sited pair ({a}, {b}) is not two static sensors")));
                }
                Ok((SensorId(a), SensorId(b)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            sensors,
            pollution: self.pollution,
            horizon: self.horizon,
            tick: self.tick,
            visit_prob: self.visit_prob,
            samples_per_visit: self.samples_per_visit,
            sample_spacing: self.sample_spacing,
            test_interval: self.test_interval,
            co_sited,
        })
    }
}

pub fn gen_pollution(scenario: &PollutionScenario, seed: u64) -> Result<PollutionData> {
    scenario.network(seed)?.simulate(seed)
}

/// One reference followed by a chain of co-sited low-cost sensors with
/// constant scalings: reference - 1 - 2 - ... No noise, no mobiles.
pub fn chain_network(scalings: &[f64], horizon: f64) -> Network {
    let mut sensors = vec![SimSensor {
        id: SensorId(0),
        sensor_type: SensorType::Static,
        is_reference: true,
        scaling: ScalingCurve::Constant { value: 1.0 },
        noise_sd: 0.0,
        position: (0.0, 0.0),
    }];
    for (i, &s) in scalings.iter().enumerate() {
        sensors.push(SimSensor {
            id: SensorId(i as u32 + 1),
            sensor_type: SensorType::Static,
            is_reference: false,
            scaling: ScalingCurve::Constant { value: s },
            noise_sd: 0.0,
            position: (i as f64 + 1.0, 0.0),
        });
    }
    Network {
        co_sited: (0..scalings.len() as u32).map(|i| (SensorId(i), SensorId(i + 1))).collect(),
        sensors,
        pollution: PollutionSignal { base: 50.0, amplitude: 30.0, period: 24.0 },
        horizon,
        tick: 6.0,
        visit_prob: 0.0,
        samples_per_visit: 6,
        sample_spacing: 1.0 / 6.0,
        test_interval: 24.0,
    }
}

/// Id of the drifting high-quality instrument in [`drift_network`].
pub const DRIFT_TEST_SENSOR: SensorId = SensorId(1);

/// A small network where a well-behaved instrument (id 1), treated as
/// low-cost, drifts linearly from gain 1.0 to 1.83 over `horizon` hours. One
/// reference (id 0), three low-cost static sites and four mobiles.
pub fn drift_network(seed: u64, horizon: f64, noise_scale: f64) -> Network {
    let mut periods = rng::stream(seed, &[TAG_PERIODS]);
    let mut positions = rng::stream(seed, &[TAG_POSITIONS]);
    let mut sensors = vec![
        SimSensor {
            id: SensorId(0),
            sensor_type: SensorType::Static,
            is_reference: true,
            scaling: ScalingCurve::Constant { value: 1.0 },
            noise_sd: 0.0,
            position: (positions.random(), positions.random()),
        },
        SimSensor {
            id: DRIFT_TEST_SENSOR,
            sensor_type: SensorType::Static,
            is_reference: false,
            scaling: ScalingCurve::Linear { start: 1.0, end: 1.83, t0: 0.0, t1: horizon },
            noise_sd: 1.0,
            position: (positions.random(), positions.random()),
        },
    ];
    for i in 2..9u32 {
        let mobile = i >= 5;
        let median = if mobile { 1007.0 } else { 3070.0 };
        let z: f64 = periods.sample(StandardNormal);
        sensors.push(SimSensor {
            id: SensorId(i),
            sensor_type: if mobile { SensorType::Mobile } else { SensorType::Static },
            is_reference: false,
            scaling: ScalingCurve::Sinusoid {
                amplitude: 0.3,
                period: median * (0.5 * z).exp(),
                phase: periods.random::<f64>() * 2.0 * PI,
            },
            noise_sd: noise_scale,
            position: (positions.random(), positions.random()),
        });
    }
    Network {
        sensors,
        pollution: PollutionSignal::default(),
        horizon,
        tick: 6.0,
        visit_prob: 0.5,
        samples_per_visit: 6,
        sample_spacing: 1.0 / 6.0,
        test_interval: 24.0,
        co_sited: Vec::new(),
    }
}

/// A labeler's confusion matrix as a function of relative item position
/// `u` in `[0, 1]`; row-major, row = reported class, columns sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelerProfile {
    /// Perfect until `u = 0.5`, then linearly degrading to chance at `u = 1`.
    PerfectThenChance,
    /// Chance at `u = 0`, linearly improving to perfect at `u = 0.5`.
    ChanceThenPerfect,
    /// Piecewise-linear interpolation between matrices at `u = 0, 0.5, 1`.
    Keyframes { start: Vec<f64>, middle: Vec<f64>, end: Vec<f64> },
}

impl LabelerProfile {
    pub fn confusion(&self, u: f64, a: usize) -> Vec<f64> {
        let blend = |lambda: f64| -> Vec<f64> {
            (0..a * a)
                .map(|k| {
                    let eye = if k / a == k % a { 1.0 } else { 0.0 };
                    (1.0 - lambda) * eye + lambda / a as f64
                })
                .collect()
        };
        match self {
            LabelerProfile::PerfectThenChance => blend(((u - 0.5) / 0.5).clamp(0.0, 1.0)),
            LabelerProfile::ChanceThenPerfect => blend((1.0 - u / 0.5).clamp(0.0, 1.0)),
            LabelerProfile::Keyframes { start, middle, end } => {
                let (x, y, w) = if u <= 0.5 { (start, middle, u / 0.5) } else { (middle, end, (u - 0.5) / 0.5) };
                x.iter().zip(y).map(|(p, q)| (1.0 - w) * p + w * q).collect()
            }
        }
    }

    /// The third non-expert: `{0,1}` vs `2`, then `{0,2}` vs `1`, then
    /// near chance.
    pub fn structured_drift() -> Self {
        LabelerProfile::Keyframes {
            start: vec![0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0],
            middle: vec![0.5, 0.0, 0.5, 0.0, 1.0, 0.0, 0.5, 0.0, 0.5],
            end: vec![0.4, 0.3, 0.3, 0.3, 0.4, 0.3, 0.3, 0.3, 0.4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimLabeler {
    pub id: SensorId,
    pub n_labels: usize,
    pub profile: LabelerProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CategoricalScenario {
    pub n_items: usize,
    pub class_mix: Vec<f64>,
    pub n_train: usize,
    pub expert: SensorId,
    pub labelers: Vec<SimLabeler>,
}

impl Default for CategoricalScenario {
    fn default() -> Self {
        CategoricalScenario {
            n_items: 300,
            class_mix: vec![0.36, 0.30, 0.34],
            n_train: 173,
            expert: SensorId(0),
            labelers: vec![
                SimLabeler { id: SensorId(1), n_labels: 178, profile: LabelerProfile::PerfectThenChance },
                SimLabeler { id: SensorId(2), n_labels: 190, profile: LabelerProfile::ChanceThenPerfect },
                SimLabeler { id: SensorId(3), n_labels: 200, profile: LabelerProfile::structured_drift() },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalData {
    pub labelers: SensorTable,
    pub labels: Vec<Label>,
    pub truth: BTreeMap<u64, usize>,
    pub train_items: Vec<u64>,
    pub test_items: Vec<u64>,
}

impl CategoricalScenario {
    pub fn n_classes(&self) -> usize {
        self.class_mix.len()
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.n_classes();
        if a < 2 || self.class_mix.iter().any(|p| !(*p >= 0.0)) || (self.class_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CalibError::Config("class_mix must be a probability vector over >= 2 classes".into()));
        }
        if self.n_train > self.n_items || self.n_items < 2 {
            return Err(CalibError::Config("n_train must not exceed n_items (>= 2)".into()));
        }
        for l in &self.labelers {
            if l.n_labels > self.n_items {
                return Err(CalibError::Config(format!("labeler {} labels more items than exist", l.id)));
            }
            if l.id == self.expert {
                return Err(CalibError::Config(format!("labeler {} is also the expert", l.id)));
            }
            if let LabelerProfile::Keyframes { start, middle, end } = &l.profile {
                for m in [start, middle, end] {
                    let ok = m.len() == a * a
                        && (0..a).all(|psi| ((0..a).map(|y| m[y * a + psi]).sum::<f64>() - 1.0).abs() < 1e-9);
                    if !ok {
                        return Err(CalibError::Config(format!("labeler {}: keyframes must be column-stochastic", l.id)));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Labels ordered by item then labeler; `order_index` is the item index.
pub fn gen_categorical(scenario: &CategoricalScenario, seed: u64) -> Result<CategoricalData> {
    scenario.validate()?;
    let a = scenario.n_classes();
    let n = scenario.n_items;
    let mix = WeightedIndex::new(&scenario.class_mix).map_err(|e| CalibError::Config(format!("class_mix: {e}")))?;
    let mut species_rng = rng::stream(seed, &[TAG_SPECIES]);
    let species: Vec<usize> = (0..n).map(|_| mix.sample(&mut species_rng)).collect();

    let mut items: Vec<u64> = (0..n as u64).collect();
    items.shuffle(&mut rng::stream(seed, &[TAG_SPLIT]));
    let mut train_items = items[..scenario.n_train].to_vec();
    let mut test_items = items[scenario.n_train..].to_vec();
    train_items.sort_unstable();
    test_items.sort_unstable();

    let mut labels: Vec<Label> = train_items
        .iter()
        .map(|&i| Label { item: i, labeler: scenario.expert, label: species[i as usize], order: i as f64 })
        .collect();
    for l in &scenario.labelers {
        let mut r = rng::stream(seed, &[TAG_LABELS, l.id.0 as u64]);
        let mut chosen: Vec<u64> = (0..n as u64).collect();
        chosen.shuffle(&mut r);
        chosen.truncate(l.n_labels);
        chosen.sort_unstable();
        for i in chosen {
            let u = i as f64 / (n - 1) as f64;
            let p = l.profile.confusion(u, a);
            let psi = species[i as usize];
            let col: Vec<f64> = (0..a).map(|y| p[y * a + psi]).collect();
            let y = WeightedIndex::new(&col).expect("column-stochastic").sample(&mut r);
            labels.push(Label { item: i, labeler: l.id, label: y, order: i as f64 });
        }
    }
    labels.sort_by_key(|l| (l.item, l.labeler));

    let mut infos = vec![SensorInfo { id: scenario.expert, sensor_type: SensorType::Static, is_reference: true }];
    infos.extend(
        scenario
            .labelers
            .iter()
            .map(|l| SensorInfo { id: l.id, sensor_type: SensorType::Static, is_reference: false }),
    );
    Ok(CategoricalData {
        labelers: SensorTable::new(infos)?,
        labels,
        truth: species.into_iter().enumerate().map(|(i, s)| (i as u64, s)).collect(),
        train_items,
        test_items,
    })
}
