//! File formats: colocation, sensor, label, truth and test-point CSVs, and
//! the TOML run configuration.
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces the values bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::categorical::{Label, SpeciesPrior, VoteMode};
use crate::kernels::{KernelAssignment, KernelSpec, SensorKind};
use crate::multihop::MultihopParams;
use crate::pair::{CalibrationFunction, ColocationRecord, LikelihoodConfig, SensorInfo, SensorTable, TrainOptions};
use crate::synth::TestPoint;
use crate::{CalibError, Result};

fn parse_error(source_name: &str, e: csv::Error) -> CalibError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    let message = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
        _ => e.to_string(),
    };
    CalibError::Parse { source_name: source_name.to_string(), line, message }
}

/// Reads every row of a headed CSV into `T`, reporting the offending line on
/// failure.
pub fn read_csv<T: DeserializeOwned, R: Read>(reader: R, source_name: &str) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize().map(|row| row.map_err(|e| parse_error(source_name, e))).collect()
}

pub fn read_csv_path<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_csv(File::open(path)?, &path.display().to_string())
}

pub fn write_csv<T: Serialize, W: Write>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_path<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_csv(File::create(path)?, rows)
}

pub fn read_colocations(path: &Path) -> Result<Vec<ColocationRecord>> {
    let rows: Vec<ColocationRecord> = read_csv_path(path)?;
    for (i, r) in rows.iter().enumerate() {
        r.validate().map_err(|e| CalibError::Parse {
            source_name: path.display().to_string(),
            line: i as u64 + 2,
            message: e.to_string(),
        })?;
    }
    Ok(rows)
}

pub fn read_sensors(path: &Path) -> Result<SensorTable> {
    SensorTable::new(read_csv_path::<SensorInfo>(path)?)
}

pub fn write_sensors(path: &Path, table: &SensorTable) -> Result<()> {
    write_csv_path(path, &table.iter().copied().collect::<Vec<_>>())
}

pub fn read_labels(path: &Path) -> Result<Vec<Label>> {
    read_csv_path(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemTruth {
    pub item_id: u64,
    pub label: usize,
}

pub fn read_item_truth(path: &Path) -> Result<BTreeMap<u64, usize>> {
    let rows: Vec<ItemTruth> = read_csv_path(path)?;
    let mut out = BTreeMap::new();
    for r in rows {
        if out.insert(r.item_id, r.label).is_some() {
            return Err(CalibError::InvalidInput(format!("{}: duplicate item {}", path.display(), r.item_id)));
        }
    }
    Ok(out)
}

pub fn write_item_truth(path: &Path, truth: &BTreeMap<u64, usize>) -> Result<()> {
    let rows: Vec<ItemTruth> = truth.iter().map(|(&item_id, &label)| ItemTruth { item_id, label }).collect();
    write_csv_path(path, &rows)
}

pub fn read_tests(path: &Path) -> Result<Vec<TestPoint>> {
    read_csv_path(path)
}

/// Measurement filters applied at ingestion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Preprocess {
    /// Consecutive rows of the same sensor pair averaged together; 0 or 1
    /// disables averaging.
    pub block_size: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl Preprocess {
    pub fn keeps(&self, y: f64) -> bool {
        self.min.is_none_or(|m| y >= m) && self.max.is_none_or(|m| y <= m)
    }
}

fn average(block: &[ColocationRecord]) -> ColocationRecord {
    let n = block.len() as f64;
    let mean = |f: fn(&ColocationRecord) -> f64| block.iter().map(f).sum::<f64>() / n;
    ColocationRecord {
        t1: mean(|r| r.t1),
        t2: mean(|r| r.t2),
        s1: block[0].s1,
        s2: block[0].s2,
        y1: mean(|r| r.y1),
        y2: mean(|r| r.y2),
    }
}

/// Block-averages runs of consecutive rows that share a sensor pair, then
/// drops records with either reading outside `[min, max]`.
pub fn ingest(data: &[ColocationRecord], p: &Preprocess) -> Vec<ColocationRecord> {
    let size = p.block_size.max(1);
    let mut averaged = Vec::with_capacity(data.len() / size + 1);
    let mut start = 0;
    while start < data.len() {
        let pair = (data[start].s1, data[start].s2);
        let mut end = start + 1;
        while end < data.len() && end - start < size && (data[end].s1, data[end].s2) == pair {
            end += 1;
        }
        averaged.push(if end - start == 1 { data[start] } else { average(&data[start..end]) });
        start = end;
    }
    averaged.retain(|r| p.keeps(r.y1) && p.keeps(r.y2));
    averaged
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelRule {
    pub sensor_kind: SensorKind,
    /// Calibration-parameter index; omitted for every parameter.
    #[serde(default)]
    pub param: Option<usize>,
    pub kernel: KernelSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub kind: CalibrationFunction,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection { kind: CalibrationFunction::LogScale }
    }
}

/// How `gamma2` is chosen when not given as a number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma2Rule {
    /// `100 x` the variance of the raw readings.
    Wide,
    /// Mean squared raw reading.
    SecondMoment,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gamma2Setting {
    Value(f64),
    Rule(Gamma2Rule),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LikelihoodSection {
    pub sigma2: f64,
    /// A number, `"wide"` or `"second_moment"`; `"wide"` when omitted.
    pub gamma2: Option<Gamma2Setting>,
}

impl Default for LikelihoodSection {
    fn default() -> Self {
        LikelihoodSection { sigma2: 0.2, gamma2: None }
    }
}

impl LikelihoodSection {
    pub fn resolve(&self, data: &[ColocationRecord]) -> LikelihoodConfig {
        LikelihoodConfig {
            sigma2: self.sigma2,
            gamma2: match self.gamma2 {
                Some(Gamma2Setting::Value(g)) => g,
                None | Some(Gamma2Setting::Rule(Gamma2Rule::Wide)) => LikelihoodConfig::default_gamma2(data),
                Some(Gamma2Setting::Rule(Gamma2Rule::SecondMoment)) => LikelihoodConfig::moment_gamma2(data),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionSection {
    pub samples: usize,
    pub seed: u64,
}

impl Default for PredictionSection {
    fn default() -> Self {
        PredictionSection { samples: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultihopSection {
    pub delta: f64,
    pub d_colocation: f64,
    pub d_time: f64,
    /// Window sizes (hours) tried by the grid search.
    pub windows: Vec<f64>,
    /// `d_time / d_colocation` ratios tried by the grid search.
    pub ratios: Vec<f64>,
}

impl Default for MultihopSection {
    fn default() -> Self {
        MultihopSection {
            delta: 168.0,
            d_colocation: 1.0,
            d_time: 1.0,
            windows: vec![24.0, 72.0, 168.0, 336.0, 720.0, 1440.0, 2160.0, 4320.0],
            ratios: vec![0.1, 1.0, 10.0],
        }
    }
}

impl MultihopSection {
    pub fn params(&self) -> MultihopParams {
        MultihopParams { delta: self.delta, d_colocation: self.d_colocation, d_time: self.d_time }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CategoricalSection {
    pub n_classes: usize,
    /// Estimated from the training ground truth when omitted.
    pub prior: Option<Vec<f64>>,
    pub smoothing: f64,
    pub baselines: Vec<VoteMode>,
}

impl Default for CategoricalSection {
    fn default() -> Self {
        CategoricalSection {
            n_classes: 3,
            prior: None,
            smoothing: 0.2,
            baselines: vec![VoteMode::MostGuessed, VoteMode::TrustWeighted, VoteMode::PriorWeighted, VoteMode::MostCommon],
        }
    }
}

impl CategoricalSection {
    pub fn prior(&self, train_truth: &[usize]) -> Result<SpeciesPrior> {
        match &self.prior {
            Some(p) => SpeciesPrior::new(p.clone()),
            None => SpeciesPrior::from_truth(train_truth, self.n_classes),
        }
    }
}

/// Everything a run needs besides its input files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub calibration: CalibrationSection,
    pub likelihood: LikelihoodSection,
    pub optimizer: TrainOptions,
    pub prediction: PredictionSection,
    pub kernels: Vec<KernelRule>,
    pub multihop: MultihopSection,
    pub preprocess: Preprocess,
    pub categorical: CategoricalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let day = 24.0;
        RunConfig {
            calibration: CalibrationSection::default(),
            likelihood: LikelihoodSection::default(),
            optimizer: TrainOptions::default(),
            prediction: PredictionSection::default(),
            kernels: vec![
                KernelRule {
                    sensor_kind: SensorKind::Static,
                    param: None,
                    kernel: KernelSpec::EqBias { variance: 9.0, lengthscale: 100.0 * day, bias_variance: 3.0 },
                },
                KernelRule {
                    sensor_kind: SensorKind::Mobile,
                    param: None,
                    kernel: KernelSpec::EqBias { variance: 9.0, lengthscale: 100.0 * day, bias_variance: 3.0 },
                },
            ],
            multihop: MultihopSection::default(),
            preprocess: Preprocess::default(),
            categorical: CategoricalSection::default(),
        }
    }
}

fn check(ok: bool, path: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CalibError::Config(format!("{path}: {msg}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CalibError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            CalibError::Config(m) => CalibError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.likelihood;
        check(l.sigma2 > 0.0, "likelihood.sigma2", "must be > 0")?;
        check(
            !matches!(l.gamma2, Some(Gamma2Setting::Value(g)) if !(g > 0.0)),
            "likelihood.gamma2",
            "must be > 0",
        )?;
        let o = &self.optimizer;
        check(o.samples >= 1, "optimizer.samples", "must be >= 1")?;
        check(o.batch_size >= 1, "optimizer.batch_size", "must be >= 1")?;
        check(o.learning_rate > 0.0, "optimizer.learning_rate", "must be > 0")?;
        check(o.final_learning_rate.is_none_or(|v| v > 0.0), "optimizer.final_learning_rate", "must be > 0")?;
        check(o.oversample_factor >= 1.0, "optimizer.oversample_factor", "must be >= 1")?;
        check(o.inducing_per_gp >= 2, "optimizer.inducing_per_gp", "must be >= 2")?;
        check(self.prediction.samples >= 1, "prediction.samples", "must be >= 1")?;
        for (i, r) in self.kernels.iter().enumerate() {
            r.kernel.validate().map_err(|e| CalibError::Config(format!("kernels[{i}].kernel: {e}")))?;
        }
        let m = &self.multihop;
        check(m.delta > 0.0, "multihop.delta", "must be > 0")?;
        check(m.d_colocation > 0.0, "multihop.d_colocation", "must be > 0")?;
        check(m.d_time > 0.0, "multihop.d_time", "must be > 0")?;
        check(!m.windows.is_empty() && m.windows.iter().all(|w| *w > 0.0), "multihop.windows", "must be nonempty and > 0")?;
        check(!m.ratios.is_empty() && m.ratios.iter().all(|w| *w > 0.0), "multihop.ratios", "must be nonempty and > 0")?;
        let p = &self.preprocess;
        if let (Some(lo), Some(hi)) = (p.min, p.max) {
            check(lo <= hi, "preprocess.min", "must not exceed preprocess.max")?;
        }
        let c = &self.categorical;
        check(c.n_classes >= 2, "categorical.n_classes", "must be >= 2")?;
        check(c.smoothing >= 0.0, "categorical.smoothing", "must be >= 0")?;
        if let Some(prior) = &c.prior {
            check(prior.len() == c.n_classes, "categorical.prior", "must have n_classes entries")?;
            SpeciesPrior::new(prior.clone()).map_err(|e| CalibError::Config(format!("categorical.prior: {e}")))?;
        }
        Ok(())
    }

    pub fn kernel_rules(&self) -> KernelAssignment {
        let mut a = KernelAssignment::new();
        for r in &self.kernels {
            a.add_rule(r.sensor_kind, r.param, r.kernel);
        }
        a
    }
}
