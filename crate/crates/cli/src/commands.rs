use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use calibnet::categorical::{pair_records, train_categorical, trust_weights, vote_baselines, SpeciesPredictor};
use calibnet::io::{
    ingest, read_colocations, read_csv_path, read_item_truth, read_labels, read_sensors, read_tests, write_csv_path,
    write_item_truth, write_sensors, RunConfig,
};
use calibnet::metrics::{CategoricalReport, ContinuousReport};
use calibnet::multihop::{build_graph, grid_search_multihop, predict_or_raw, RawQuery};
use calibnet::pair::{predict_calibration, train, ColocationRecord, Query};
use calibnet::synth::{drift_network, gen_categorical, gen_pollution, CategoricalScenario, PollutionData, PollutionScenario};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::formats::{
    read_posteriors, write_posteriors, write_table, CalibratedRow, GridRow, PosteriorRow, QueryRow, ScalingRow, TraceRow,
};
use crate::manifest::{sha256_hex, Manifest};
use crate::{
    CalibrateCatArgs, CalibrateMultihopArgs, CalibrateViArgs, DataKind, EvalKind, EvaluateArgs, GridsearchArgs,
    SimulateArgs,
};

/// Settings of the drifting-instrument scenario.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DriftScenario {
    horizon: f64,
    noise_scale: f64,
}

impl Default for DriftScenario {
    fn default() -> Self {
        DriftScenario { horizon: 69.0 * 24.0, noise_scale: 10.0 }
    }
}

fn load_toml<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// Writes the effective settings next to the outputs and records their hash.
fn record_settings(out: &Path, name: &str, text: &str, m: &mut Manifest) -> Result<()> {
    fs::write(out.join(name), text)?;
    m.config_sha256 = Some(sha256_hex(text.as_bytes()));
    Ok(())
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn write_pollution(out: &Path, d: &PollutionData) -> Result<()> {
    write_sensors(&out.join("sensors.csv"), &d.sensors)?;
    write_csv_path(&out.join("colocations.csv"), &d.colocations)?;
    write_csv_path(&out.join("tests.csv"), &d.tests)?;
    fs::write(out.join("scalings.json"), serde_json::to_string_pretty(&d.scalings)? + "\n")?;
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    prepare_out(&a.out)?;
    let mut m = Manifest::new("simulate");
    m.seed = Some(a.seed);
    if let Some(p) = &a.scenario {
        m.input(p)?;
    }
    let outputs: &[&str] = match a.kind {
        DataKind::Pollution => {
            let mut sc: PollutionScenario = load_toml(a.scenario.as_ref())?;
            if let Some(n) = a.noise {
                sc.noise_scale = n;
            }
            record_settings(&a.out, "scenario.toml", &toml::to_string(&sc)?, &mut m)?;
            write_pollution(&a.out, &gen_pollution(&sc, a.seed)?)?;
            &["scenario.toml", "sensors.csv", "colocations.csv", "tests.csv", "scalings.json"]
        }
        DataKind::Drift => {
            let mut sc: DriftScenario = load_toml(a.scenario.as_ref())?;
            if let Some(n) = a.noise {
                sc.noise_scale = n;
            }
            record_settings(&a.out, "scenario.toml", &toml::to_string(&sc)?, &mut m)?;
            let net = drift_network(a.seed, sc.horizon, sc.noise_scale);
            write_pollution(&a.out, &net.simulate(a.seed)?)?;
            &["scenario.toml", "sensors.csv", "colocations.csv", "tests.csv", "scalings.json"]
        }
        DataKind::Categorical => {
            if a.noise.is_some() {
                bail!("--noise does not apply to categorical data");
            }
            let sc: CategoricalScenario = load_toml(a.scenario.as_ref())?;
            record_settings(&a.out, "scenario.toml", &toml::to_string(&sc)?, &mut m)?;
            let d = gen_categorical(&sc, a.seed)?;
            write_sensors(&a.out.join("labelers.csv"), &d.labelers)?;
            write_csv_path(&a.out.join("labels.csv"), &d.labels)?;
            let split = |items: &[u64]| items.iter().map(|i| (*i, d.truth[i])).collect::<BTreeMap<u64, usize>>();
            write_item_truth(&a.out.join("truth_train.csv"), &split(&d.train_items))?;
            write_item_truth(&a.out.join("truth_test.csv"), &split(&d.test_items))?;
            &["scenario.toml", "labelers.csv", "labels.csv", "truth_train.csv", "truth_test.csv"]
        }
    };
    m.finish(&a.out, outputs)
}

fn load_colocations(path: &Path, cfg: &RunConfig) -> Result<Vec<ColocationRecord>> {
    let raw = read_colocations(path)?;
    let data = ingest(&raw, &cfg.preprocess);
    if data.len() != raw.len() {
        eprintln!("preprocessing kept {} of {} colocation rows", data.len(), raw.len());
    }
    if data.is_empty() {
        bail!("no colocation rows left after preprocessing");
    }
    Ok(data)
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let rows: Vec<TraceRow> = trace.iter().enumerate().map(|(step, &elbo)| TraceRow { step, elbo }).collect();
    Ok(write_csv_path(path, &rows)?)
}

pub fn calibrate_vi(a: &CalibrateViArgs) -> Result<()> {
    let out = &a.common.out;
    prepare_out(out)?;
    let mut cfg = load_config(a.common.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.optimizer.seed = s;
    }
    let mut m = Manifest::new("calibrate-vi");
    m.seed = Some(cfg.optimizer.seed);
    record_settings(out, "config.toml", &cfg.to_toml(), &mut m)?;
    m.input(&a.colocations)?;
    m.input(&a.sensors)?;

    let sensors = read_sensors(&a.sensors)?;
    let data = load_colocations(&a.colocations, &cfg)?;
    let lik = cfg.likelihood.resolve(&data);
    let rules = cfg.kernel_rules();
    let phi = cfg.calibration.kind;
    let fit = train(&data, &sensors, phi, &rules, &lik, &cfg.optimizer)?;
    fit.state.save_json(&out.join("state.json"))?;
    write_trace(&out.join("trace.csv"), &fit.trace)?;
    let mut outputs = vec!["config.toml", "state.json", "trace.csv"];

    if let Some(qpath) = &a.queries {
        m.input(qpath)?;
        let rows: Vec<QueryRow> = read_csv_path(qpath)?;
        let queries: Vec<Query> = rows.iter().map(|r| Query { sensor: r.sensor, time: r.time, raw: r.raw }).collect();
        let preds = predict_calibration(&fit.state, &queries, phi, &sensors, &rules, cfg.prediction.samples, cfg.prediction.seed)?;
        let p = cfg.prediction.samples;
        let mut header: Vec<String> = ["sensor", "time", "param", "post_mean", "post_std"].map(String::from).to_vec();
        header.extend((0..p).map(|k| format!("sample_{k}")));
        let mut table = Vec::new();
        let mut calibrated = Vec::new();
        for pr in &preds {
            for c in 0..pr.param_mean.len() {
                let mut row = vec![pr.sensor.to_string(), pr.time.to_string(), c.to_string()];
                row.push(pr.param_mean[c].to_string());
                row.push(pr.param_std[c].to_string());
                row.extend(pr.param_samples.iter().map(|s| s[c].to_string()));
                table.push(row);
            }
            if let Some(cs) = &pr.calibrated {
                calibrated.push(CalibratedRow {
                    sensor: pr.sensor,
                    time: pr.time,
                    raw: cs.raw,
                    mean: cs.mean,
                    std: Some(cs.predictive_std(lik.sigma2)),
                });
            }
        }
        write_table(&out.join("predictions.csv"), &header, &table)?;
        outputs.push("predictions.csv");
        if !calibrated.is_empty() {
            write_csv_path(&out.join("calibrated.csv"), &calibrated)?;
            outputs.push("calibrated.csv");
        }
    }
    m.finish(out, &outputs)
}

pub fn calibrate_multihop(a: &CalibrateMultihopArgs) -> Result<()> {
    let out = &a.common.out;
    prepare_out(out)?;
    let mut cfg = load_config(a.common.config.as_ref())?;
    if let Some(d) = a.delta {
        cfg.multihop.delta = d;
        cfg.validate()?;
    }
    let mut m = Manifest::new("calibrate-multihop");
    record_settings(out, "config.toml", &cfg.to_toml(), &mut m)?;
    m.input(&a.colocations)?;
    m.input(&a.sensors)?;

    let sensors = read_sensors(&a.sensors)?;
    let data = load_colocations(&a.colocations, &cfg)?;
    let table = build_graph(&data, &sensors, &cfg.multihop.params())?;
    let rows: Vec<ScalingRow> = table
        .entries
        .iter()
        .map(|(&(sensor, window), e)| ScalingRow { sensor, window, log_scaling: e.log_scaling, distance: e.distance })
        .collect();
    write_csv_path(&out.join("scaling_table.csv"), &rows)?;
    let mut outputs = vec!["config.toml", "scaling_table.csv"];

    if let Some(qpath) = &a.queries {
        m.input(qpath)?;
        let rows: Vec<QueryRow> = read_csv_path(qpath)?;
        let queries = rows
            .iter()
            .map(|r| {
                let raw = r.raw.ok_or_else(|| anyhow!("{}: multi-hop queries need a raw reading", qpath.display()))?;
                Ok(RawQuery { sensor: r.sensor, time: r.time, raw })
            })
            .collect::<Result<Vec<_>>>()?;
        let (pred, missing) = predict_or_raw(&table, &queries);
        if missing > 0 {
            eprintln!("{missing} of {} queries have no path to a reference; raw readings kept", queries.len());
        }
        let calibrated: Vec<CalibratedRow> = queries
            .iter()
            .zip(pred)
            .map(|(q, mean)| CalibratedRow { sensor: q.sensor, time: q.time, raw: q.raw, mean, std: None })
            .collect();
        write_csv_path(&out.join("calibrated.csv"), &calibrated)?;
        outputs.push("calibrated.csv");
    }
    m.finish(out, &outputs)
}

pub fn gridsearch(a: &GridsearchArgs) -> Result<()> {
    let out = &a.common.out;
    prepare_out(out)?;
    let cfg = load_config(a.common.config.as_ref())?;
    let mut m = Manifest::new("gridsearch-multihop");
    record_settings(out, "config.toml", &cfg.to_toml(), &mut m)?;
    for p in [&a.colocations, &a.sensors, &a.tests] {
        m.input(p)?;
    }
    let sensors = read_sensors(&a.sensors)?;
    let data = load_colocations(&a.colocations, &cfg)?;
    let tests = read_tests(&a.tests)?;
    let queries: Vec<RawQuery> = tests.iter().map(|t| RawQuery { sensor: t.sensor, time: t.time, raw: t.raw }).collect();
    let truth: Vec<f64> = tests.iter().map(|t| t.true_value).collect();
    let res = grid_search_multihop(&data, &sensors, &queries, &truth, &cfg.multihop.windows, &cfg.multihop.ratios)?;
    let rows: Vec<GridRow> = res.cells.iter().map(|c| GridRow { delta: c.delta, ratio: c.ratio, nmse: c.nmse }).collect();
    write_csv_path(&out.join("grid.csv"), &rows)?;
    let best = json!({ "delta": res.delta, "ratio": res.ratio, "nmse": res.nmse });
    fs::write(out.join("best.json"), serde_json::to_string_pretty(&best)? + "\n")?;
    m.finish(out, &["config.toml", "grid.csv", "best.json"])
}

#[derive(Deserialize)]
struct ItemRow {
    item_id: u64,
}

fn method_name<T: Serialize>(mode: &T) -> String {
    serde_json::to_value(mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

pub fn calibrate_cat(a: &CalibrateCatArgs) -> Result<()> {
    let out = &a.common.out;
    prepare_out(out)?;
    let mut cfg = load_config(a.common.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.optimizer.seed = s;
    }
    let mut m = Manifest::new("calibrate-cat");
    m.seed = Some(cfg.optimizer.seed);
    record_settings(out, "config.toml", &cfg.to_toml(), &mut m)?;
    for p in [&a.labels, &a.labelers, &a.truth] {
        m.input(p)?;
    }
    if let Some(p) = &a.items {
        m.input(p)?;
    }

    let labels = read_labels(&a.labels)?;
    let labelers = read_sensors(&a.labelers)?;
    let truth = read_item_truth(&a.truth)?;
    let n_classes = cfg.categorical.n_classes;
    if let Some(l) = labels.iter().find(|l| l.label >= n_classes) {
        bail!("{}: item {} has class {} outside 0..{n_classes}", a.labels.display(), l.item, l.label);
    }
    let prior = cfg.categorical.prior(&truth.values().copied().collect::<Vec<_>>())?;
    let rules = cfg.kernel_rules();
    let records = pair_records(&labels);
    let fit = train_categorical(&records, &labelers, &prior, &rules, &cfg.optimizer)?;
    fit.state.save_json(&out.join("state.json"))?;
    write_trace(&out.join("trace.csv"), &fit.trace)?;

    let test_items: Vec<u64> = match &a.items {
        Some(p) => read_csv_path::<ItemRow>(p)?.into_iter().map(|r| r.item_id).collect::<BTreeSet<_>>(),
        None => labels.iter().map(|l| l.item).filter(|i| !truth.contains_key(i)).collect(),
    }
    .into_iter()
    .collect();
    let predictor = SpeciesPredictor::new(&fit.state, &labelers, &rules, &prior, cfg.prediction.samples, cfg.prediction.seed)?;
    let mut by_item: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for l in &labels {
        by_item.entry(l.item).or_default().push((l.labeler, l.label, l.order));
    }
    let mut rows = Vec::new();
    for &item in &test_items {
        let own = by_item.get(&item).map(Vec::as_slice).unwrap_or_default();
        rows.push(PosteriorRow { item, method: "calibration".into(), probs: predictor.predict(own)? });
    }
    let trust = trust_weights(&labels, &truth);
    for &mode in &cfg.categorical.baselines {
        let votes = vote_baselines(&labels, &test_items, mode, cfg.categorical.smoothing, &trust, &prior)?;
        let name = method_name(&mode);
        rows.extend(votes.into_iter().map(|(item, probs)| PosteriorRow { item, method: name.clone(), probs }));
    }
    write_posteriors(&out.join("posteriors.csv"), &rows, n_classes)?;
    m.finish(out, &["config.toml", "state.json", "trace.csv", "posteriors.csv"])
}

/// JSON number, or a string for non-finite values (JSON has no infinity).
fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(v.to_string())
    }
}

fn continuous_json(r: &ContinuousReport) -> Value {
    let mut v = json!({ "n": r.n, "nmse": num(r.nmse), "mae": num(r.mae) });
    if let Some(nlpd) = r.nlpd {
        v["nlpd"] = num(nlpd);
    }
    v
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_out(parent)?;
    }
    let report = match a.kind {
        EvalKind::Continuous => {
            let preds: Vec<CalibratedRow> = read_csv_path(&a.predictions)?;
            let tests = read_tests(&a.truth)?;
            let truth: BTreeMap<(u32, u64), f64> = tests.iter().map(|t| ((t.sensor.0, t.time.to_bits()), t.true_value)).collect();
            let y = preds
                .iter()
                .map(|p| {
                    truth
                        .get(&(p.sensor.0, p.time.to_bits()))
                        .copied()
                        .ok_or_else(|| anyhow!("no truth for sensor {} at time {}", p.sensor, p.time))
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean: Vec<f64> = preds.iter().map(|p| p.mean).collect();
            let raw: Vec<f64> = preds.iter().map(|p| p.raw).collect();
            let std: Option<Vec<f64>> = preds.iter().map(|p| p.std).collect();
            json!({
                "calibrated": continuous_json(&ContinuousReport::compute(&mean, std.as_deref(), &y)?),
                "raw": continuous_json(&ContinuousReport::compute(&raw, None, &y)?),
            })
        }
        EvalKind::Categorical => {
            let rows = read_posteriors(&a.predictions)?;
            let truth = read_item_truth(&a.truth)?;
            let mut by_method: BTreeMap<String, (Vec<Vec<f64>>, Vec<usize>)> = BTreeMap::new();
            for r in rows {
                let t = *truth.get(&r.item).ok_or_else(|| anyhow!("no truth for item {}", r.item))?;
                let e = by_method.entry(r.method).or_default();
                e.0.push(r.probs);
                e.1.push(t);
            }
            let mut out = serde_json::Map::new();
            for (method, (post, t)) in by_method {
                let r = CategoricalReport::compute(&post, &t)?;
                out.insert(method, json!({ "n": r.n, "accuracy": num(r.accuracy), "nlpd": num(r.nlpd) }));
            }
            Value::Object(out)
        }
    };
    fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(())
}
