//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain Rust function so the logic
//! can be tested natively.

use calibnet::categorical::confusion_from_latents;
use calibnet::kernels::{KernelAssignment, KernelSpec, SensorKind};
use calibnet::metrics::nmse;
use calibnet::multihop::{build_graph, predict_or_raw, MultihopParams, RawQuery};
use calibnet::pair::{
    pair_loglik, predict_calibration, train, CalibrationFunction, ColocationRecord, LikelihoodConfig, Query,
    SensorInfo, SensorTable, SensorType, TrainOptions,
};
use calibnet::synth::{gen_pollution, PollutionScenario};
use calibnet::{CalibError, SensorId};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct DemoPoint {
    sensor: u32,
    time: f64,
    raw: f64,
    truth: f64,
    pair: f64,
    pair_std: f64,
    multihop: f64,
}

#[derive(Serialize)]
struct DemoResult {
    sensors: Vec<u32>,
    n_colocations: usize,
    points: Vec<DemoPoint>,
    nmse_raw: f64,
    nmse_pair: f64,
    nmse_multihop: f64,
}

/// Simulates a small network, fits both calibrators and returns every test
/// point as JSON.
pub fn run_demo(seed: u64, noise: f64, days: f64, steps: usize) -> Result<String, CalibError> {
    let scenario = PollutionScenario { noise_scale: noise, horizon: days * 24.0, n_static: 6, n_reference: 2, n_mobile: 3, ..Default::default() };
    let d = gen_pollution(&scenario, seed)?;
    let data: Vec<ColocationRecord> = d.colocations.iter().filter(|r| r.y1 >= 10.0 && r.y2 >= 10.0).copied().collect();
    let rules = KernelAssignment::new()
        .with_rule(SensorKind::Static, None, KernelSpec::Eq { variance: 0.3, lengthscale: 500.0 })
        .with_rule(SensorKind::Mobile, None, KernelSpec::Eq { variance: 0.3, lengthscale: 160.0 });
    let cfg = LikelihoodConfig { sigma2: (noise * noise).max(1.0), gamma2: LikelihoodConfig::moment_gamma2(&data) };
    let opts = TrainOptions {
        steps,
        learning_rate: 0.02,
        final_learning_rate: Some(0.002),
        inducing_per_gp: 12,
        seed,
        ..Default::default()
    };
    let phi = CalibrationFunction::LogScale;
    let fit = train(&data, &d.sensors, phi, &rules, &cfg, &opts)?;
    let queries: Vec<Query> = d.tests.iter().map(|t| Query { sensor: t.sensor, time: t.time, raw: Some(t.raw) }).collect();
    let preds = predict_calibration(&fit.state, &queries, phi, &d.sensors, &rules, 30, seed)?;

    let table = build_graph(&data, &d.sensors, &MultihopParams { delta: 72.0, d_colocation: 1.0, d_time: 1.0 })?;
    let raw_q: Vec<RawQuery> = d.tests.iter().map(|t| RawQuery { sensor: t.sensor, time: t.time, raw: t.raw }).collect();
    let (hops, _) = predict_or_raw(&table, &raw_q);

    let mut points = Vec::with_capacity(d.tests.len());
    for ((t, p), h) in d.tests.iter().zip(&preds).zip(&hops) {
        let c = p.calibrated.as_ref().ok_or_else(|| CalibError::InvalidInput("missing calibrated value".into()))?;
        points.push(DemoPoint {
            sensor: t.sensor.0,
            time: t.time,
            raw: t.raw,
            truth: t.true_value,
            pair: c.mean,
            pair_std: c.predictive_std(cfg.sigma2),
            multihop: *h,
        });
    }
    let truth: Vec<f64> = points.iter().map(|p| p.truth).collect();
    let col = |f: fn(&DemoPoint) -> f64| points.iter().map(f).collect::<Vec<_>>();
    let out = DemoResult {
        sensors: d.sensors.calibrated_ids().iter().map(|s| s.0).collect(),
        n_colocations: data.len(),
        nmse_raw: nmse(&col(|p| p.raw), &truth)?,
        nmse_pair: nmse(&col(|p| p.pair), &truth)?,
        nmse_multihop: nmse(&col(|p| p.multihop), &truth)?,
        points,
    };
    serde_json::to_string(&out).map_err(|e| CalibError::InvalidInput(e.to_string()))
}

/// Column-softmax confusion matrix, row-major `p(label | class)`.
pub fn confusion(latents: &[f64]) -> Result<Vec<f64>, CalibError> {
    let a = (latents.len() as f64).sqrt().round() as usize;
    if a < 2 || a * a != latents.len() {
        return Err(CalibError::InvalidInput(format!("{} latents is not a square of at least 2x2", latents.len())));
    }
    Ok(confusion_from_latents(latents, a))
}

/// Log likelihood of one colocation between two log-scale sensors over an
/// `n x n` grid of `(f1, f2)` in `[lo, hi]^2`, row-major with `f1` along rows.
pub fn loglik_surface(y1: f64, y2: f64, sigma2: f64, gamma2: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, CalibError> {
    if n < 2 || !(hi > lo) {
        return Err(CalibError::InvalidInput("surface needs n >= 2 and hi > lo".into()));
    }
    let sensors = SensorTable::new((1..=2).map(|i| SensorInfo { id: SensorId(i), sensor_type: SensorType::Static, is_reference: false }))?;
    let rec = ColocationRecord::new(0.0, SensorId(1), SensorId(2), y1, y2);
    let cfg = LikelihoodConfig { sigma2, gamma2 };
    cfg.validate()?;
    let step = (hi - lo) / (n - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (f1, f2) = (lo + i as f64 * step, lo + j as f64 * step);
            out.push(pair_loglik(&rec, &[f1], &[f2], CalibrationFunction::LogScale, &sensors, &cfg)?);
        }
    }
    Ok(out)
}

fn js(e: CalibError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = runDemo)]
pub fn run_demo_js(seed: u32, noise: f64, days: f64, steps: u32) -> Result<String, JsError> {
    run_demo(seed as u64, noise, days, steps as usize).map_err(js)
}

#[wasm_bindgen(js_name = confusionMatrix)]
pub fn confusion_js(latents: &[f64]) -> Result<Vec<f64>, JsError> {
    confusion(latents).map_err(js)
}

#[wasm_bindgen(js_name = loglikSurface)]
pub fn loglik_surface_js(y1: f64, y2: f64, sigma2: f64, gamma2: f64, lo: f64, hi: f64, n: u32) -> Result<Vec<f64>, JsError> {
    loglik_surface(y1, y2, sigma2, gamma2, lo, hi, n as usize).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_beats_raw() {
        let v: serde_json::Value = serde_json::from_str(&run_demo(1, 5.0, 60.0, 300).unwrap()).unwrap();
        assert!(v["nmse_pair"].as_f64().unwrap() < v["nmse_raw"].as_f64().unwrap());
        assert!(!v["points"].as_array().unwrap().is_empty());
    }

    #[test]
    fn confusion_columns_sum_to_one() {
        let p = confusion(&[2.0, -1.0, 0.0, 0.5, 1.0, 0.0, -3.0, 0.0, 4.0]).unwrap();
        for col in 0..3 {
            let s: f64 = (0..3).map(|r| p[r * 3 + col]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(confusion(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn surface_peaks_where_calibrated_readings_agree() {
        // y1 = 20, y2 = 40: agreement along f1 - f2 = ln 2
        let n = 41;
        let s = loglik_surface(20.0, 40.0, 1.0, 1e4, -1.0, 1.0, n).unwrap();
        let best = (0..n * n).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        let step = 2.0 / (n - 1) as f64;
        let (f1, f2) = (-1.0 + (best / n) as f64 * step, -1.0 + (best % n) as f64 * step);
        assert!((f1 - f2 - 2f64.ln()).abs() < 2.0 * step);
    }
}
