//! CSV rows produced and consumed by the subcommands.

use std::fs::File;
use std::path::Path;

use anyhow::Result;
use calibnet::SensorId;
use serde::{Deserialize, Serialize};

/// A point to predict at; `raw` is the reading to calibrate, if any.
#[derive(Clone, Copy, Debug, Deserialize)]
pub struct QueryRow {
    pub sensor: SensorId,
    pub time: f64,
    #[serde(default)]
    pub raw: Option<f64>,
}

/// A calibrated reading. `std` is empty when the method gives none.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CalibratedRow {
    pub sensor: SensorId,
    pub time: f64,
    pub raw: f64,
    pub mean: f64,
    pub std: Option<f64>,
}

#[derive(Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub elbo: f64,
}

#[derive(Serialize)]
pub struct ScalingRow {
    pub sensor: SensorId,
    pub window: i64,
    pub log_scaling: f64,
    pub distance: f64,
}

#[derive(Serialize)]
pub struct GridRow {
    pub delta: f64,
    pub ratio: f64,
    pub nmse: f64,
}

/// Writes rows whose column count depends on the data; values use Rust's
/// shortest round-trip float formatting.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One posterior row per `(item, method)`.
pub struct PosteriorRow {
    pub item: u64,
    pub method: String,
    pub probs: Vec<f64>,
}

pub fn write_posteriors(path: &Path, rows: &[PosteriorRow], a: usize) -> Result<()> {
    let mut header = vec!["item_id".to_string(), "method".to_string()];
    header.extend((0..a).map(|k| format!("p_{k}")));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.item.to_string(), r.method.clone()];
            v.extend(r.probs.iter().map(|p| p.to_string()));
            v
        })
        .collect();
    write_table(path, &header, &body)
}

pub fn read_posteriors(path: &Path) -> Result<Vec<PosteriorRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |k: usize| rec.get(k).ok_or_else(|| anyhow::anyhow!("{}:{line}: missing column {k}", path.display()));
        let item = field(0)?.trim().parse().map_err(|e| anyhow::anyhow!("{}:{line}: item_id: {e}", path.display()))?;
        let method = field(1)?.trim().to_string();
        let probs = (2..rec.len())
            .map(|k| field(k)?.trim().parse::<f64>().map_err(|e| anyhow::anyhow!("{}:{line}: p_{}: {e}", path.display(), k - 2)))
            .collect::<Result<Vec<f64>>>()?;
        out.push(PosteriorRow { item, method, probs });
    }
    Ok(out)
}
