//! Windowed rendezvous-graph calibration.
//!
//! Time is cut into windows `w = floor(t / delta)`; every `(sensor, window)`
//! is a node. Colocation edges `A -> B` carry `mean(log y_B - log y_A)` over
//! at least [`MIN_EDGE_OBSERVATIONS`] readings (the reverse edge carries the
//! negation); time edges join consecutive windows of one sensor with value 0.
//! A node's log-scaling `F` is the sum of edge values along its shortest path
//! to any reference node, and the calibrated reading is `exp(F) * y`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::metrics::nmse;
use crate::pair::{ColocationRecord, SensorTable};
use crate::{CalibError, Result, SensorId};

pub const MIN_EDGE_OBSERVATIONS: usize = 5;

pub type Node = (SensorId, i64);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultihopParams {
    /// Window length in hours.
    pub delta: f64,
    pub d_colocation: f64,
    pub d_time: f64,
}

impl MultihopParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !(self.d_colocation > 0.0) || !(self.d_time > 0.0) {
            return Err(CalibError::Config("multihop delta and distances must be > 0".into()));
        }
        Ok(())
    }
}

pub fn window(t: f64, delta: f64) -> i64 {
    (t / delta).floor() as i64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub to: Node,
    pub value: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RendezvousGraph {
    pub adjacency: BTreeMap<Node, Vec<Edge>>,
    pub references: BTreeSet<SensorId>,
}

impl RendezvousGraph {
    pub fn build(data: &[ColocationRecord], sensors: &SensorTable, p: &MultihopParams) -> Result<Self> {
        p.validate()?;
        let mut obs: BTreeMap<(Node, Node), Vec<f64>> = BTreeMap::new();
        let mut span: Option<(i64, i64)> = None;
        for (i, r) in data.iter().enumerate() {
            if !(r.y1 > 0.0 && r.y2 > 0.0) {
                return Err(CalibError::InvalidInput(format!("record {i}: nonpositive reading in log domain")));
            }
            sensors.get(r.s1)?;
            sensors.get(r.s2)?;
            let a = (r.s1, window(r.t1, p.delta));
            let b = (r.s2, window(r.t2, p.delta));
            for w in [a.1, b.1] {
                span = Some(span.map_or((w, w), |(lo, hi)| (lo.min(w), hi.max(w))));
            }
            let d = r.y2.ln() - r.y1.ln();
            if a < b {
                obs.entry((a, b)).or_default().push(d);
            } else {
                obs.entry((b, a)).or_default().push(-d);
            }
        }
        let mut g = RendezvousGraph { references: sensors.reference_ids().into_iter().collect(), ..Default::default() };
        if let Some((lo, hi)) = span {
            for s in sensors.iter() {
                for w in lo..=hi {
                    let node = (s.id, w);
                    let edges = g.adjacency.entry(node).or_default();
                    if w > lo {
                        edges.push(Edge { to: (s.id, w - 1), value: 0.0, distance: p.d_time });
                    }
                    if w < hi {
                        edges.push(Edge { to: (s.id, w + 1), value: 0.0, distance: p.d_time });
                    }
                }
            }
        }
        for ((a, b), ds) in obs {
            if ds.len() < MIN_EDGE_OBSERVATIONS {
                continue;
            }
            let v = ds.iter().sum::<f64>() / ds.len() as f64;
            g.adjacency.entry(a).or_default().push(Edge { to: b, value: v, distance: p.d_colocation });
            g.adjacency.entry(b).or_default().push(Edge { to: a, value: -v, distance: p.d_colocation });
        }
        Ok(g)
    }

    /// Multi-source Dijkstra from every reference node. Heap ties are broken
    /// by the smaller `(sensor, window)`.
    pub fn solve(&self, delta: f64) -> ScalingTable {
        #[derive(PartialEq)]
        struct Key(f64, Node);
        impl Eq for Key {}
        impl PartialOrd for Key {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }
        impl Ord for Key {
            fn cmp(&self, o: &Self) -> Ordering {
                self.0.total_cmp(&o.0).then(self.1.cmp(&o.1))
            }
        }

        let mut best: BTreeMap<Node, (f64, f64)> = BTreeMap::new();
        let mut heap = BinaryHeap::new();
        for &node in self.adjacency.keys() {
            if self.references.contains(&node.0) {
                best.insert(node, (0.0, 0.0));
                heap.push(Reverse(Key(0.0, node)));
            }
        }
        let mut done = BTreeSet::new();
        while let Some(Reverse(Key(dist, v))) = heap.pop() {
            if !done.insert(v) {
                continue;
            }
            let fv = best[&v].1;
            for e in &self.adjacency[&v] {
                let u = e.to;
                if done.contains(&u) {
                    continue;
                }
                // the edge u -> v carries the negation of v -> u
                let cand = dist + e.distance;
                if best.get(&u).is_none_or(|&(d, _)| cand < d) {
                    best.insert(u, (cand, -e.value + fv));
                    heap.push(Reverse(Key(cand, u)));
                }
            }
        }
        let entries = best.into_iter().map(|(n, (d, f))| (n, ScalingEntry { log_scaling: f, distance: d })).collect();
        ScalingTable { delta, entries, references: self.references.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingEntry {
    pub log_scaling: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingTable {
    pub delta: f64,
    pub entries: BTreeMap<Node, ScalingEntry>,
    pub references: BTreeSet<SensorId>,
}

impl ScalingTable {
    pub fn get(&self, sensor: SensorId, window: i64) -> Option<&ScalingEntry> {
        self.entries.get(&(sensor, window))
    }

    /// Calibrated reading; references pass through unchanged.
    pub fn predict_one(&self, sensor: SensorId, t: f64, y_raw: f64) -> Result<f64> {
        if self.references.contains(&sensor) {
            return Ok(y_raw);
        }
        let w = window(t, self.delta);
        self.get(sensor, w)
            .map(|e| e.log_scaling.exp() * y_raw)
            .ok_or(CalibError::NoPath { sensor, window: w })
    }
}

pub fn build_graph(data: &[ColocationRecord], sensors: &SensorTable, p: &MultihopParams) -> Result<ScalingTable> {
    Ok(RendezvousGraph::build(data, sensors, p)?.solve(p.delta))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawQuery {
    pub sensor: SensorId,
    pub time: f64,
    pub raw: f64,
}

pub fn predict_multihop(table: &ScalingTable, queries: &[RawQuery]) -> Vec<Result<f64>> {
    queries.iter().map(|q| table.predict_one(q.sensor, q.time, q.raw)).collect()
}

/// Predictions with the raw reading substituted wherever no path exists;
/// also returns how many queries fell back.
pub fn predict_or_raw(table: &ScalingTable, queries: &[RawQuery]) -> (Vec<f64>, usize) {
    let mut missing = 0;
    let out = queries
        .iter()
        .map(|q| {
            table.predict_one(q.sensor, q.time, q.raw).unwrap_or_else(|_| {
                missing += 1;
                q.raw
            })
        })
        .collect();
    (out, missing)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub delta: f64,
    pub ratio: f64,
    pub nmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridResult {
    pub delta: f64,
    pub ratio: f64,
    pub nmse: f64,
    pub cells: Vec<GridCell>,
}

/// Window size and `d_time / d_colocation` ratio minimising NMSE of the
/// calibrated queries against `truth` (`d_colocation = 1`). Ties go to the
/// smaller window, then the smaller ratio.
pub fn grid_search_multihop(
    data: &[ColocationRecord],
    sensors: &SensorTable,
    queries: &[RawQuery],
    truth: &[f64],
    windows: &[f64],
    ratios: &[f64],
) -> Result<GridResult> {
    if windows.is_empty() || ratios.is_empty() {
        return Err(CalibError::InvalidInput("grid search needs nonempty grids".into()));
    }
    let mut windows = windows.to_vec();
    let mut ratios = ratios.to_vec();
    windows.sort_by(f64::total_cmp);
    ratios.sort_by(f64::total_cmp);
    let mut cells = Vec::new();
    let mut best: Option<GridCell> = None;
    for &delta in &windows {
        for &ratio in &ratios {
            let p = MultihopParams { delta, d_colocation: 1.0, d_time: ratio };
            let table = build_graph(data, sensors, &p)?;
            let (pred, _) = predict_or_raw(&table, queries);
            let cell = GridCell { delta, ratio, nmse: nmse(&pred, truth)? };
            if best.as_ref().is_none_or(|b| cell.nmse < b.nmse) {
                best = Some(cell.clone());
            }
            cells.push(cell);
        }
    }
    let b = best.expect("nonempty grid");
    Ok(GridResult { delta: b.delta, ratio: b.ratio, nmse: b.nmse, cells })
}
