//! Confusion-matrix calibration of crowd labels.
//!
//! Each non-reference labeler has `A * A` latent processes, reshaped into a
//! matrix `C` (row = reported class `y`, column = true class `psi`) and
//! column-softmaxed into a conditional `P[y, psi] = p(y | psi)`. A pair of
//! labels of the same item is scored by marginalising the unknown class:
//! `p(y1, y2) = sum_psi P1[y1, psi] P2[y2, psi] prior[psi]`. Reference
//! labelers report the true class.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::gp::VariationalState;
use crate::inference::{fit, Engine, InducingLayout, PairLikelihood, Whitened};
use crate::kernels::{IndexPoint, KernelAssignment};
use crate::linalg::robust_cholesky;
use crate::pair::{batch_plan, inducing_points, time_span, ImportanceWeights, PairFit, SensorTable, TrainOptions};
use crate::rng;
use crate::{CalibError, Result, SensorId};

/// One row of a label file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    #[serde(rename = "item_id")]
    pub item: u64,
    #[serde(rename = "labeler_id")]
    pub labeler: SensorId,
    pub label: usize,
    #[serde(rename = "order_index")]
    pub order: f64,
}

/// Two labels of the same item from different labelers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub item: u64,
    pub s1: SensorId,
    pub s2: SensorId,
    pub y1: usize,
    pub y2: usize,
    pub t1: f64,
    pub t2: f64,
}

impl LabelRecord {
    pub fn validate(&self, a: usize) -> Result<()> {
        if self.s1 == self.s2 {
            return Err(CalibError::InvalidInput(format!("item {}: labeler {} paired with itself", self.item, self.s1)));
        }
        if self.y1 >= a || self.y2 >= a {
            return Err(CalibError::InvalidInput(format!("item {}: class outside 0..{a}", self.item)));
        }
        Ok(())
    }

    fn key(&self) -> u64 {
        rng::mix(
            self.item,
            &[self.s1.0 as u64, self.s2.0 as u64, self.y1 as u64, self.y2 as u64, self.t1.to_bits(), self.t2.to_bits()],
        )
    }
}

/// Every unordered pair of labels sharing an item, ordered by item and then
/// by position in `labels`.
pub fn pair_records(labels: &[Label]) -> Vec<LabelRecord> {
    let mut by_item: BTreeMap<u64, Vec<&Label>> = BTreeMap::new();
    for l in labels {
        by_item.entry(l.item).or_default().push(l);
    }
    let mut out = Vec::new();
    for (item, ls) in by_item {
        for i in 0..ls.len() {
            for j in i + 1..ls.len() {
                if ls[i].labeler == ls[j].labeler {
                    continue;
                }
                out.push(LabelRecord {
                    item,
                    s1: ls[i].labeler,
                    s2: ls[j].labeler,
                    y1: ls[i].label,
                    y2: ls[j].label,
                    t1: ls[i].order,
                    t2: ls[j].order,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeciesPrior(Vec<f64>);

impl SpeciesPrior {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(CalibError::InvalidInput("species prior must be a probability vector".into()));
        }
        Ok(SpeciesPrior(p))
    }

    pub fn uniform(a: usize) -> Self {
        SpeciesPrior(vec![1.0 / a as f64; a])
    }

    /// Empirical class frequencies.
    pub fn from_truth(truth: &[usize], a: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(CalibError::InvalidInput("no ground truth to estimate the prior from".into()));
        }
        let mut counts = vec![0.0; a];
        for &t in truth {
            *counts.get_mut(t).ok_or_else(|| CalibError::InvalidInput(format!("class {t} outside 0..{a}")))? += 1.0;
        }
        let n = truth.len() as f64;
        Ok(SpeciesPrior(counts.into_iter().map(|c| c / n).collect()))
    }

    pub fn n_classes(&self) -> usize {
        self.0.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// Column softmax of a row-major `A x A` matrix.
pub fn confusion_from_latents(c: &[f64], a: usize) -> Vec<f64> {
    assert_eq!(c.len(), a * a, "confusion latents must have A*A entries");
    let mut p = vec![0.0; a * a];
    for psi in 0..a {
        let max = (0..a).map(|y| c[y * a + psi]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for y in 0..a {
            let e = (c[y * a + psi] - max).exp();
            p[y * a + psi] = e;
            z += e;
        }
        for y in 0..a {
            p[y * a + psi] /= z;
        }
    }
    p
}

/// `p(y | psi)` for every `psi`: a confusion row, or an indicator for references.
fn conditional(f: Option<&[f64]>, y: usize, a: usize) -> Vec<f64> {
    match f {
        None => (0..a).map(|psi| if psi == y { 1.0 } else { 0.0 }).collect(),
        Some(f) => {
            let p = confusion_from_latents(f, a);
            p[y * a..(y + 1) * a].to_vec()
        }
    }
}

/// `log sum_psi p(y1 | psi) p(y2 | psi) prior[psi]`; `f1`/`f2` are ignored
/// for reference sides. Two disagreeing references give `-inf`.
pub fn cat_pair_loglik(
    rec: &LabelRecord,
    f1: &[f64],
    f2: &[f64],
    prior: &SpeciesPrior,
    ref1: bool,
    ref2: bool,
) -> Result<f64> {
    let a = prior.n_classes();
    rec.validate(a)?;
    for (f, r) in [(f1, ref1), (f2, ref2)] {
        if !r && (f.len() != a * a || f.iter().any(|v| !v.is_finite())) {
            return Err(CalibError::InvalidInput(format!("confusion latents need {} finite values", a * a)));
        }
    }
    let c1 = conditional((!ref1).then_some(f1), rec.y1, a);
    let c2 = conditional((!ref2).then_some(f2), rec.y2, a);
    let z: f64 = (0..a).map(|psi| c1[psi] * c2[psi] * prior.0[psi]).sum();
    Ok(z.ln())
}

/// The label-pair likelihood plugged into the variational engine.
pub struct CatModel<'a> {
    pub prior: SpeciesPrior,
    pub labelers: &'a SensorTable,
}

impl CatModel<'_> {
    fn a(&self) -> usize {
        self.prior.n_classes()
    }

    fn latent(&self, s: SensorId) -> bool {
        !self.labelers.is_reference(s).unwrap_or(true)
    }
}

impl PairLikelihood for CatModel<'_> {
    type Record = LabelRecord;

    fn latents(&self, rec: &LabelRecord) -> Vec<IndexPoint> {
        let aa = self.a() * self.a();
        let mut out = Vec::new();
        for (t, s) in [(rec.t1, rec.s1), (rec.t2, rec.s2)] {
            if self.latent(s) {
                out.extend((0..aa).map(|k| IndexPoint::new(t, s, k)));
            }
        }
        out
    }

    fn log_lik(&self, rec: &LabelRecord, f: &[f64], grad: &mut [f64]) -> f64 {
        let a = self.a();
        let aa = a * a;
        let mut offset = 0;
        let mut conf: [Option<(usize, Vec<f64>)>; 2] = [None, None];
        let mut cond = [Vec::new(), Vec::new()];
        for (k, (y, s)) in [(rec.y1, rec.s1), (rec.y2, rec.s2)].into_iter().enumerate() {
            if self.latent(s) {
                let p = confusion_from_latents(&f[offset..offset + aa], a);
                cond[k] = p[y * a..(y + 1) * a].to_vec();
                conf[k] = Some((offset, p));
                offset += aa;
            } else {
                cond[k] = conditional(None, y, a);
            }
        }
        let joint: Vec<f64> = (0..a).map(|psi| cond[0][psi] * cond[1][psi] * self.prior.0[psi]).collect();
        let z: f64 = joint.iter().sum();
        if z <= 0.0 {
            return f64::NEG_INFINITY;
        }
        for (k, y) in [rec.y1, rec.y2].into_iter().enumerate() {
            if let Some((off, p)) = &conf[k] {
                for psi in 0..a {
                    let w = joint[psi] / z;
                    for row in 0..a {
                        let ind = if row == y { 1.0 } else { 0.0 };
                        grad[off + row * a + psi] = w * (ind - p[row * a + psi]);
                    }
                }
            }
        }
        z.ln()
    }

    fn record_key(&self, rec: &LabelRecord) -> u64 {
        rec.key()
    }
}

fn validate_records(records: &[LabelRecord], labelers: &SensorTable, a: usize) -> Result<()> {
    for r in records {
        r.validate(a)?;
        labelers.get(r.s1)?;
        labelers.get(r.s2)?;
    }
    Ok(())
}

/// Oversampling weights for records that involve a reference labeler.
fn importance_weights(records: &[LabelRecord], labelers: &SensorTable, factor: f64) -> Result<ImportanceWeights> {
    let n = records.len();
    let raw = records
        .iter()
        .map(|r| Ok(if labelers.is_reference(r.s1)? || labelers.is_reference(r.s2)? { factor } else { 1.0 }))
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let weights = probs.iter().map(|p| (1.0 / n as f64) / p).collect();
    Ok(ImportanceWeights { probs, weights })
}

/// Fits the confusion processes of every non-reference labeler.
pub fn train_categorical(
    records: &[LabelRecord],
    labelers: &SensorTable,
    prior: &SpeciesPrior,
    rules: &KernelAssignment,
    opts: &TrainOptions,
) -> Result<PairFit> {
    if records.is_empty() {
        return Err(CalibError::InvalidInput("no label pairs".into()));
    }
    opts.validate()?;
    let a = prior.n_classes();
    validate_records(records, labelers, a)?;
    let assign = labelers.bind(rules);
    assign.validate()?;
    let span = time_span(records.iter().flat_map(|r| [r.t1, r.t2])).expect("nonempty records");
    let z = inducing_points(labelers, a * a, span, opts.inducing_per_gp)?;
    let layout = InducingLayout::new(&z, &assign)?;
    let init = VariationalState::prior(z, &assign)?;
    let model = CatModel { prior: prior.clone(), labelers };
    let engine = Engine::new(&model, &layout, records)?;
    let iw = importance_weights(records, labelers, opts.oversample_factor)?;
    let plan = batch_plan(iw, opts.batch_size, opts.oversample_factor);
    let out = fit(&engine, &init, &plan, &opts.fit_options())?;
    Ok(PairFit { state: out.state, trace: out.trace })
}

/// Posterior over the true class of items given their labels.
pub struct SpeciesPredictor<'a> {
    layout: InducingLayout,
    whitened: Whitened,
    labelers: &'a SensorTable,
    prior: SpeciesPrior,
    n_samples: usize,
    seed: u64,
}

impl<'a> SpeciesPredictor<'a> {
    pub fn new(
        state: &VariationalState,
        labelers: &'a SensorTable,
        rules: &KernelAssignment,
        prior: &SpeciesPrior,
        n_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let assign = labelers.bind(rules);
        let layout = InducingLayout::new(&state.z, &assign)?;
        let whitened = layout.whiten(state)?;
        Ok(SpeciesPredictor { layout, whitened, labelers, prior: prior.clone(), n_samples: n_samples.max(1), seed })
    }

    /// Monte Carlo mean of the confusion matrix of `labeler` at time `t`
    /// (row-major, row = reported class). Identity for references.
    pub fn expected_confusion(&self, labeler: SensorId, t: f64) -> Result<Vec<f64>> {
        let a = self.prior.n_classes();
        if self.labelers.is_reference(labeler)? {
            return Ok((0..a * a).map(|k| if k / a == k % a { 1.0 } else { 0.0 }).collect());
        }
        let pts: Vec<IndexPoint> = (0..a * a).map(|k| IndexPoint::new(t, labeler, k)).collect();
        let proj = self.layout.project(&pts)?;
        let (mu, s) = self.layout.moments(&proj, &self.whitened);
        let l = robust_cholesky(&s)?;
        let mut stream = rng::stream(self.seed, &[labeler.0 as u64, t.to_bits()]);
        let mut eps = vec![0.0; a * a];
        let mut acc = vec![0.0; a * a];
        for _ in 0..self.n_samples {
            rng::fill_standard_normal(&mut stream, &mut eps);
            let f = &mu + &l * DVector::from_column_slice(&eps);
            for (o, p) in acc.iter_mut().zip(confusion_from_latents(f.as_slice(), a)) {
                *o += p / self.n_samples as f64;
            }
        }
        Ok(acc)
    }

    /// `p(psi | labels)` from `(labeler, class, time)` triples.
    pub fn predict(&self, labels: &[(SensorId, usize, f64)]) -> Result<Vec<f64>> {
        let a = self.prior.n_classes();
        let mut post = self.prior.0.clone();
        // a fixed product order makes the result independent of input order
        let mut sorted = labels.to_vec();
        sorted.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)).then(x.2.total_cmp(&y.2)));
        for &(s, y, t) in &sorted {
            if y >= a {
                return Err(CalibError::InvalidInput(format!("class {y} outside 0..{a}")));
            }
            let p = self.expected_confusion(s, t)?;
            for psi in 0..a {
                post[psi] *= p[y * a + psi];
            }
        }
        let z: f64 = post.iter().sum();
        if !(z > 0.0) {
            return Ok(self.prior.0.clone());
        }
        Ok(post.into_iter().map(|v| v / z).collect())
    }
}

/// Convenience wrapper around [`SpeciesPredictor`] for a single item.
#[allow(clippy::too_many_arguments)]
pub fn predict_species(
    labels: &[(SensorId, usize, f64)],
    state: &VariationalState,
    labelers: &SensorTable,
    rules: &KernelAssignment,
    prior: &SpeciesPrior,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(CalibError::InvalidInput("at least one label required".into()));
    }
    SpeciesPredictor::new(state, labelers, rules, prior, n_samples, seed)?.predict(labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// Label counts.
    MostGuessed,
    /// Counts weighted by each labeler's training accuracy.
    TrustWeighted,
    /// Trust-weighted counts multiplied by the class prior.
    PriorWeighted,
    /// Ignores the labels; see [`most_common_class`].
    MostCommon,
}

/// Training accuracy of every labeler against ground truth.
pub fn trust_weights(labels: &[Label], truth: &BTreeMap<u64, usize>) -> BTreeMap<SensorId, f64> {
    let mut tally: BTreeMap<SensorId, (f64, f64)> = BTreeMap::new();
    for l in labels {
        if let Some(&t) = truth.get(&l.item) {
            let e = tally.entry(l.labeler).or_insert((0.0, 0.0));
            e.1 += 1.0;
            if l.label == t {
                e.0 += 1.0;
            }
        }
    }
    tally.into_iter().map(|(k, (hit, n))| (k, hit / n)).collect()
}

/// Most frequent training class; ties go to the lowest index.
pub fn most_common_class(prior: &SpeciesPrior) -> usize {
    crate::metrics::argmax(prior.probs())
}

/// Voting posterior for one item's `(labeler, class)` labels.
///
/// `MostCommon` carries no label information and returns the uniform vector;
/// its hard decision is [`most_common_class`]. Labelers missing from `trust`
/// get weight 0.
pub fn vote(
    labels: &[(SensorId, usize)],
    mode: VoteMode,
    smoothing: f64,
    trust: &BTreeMap<SensorId, f64>,
    prior: &SpeciesPrior,
) -> Result<Vec<f64>> {
    let a = prior.n_classes();
    if !(smoothing >= 0.0) {
        return Err(CalibError::InvalidInput("smoothing must be >= 0".into()));
    }
    if mode == VoteMode::MostCommon {
        return Ok(vec![1.0 / a as f64; a]);
    }
    let mut score = vec![smoothing; a];
    for &(s, y) in labels {
        if y >= a {
            return Err(CalibError::InvalidInput(format!("class {y} outside 0..{a}")));
        }
        score[y] += match mode {
            VoteMode::MostGuessed => 1.0,
            _ => trust.get(&s).copied().unwrap_or(0.0),
        };
    }
    if mode == VoteMode::PriorWeighted {
        for (v, p) in score.iter_mut().zip(prior.probs()) {
            *v *= p;
        }
    }
    let z: f64 = score.iter().sum();
    if !(z > 0.0) {
        return Ok(vec![1.0 / a as f64; a]);
    }
    Ok(score.into_iter().map(|v| v / z).collect())
}

/// [`vote`] applied to every item in `items`, ascending item id.
pub fn vote_baselines(
    labels: &[Label],
    items: &[u64],
    mode: VoteMode,
    smoothing: f64,
    trust: &BTreeMap<SensorId, f64>,
    prior: &SpeciesPrior,
) -> Result<BTreeMap<u64, Vec<f64>>> {
    let mut by_item: BTreeMap<u64, Vec<(SensorId, usize)>> = items.iter().map(|&i| (i, Vec::new())).collect();
    for l in labels {
        if let Some(v) = by_item.get_mut(&l.item) {
            v.push((l.labeler, l.label));
        }
    }
    by_item
        .into_iter()
        .map(|(item, ls)| Ok((item, vote(&ls, mode, smoothing, trust, prior)?)))
        .collect()
}
