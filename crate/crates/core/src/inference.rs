//! Whitened sparse-variational engine shared by the continuous and the
//! categorical likelihoods.
//!
//! The inducing covariance is block diagonal (one block per process), so with
//! `Kzz = L Lᵀ` the optimiser works on whitened values `v = L⁻¹ u` with
//! `q(v) = N(mw, Rw Rwᵀ)`. The spec-level state is recovered as `m = L mw`,
//! `R = L Rw`, which is again lower triangular. For a record touching latent
//! points `x`, with `A = Kxz L⁻ᵀ`:
//!
//! ```text
//! mu = A mw,    S = Kxx − A Aᵀ + (A Rw)(A Rw)ᵀ,    f = mu + chol(S) eps
//! ```
//!
//! Gradients are propagated by hand through the sampling path, including the
//! reverse-mode Cholesky adjoint, so for fixed `eps` they are exact.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::gp::VariationalState;
use crate::kernels::{IndexPoint, KernelAssignment, KernelSpec};
use crate::linalg::{cholesky_adjoint, jittered_cholesky, robust_cholesky};
use crate::optim::Adam;
use crate::rng;
use crate::{CalibError, Result, SensorId};

/// Per-record likelihood over the latent values the record touches.
pub trait PairLikelihood: Sync {
    type Record: Sync;

    /// Latent points this record depends on, in the order `log_lik` expects.
    fn latents(&self, rec: &Self::Record) -> Vec<IndexPoint>;

    /// Log-likelihood of the record; writes `d loglik / d f` into `grad`.
    fn log_lik(&self, rec: &Self::Record, f: &[f64], grad: &mut [f64]) -> f64;

    /// Content hash used to key the record's random stream.
    fn record_key(&self, rec: &Self::Record) -> u64;
}

#[derive(Clone, Debug)]
struct Block {
    start: usize,
    len: usize,
    spec: KernelSpec,
    chol: DMatrix<f64>,
}

/// Inducing points grouped into per-process blocks with their prior factors.
#[derive(Clone, Debug)]
pub struct InducingLayout {
    z: Vec<IndexPoint>,
    blocks: Vec<Block>,
    index: BTreeMap<(SensorId, usize), usize>,
}

impl InducingLayout {
    pub fn new(z: &[IndexPoint], assign: &KernelAssignment) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut index = BTreeMap::new();
        let mut start = 0;
        while start < z.len() {
            let gp = z[start].gp();
            let mut end = start + 1;
            while end < z.len() && z[end].gp() == gp {
                end += 1;
            }
            if index.insert(gp, blocks.len()).is_some() {
                return Err(CalibError::InvalidInput(format!(
                    "inducing points of sensor {} parameter {} are not contiguous",
                    gp.0, gp.1
                )));
            }
            let spec = assign.resolve(gp.0, gp.1)?;
            let pts = &z[start..end];
            let k = DMatrix::from_fn(pts.len(), pts.len(), |i, j| spec.cov(pts[i].time, pts[j].time));
            let chol = jittered_cholesky(&k)?.l();
            blocks.push(Block { start, len: end - start, spec, chol });
            start = end;
        }
        Ok(InducingLayout { z: z.to_vec(), blocks, index })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn z(&self) -> &[IndexPoint] {
        &self.z
    }

    pub fn has_process(&self, sensor: SensorId, param: usize) -> bool {
        self.index.contains_key(&(sensor, param))
    }

    pub fn whiten(&self, st: &VariationalState) -> Result<Whitened> {
        let m = self.len();
        if st.len() != m || st.z != self.z {
            return Err(CalibError::InvalidInput("state does not match inducing layout".into()));
        }
        let mut mean = vec![0.0; m];
        let mut chol = vec![0.0; m * m];
        for b in &self.blocks {
            let mb = st.mean.rows(b.start, b.len).into_owned();
            let wm = b.chol.solve_lower_triangular(&mb).expect("singular block factor");
            mean[b.start..b.start + b.len].copy_from_slice(wm.as_slice());
            let rb = st.chol.rows(b.start, b.len).into_owned();
            let wr = b.chol.solve_lower_triangular(&rb).expect("singular block factor");
            for i in 0..b.len {
                for j in 0..=(b.start + i) {
                    chol[(b.start + i) * m + j] = wr[(i, j)];
                }
            }
        }
        Ok(Whitened { m, mean, chol })
    }

    pub fn unwhiten(&self, w: &Whitened) -> VariationalState {
        let m = self.len();
        let mut mean = DVector::zeros(m);
        let mut chol = DMatrix::zeros(m, m);
        for b in &self.blocks {
            for i in 0..b.len {
                let row = b.start + i;
                for k in 0..=i {
                    let l = b.chol[(i, k)];
                    mean[row] += l * w.mean[b.start + k];
                    let src = (b.start + k) * m;
                    for j in 0..=(b.start + k) {
                        chol[(row, j)] += l * w.chol[src + j];
                    }
                }
            }
        }
        VariationalState { z: self.z.clone(), mean, chol }
    }

    /// Prior-matching whitened state: `mw = 0`, `Rw = I`.
    pub fn prior_whitened(&self) -> Whitened {
        let m = self.len();
        let mut chol = vec![0.0; m * m];
        for i in 0..m {
            chol[i * m + i] = 1.0;
        }
        Whitened { m, mean: vec![0.0; m], chol }
    }

    /// Projection of arbitrary points onto the whitened inducing basis.
    pub fn project(&self, pts: &[IndexPoint]) -> Result<Projection> {
        let d = pts.len();
        let mut rows = Vec::with_capacity(d);
        for p in pts {
            let bi = *self.index.get(&p.gp()).ok_or_else(|| {
                CalibError::Config(format!(
                    "no inducing points for sensor {} parameter {}",
                    p.sensor, p.param
                ))
            })?;
            let b = &self.blocks[bi];
            let kv = DVector::from_fn(b.len, |k, _| b.spec.cov(self.z[b.start + k].time, p.time));
            let coef = b.chol.solve_lower_triangular(&kv).expect("singular block factor");
            rows.push(ProjRow { block: bi, start: b.start, coef: coef.as_slice().to_vec() });
        }
        let mut resid = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                if pts[i].gp() != pts[j].gp() {
                    continue;
                }
                let spec = &self.blocks[rows[i].block].spec;
                let dot: f64 = rows[i].coef.iter().zip(&rows[j].coef).map(|(a, b)| a * b).sum();
                let mut v = spec.cov(pts[i].time, pts[j].time) - dot;
                if i == j {
                    v = v.max(0.0);
                }
                resid[(i, j)] = v;
                resid[(j, i)] = v;
            }
        }
        Ok(Projection { rows, resid })
    }

    /// Mean and covariance of `q(f)` at projected points.
    pub fn moments(&self, proj: &Projection, w: &Whitened) -> (DVector<f64>, DMatrix<f64>) {
        let (mu, b) = self.mean_and_b(proj, w);
        let s = covariance(proj, &b, w.m);
        (DVector::from_vec(mu), s)
    }

    fn mean_and_b(&self, proj: &Projection, w: &Whitened) -> (Vec<f64>, Vec<f64>) {
        let m = w.m;
        let d = proj.rows.len();
        let mut mu = vec![0.0; d];
        let mut b = vec![0.0; d * m];
        for (j, row) in proj.rows.iter().enumerate() {
            let out = &mut b[j * m..(j + 1) * m];
            for (k, &c) in row.coef.iter().enumerate() {
                let r = row.start + k;
                mu[j] += c * w.mean[r];
                let src = &w.chol[r * m..r * m + r + 1];
                for (o, s) in out[..=r].iter_mut().zip(src) {
                    *o += c * s;
                }
            }
        }
        (mu, b)
    }
}

fn covariance(proj: &Projection, b: &[f64], m: usize) -> DMatrix<f64> {
    let d = proj.rows.len();
    let mut s = proj.resid.clone();
    for i in 0..d {
        let ei = proj.rows[i].start + proj.rows[i].coef.len();
        for j in 0..=i {
            let ej = proj.rows[j].start + proj.rows[j].coef.len();
            let e = ei.min(ej);
            let dot: f64 = b[i * m..i * m + e].iter().zip(&b[j * m..j * m + e]).map(|(x, y)| x * y).sum();
            s[(i, j)] += dot;
            if i != j {
                s[(j, i)] += dot;
            }
        }
    }
    s
}

#[derive(Clone, Debug)]
struct ProjRow {
    block: usize,
    start: usize,
    /// `L_b⁻¹ k_b(z, x)` restricted to the point's own block.
    coef: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Projection {
    rows: Vec<ProjRow>,
    /// `Kxx − A Aᵀ`, the part of the prior not explained by inducing values.
    resid: DMatrix<f64>,
}

impl Projection {
    pub fn dim(&self) -> usize {
        self.rows.len()
    }
}

/// Whitened variational parameters; `chol` is row-major `m x m`.
#[derive(Clone, Debug, PartialEq)]
pub struct Whitened {
    pub m: usize,
    pub mean: Vec<f64>,
    pub chol: Vec<f64>,
}

impl Whitened {
    pub fn n_params(m: usize) -> usize {
        m + m * (m + 1) / 2
    }

    /// Unconstrained vector: mean, then the lower triangle row by row with the
    /// diagonal stored as its logarithm.
    pub fn pack(&self) -> Vec<f64> {
        let m = self.m;
        let mut theta = Vec::with_capacity(Self::n_params(m));
        theta.extend_from_slice(&self.mean);
        for i in 0..m {
            for j in 0..i {
                theta.push(self.chol[i * m + j]);
            }
            theta.push(self.chol[i * m + i].ln());
        }
        theta
    }

    pub fn unpack(m: usize, theta: &[f64]) -> Self {
        assert_eq!(theta.len(), Self::n_params(m));
        let mean = theta[..m].to_vec();
        let mut chol = vec![0.0; m * m];
        let mut k = m;
        for i in 0..m {
            for j in 0..i {
                chol[i * m + j] = theta[k];
                k += 1;
            }
            chol[i * m + i] = theta[k].exp();
            k += 1;
        }
        Whitened { m, mean, chol }
    }

    /// `KL(N(mw, Rw Rwᵀ) || N(0, I))`.
    pub fn kl(&self) -> f64 {
        let m = self.m;
        let fro: f64 = self.chol.iter().map(|v| v * v).sum();
        let maha: f64 = self.mean.iter().map(|v| v * v).sum();
        let logdet: f64 = (0..m).map(|i| self.chol[i * m + i].ln()).sum::<f64>() * 2.0;
        0.5 * (fro + maha - m as f64 - logdet)
    }
}

/// One minibatch entry.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem {
    pub index: usize,
    /// Multiplier applied to the record's expected log-likelihood.
    pub weight: f64,
    /// Random-stream key for the record's draws.
    pub key: u64,
}

struct Term {
    value: f64,
    mu_bar: Vec<f64>,
    b_bar: Vec<f64>,
}

/// ELBO evaluation over a fixed record set.
pub struct Engine<'a, L: PairLikelihood> {
    lik: &'a L,
    layout: &'a InducingLayout,
    records: &'a [L::Record],
    proj: Vec<Projection>,
    keys: Vec<u64>,
}

impl<'a, L: PairLikelihood> Engine<'a, L> {
    pub fn new(lik: &'a L, layout: &'a InducingLayout, records: &'a [L::Record]) -> Result<Self> {
        let proj = records
            .iter()
            .map(|r| layout.project(&lik.latents(r)))
            .collect::<Result<Vec<_>>>()?;
        let keys = records.iter().map(|r| lik.record_key(r)).collect();
        Ok(Engine { lik, layout, records, proj, keys })
    }

    pub fn layout(&self) -> &InducingLayout {
        self.layout
    }

    pub fn n_records(&self) -> usize {
        self.records.len()
    }

    pub fn n_params(&self) -> usize {
        Whitened::n_params(self.layout.len())
    }

    pub fn record_key(&self, index: usize) -> u64 {
        self.keys[index]
    }

    /// Every record once, with the given weights, keyed by content.
    pub fn full_batch(&self, weights: &[f64]) -> Vec<BatchItem> {
        (0..self.records.len())
            .map(|i| BatchItem { index: i, weight: weights[i], key: self.keys[i] })
            .collect()
    }

    fn term(&self, w: &Whitened, item: &BatchItem, n_samples: usize, seed: u64, step: u64, want_grad: bool) -> Term {
        let rec = &self.records[item.index];
        let proj = &self.proj[item.index];
        let d = proj.dim();
        if d == 0 {
            let value = self.lik.log_lik(rec, &[], &mut []);
            return Term { value, mu_bar: Vec::new(), b_bar: Vec::new() };
        }
        let m = w.m;
        let (mu, b) = self.layout.mean_and_b(proj, w);
        let s = covariance(proj, &b, m);
        let l = match robust_cholesky(&s) {
            Ok(l) => l,
            Err(_) => return Term { value: f64::NAN, mu_bar: vec![0.0; d], b_bar: vec![0.0; d * m] },
        };
        let mut stream = rng::stream(seed, &[step, item.key]);
        let mut eps = vec![0.0; d];
        let mut f = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut value = 0.0;
        let mut mu_bar = vec![0.0; d];
        let mut l_bar = DMatrix::zeros(d, d);
        let inv_p = 1.0 / n_samples as f64;
        for _ in 0..n_samples {
            rng::fill_standard_normal(&mut stream, &mut eps);
            for i in 0..d {
                f[i] = mu[i] + (0..=i).map(|j| l[(i, j)] * eps[j]).sum::<f64>();
            }
            g.iter_mut().for_each(|v| *v = 0.0);
            value += inv_p * self.lik.log_lik(rec, &f, &mut g);
            if want_grad {
                for i in 0..d {
                    mu_bar[i] += inv_p * g[i];
                    for j in 0..=i {
                        l_bar[(i, j)] += inv_p * g[i] * eps[j];
                    }
                }
            }
        }
        if !want_grad {
            return Term { value, mu_bar, b_bar: Vec::new() };
        }
        let gs = cholesky_adjoint(&l, &l_bar);
        let mut b_bar = vec![0.0; d * m];
        for j in 0..d {
            let out = &mut b_bar[j * m..(j + 1) * m];
            for i in 0..d {
                let c = 2.0 * gs[(j, i)];
                if c == 0.0 {
                    continue;
                }
                for (o, v) in out.iter_mut().zip(&b[i * m..(i + 1) * m]) {
                    *o += c * v;
                }
            }
        }
        Term { value, mu_bar, b_bar }
    }

    /// ELBO estimate `sum_i weight_i E_q[log p(y_i | f)] − KL` at `theta`,
    /// writing its gradient into `grad` when given.
    pub fn evaluate(
        &self,
        theta: &[f64],
        items: &[BatchItem],
        n_samples: usize,
        seed: u64,
        step: u64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        let m = self.layout.len();
        let w = Whitened::unpack(m, theta);
        let want_grad = grad.is_some();
        let mut order: Vec<&BatchItem> = items.iter().collect();
        order.sort_by_key(|it| (it.key, it.index));

        #[cfg(feature = "parallel")]
        let terms: Vec<Term> = {
            use rayon::prelude::*;
            order
                .par_iter()
                .map(|it| self.term(&w, it, n_samples.max(1), seed, step, want_grad))
                .collect()
        };
        #[cfg(not(feature = "parallel"))]
        let terms: Vec<Term> = order
            .iter()
            .map(|it| self.term(&w, it, n_samples.max(1), seed, step, want_grad))
            .collect();

        let mut value = 0.0;
        for (it, t) in order.iter().zip(&terms) {
            value += it.weight * t.value;
        }
        value -= w.kl();

        if let Some(grad) = grad {
            let mut gm = vec![0.0; m];
            let mut gr = vec![0.0; m * m];
            for (it, t) in order.iter().zip(&terms) {
                let proj = &self.proj[it.index];
                for (j, row) in proj.rows.iter().enumerate() {
                    let mb = it.weight * t.mu_bar[j];
                    let bb = &t.b_bar[j * m..(j + 1) * m];
                    for (k, &c) in row.coef.iter().enumerate() {
                        let r = row.start + k;
                        gm[r] += mb * c;
                        let wc = it.weight * c;
                        for (o, v) in gr[r * m..r * m + r + 1].iter_mut().zip(&bb[..=r]) {
                            *o += wc * v;
                        }
                    }
                }
            }
            // − KL
            for i in 0..m {
                gm[i] -= w.mean[i];
                for j in 0..=i {
                    gr[i * m + j] -= w.chol[i * m + j];
                }
                gr[i * m + i] += 1.0 / w.chol[i * m + i];
            }
            grad[..m].copy_from_slice(&gm);
            let mut k = m;
            for i in 0..m {
                for j in 0..i {
                    grad[k] = gr[i * m + j];
                    k += 1;
                }
                grad[k] = gr[i * m + i] * w.chol[i * m + i];
                k += 1;
            }
        }
        Ok(value)
    }
}

/// How records are drawn at each optimisation step.
#[derive(Clone, Debug)]
pub enum BatchPlan {
    /// Every record at every step.
    Full { weights: Vec<f64> },
    /// `batch` records drawn with replacement from `probs`; each draw is
    /// weighted by `weights[i] * n / batch` so the estimate stays unbiased.
    Sampled { probs: Vec<f64>, weights: Vec<f64>, batch: usize },
}

impl BatchPlan {
    /// Resampling distribution of a `Sampled` plan.
    pub fn sampler(&self) -> Result<Option<WeightedIndex<f64>>> {
        match self {
            BatchPlan::Sampled { probs, .. } => WeightedIndex::new(probs)
                .map(Some)
                .map_err(|e| CalibError::InvalidInput(format!("bad resampling distribution: {e}"))),
            BatchPlan::Full { .. } => Ok(None),
        }
    }

    /// The minibatch of a `Sampled` plan at `step`. Repeated draws of one
    /// record get distinct random-stream keys.
    pub fn draw(&self, dist: &WeightedIndex<f64>, key: impl Fn(usize) -> u64, seed: u64, step: u64) -> Vec<BatchItem> {
        let BatchPlan::Sampled { weights, batch, .. } = self else {
            return Vec::new();
        };
        let mut r = rng::stream(seed, &[step, u64::MAX]);
        let scale = weights.len() as f64 / *batch as f64;
        let mut seen: HashMap<usize, u64> = HashMap::new();
        (0..*batch)
            .map(|_| {
                let i = dist.sample(&mut r);
                let occ = seen.entry(i).or_insert(0);
                *occ += 1;
                BatchItem { index: i, weight: weights[i] * scale, key: rng::mix(key(i), &[*occ]) }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub samples: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last step (geometric decay); defaults to
    /// the initial rate.
    pub final_learning_rate: Option<f64>,
    pub seed: u64,
}

pub struct FitOutput {
    pub state: VariationalState,
    pub whitened: Whitened,
    pub trace: Vec<f64>,
}

/// Maximises the ELBO with Adam starting from `init`.
pub fn fit<L: PairLikelihood>(
    engine: &Engine<'_, L>,
    init: &VariationalState,
    plan: &BatchPlan,
    opts: &FitOptions,
) -> Result<FitOutput> {
    let n = engine.n_records();
    if n == 0 {
        return Err(CalibError::InvalidInput("no records to train on".into()));
    }
    let layout = engine.layout();
    let mut theta = layout.whiten(init)?.pack();
    let mut grad = vec![0.0; theta.len()];
    let mut adam = Adam::new(theta.len());
    let mut trace = Vec::with_capacity(opts.steps);
    let lr0 = opts.learning_rate;
    let lr1 = opts.final_learning_rate.unwrap_or(lr0);
    let sampler = plan.sampler()?;
    let full_items = match plan {
        BatchPlan::Full { weights } => engine.full_batch(weights),
        BatchPlan::Sampled { .. } => Vec::new(),
    };
    for step in 0..opts.steps {
        let items = match &sampler {
            Some(dist) => plan.draw(dist, |i| engine.record_key(i), opts.seed, step as u64),
            None => full_items.clone(),
        };
        let value = engine.evaluate(&theta, &items, opts.samples, opts.seed, step as u64, Some(&mut grad))?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let first = items.iter().map(|it| it.index).min().unwrap_or(0);
            let last = items.iter().map(|it| it.index).max().unwrap_or(0);
            return Err(CalibError::NonFiniteElbo { step, first, last });
        }
        trace.push(value);
        let frac = if opts.steps > 1 { step as f64 / (opts.steps - 1) as f64 } else { 0.0 };
        let lr = lr0 * (lr1 / lr0).powf(frac);
        adam.ascend(&mut theta, &grad, lr);
    }
    let whitened = Whitened::unpack(layout.len(), &theta);
    let state = layout.unwhiten(&whitened);
    Ok(FitOutput { state, whitened, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{make_inducing_grid, predict_q};
    use crate::kernels::SensorKind;

    fn assign() -> KernelAssignment {
        KernelAssignment::new()
            .with_rule(SensorKind::Static, None, KernelSpec::Eq { variance: 1.5, lengthscale: 8.0 })
            .with_rule(SensorKind::Mobile, None, KernelSpec::EqBias { variance: 0.5, lengthscale: 3.0, bias_variance: 0.2 })
            .with_sensor(SensorId(1), SensorKind::Static)
            .with_sensor(SensorId(2), SensorKind::Mobile)
    }

    #[test]
    fn whitening_roundtrip_and_moments_match_dense_prediction() {
        let a = assign();
        let z = make_inducing_grid(&[SensorId(1), SensorId(2)], 2, 0.0, 20.0, 4).unwrap();
        let layout = InducingLayout::new(&z, &a).unwrap();
        let m = z.len();
        let mut theta = layout.prior_whitened().pack();
        for (i, t) in theta.iter_mut().enumerate() {
            *t += 0.1 * ((i * 7 % 11) as f64 - 5.0) / 5.0;
        }
        let w = Whitened::unpack(m, &theta);
        let st = layout.unwhiten(&w);
        let back = layout.whiten(&st).unwrap();
        for (x, y) in back.chol.iter().zip(&w.chol) {
            assert!((x - y).abs() < 1e-9);
        }
        let xs = vec![
            IndexPoint::new(3.3, SensorId(1), 0),
            IndexPoint::new(4.1, SensorId(2), 1),
            IndexPoint::new(15.0, SensorId(1), 0),
            IndexPoint::new(9.0, SensorId(1), 1),
        ];
        let proj = layout.project(&xs).unwrap();
        let (mu, s) = layout.moments(&proj, &w);
        let q = predict_q(&xs, &st, &a).unwrap();
        assert!((mu - q.mean).abs().max() < 1e-8);
        assert!((s - q.cov).abs().max() < 1e-8);
    }

    #[test]
    fn prior_kl_is_zero() {
        let a = assign();
        let z = make_inducing_grid(&[SensorId(1)], 1, 0.0, 20.0, 4).unwrap();
        let layout = InducingLayout::new(&z, &a).unwrap();
        assert_eq!(layout.prior_whitened().kl(), 0.0);
    }

    #[test]
    fn non_contiguous_blocks_rejected() {
        let a = assign();
        let z = vec![
            IndexPoint::new(0.0, SensorId(1), 0),
            IndexPoint::new(0.0, SensorId(2), 0),
            IndexPoint::new(1.0, SensorId(1), 0),
        ];
        assert!(InducingLayout::new(&z, &a).is_err());
    }
}
