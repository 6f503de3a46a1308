//! Variational state and the Gaussian machinery shared by both likelihoods.
//!
//! `q(u) = N(m, R Rᵀ)` over inducing values `u = f(Z)`; predictions at new
//! points follow the sparse-GP conditional
//! `N(Kxz Kzz⁻¹ m, Kxx − Kxz Kzz⁻¹ Kzx + Kxz Kzz⁻¹ R Rᵀ Kzz⁻¹ Kzx)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::kernels::{build_cov, IndexPoint, KernelAssignment};
use crate::linalg::{jittered_cholesky, logdet_from_chol, robust_cholesky};
use crate::{CalibError, Result, SensorId};

/// Evenly spaced inducing times for every `(sensor, parameter)` process,
/// grouped by sensor then parameter, times ascending within each group.
pub fn make_inducing_grid(
    sensors: &[SensorId],
    n_params: usize,
    t_min: f64,
    t_max: f64,
    per_gp_count: usize,
) -> Result<Vec<IndexPoint>> {
    if per_gp_count < 2 {
        return Err(CalibError::Config("inducing count per process must be >= 2".into()));
    }
    if !(t_max > t_min) || !t_min.is_finite() || !t_max.is_finite() {
        return Err(CalibError::InvalidInput(format!(
            "degenerate inducing time span [{t_min}, {t_max}]"
        )));
    }
    let step = (t_max - t_min) / (per_gp_count - 1) as f64;
    let mut z = Vec::with_capacity(sensors.len() * n_params * per_gp_count);
    for &s in sensors {
        for c in 0..n_params {
            for i in 0..per_gp_count {
                let t = if i + 1 == per_gp_count { t_max } else { t_min + step * i as f64 };
                z.push(IndexPoint::new(t, s, c));
            }
        }
    }
    Ok(z)
}

/// Inducing locations with the mean and lower-triangular factor of `q(u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState {
    pub z: Vec<IndexPoint>,
    pub mean: DVector<f64>,
    /// Lower triangular with positive diagonal; covariance is `chol * cholᵀ`.
    pub chol: DMatrix<f64>,
}

impl VariationalState {
    pub fn new(z: Vec<IndexPoint>, mean: DVector<f64>, chol: DMatrix<f64>) -> Result<Self> {
        let m = z.len();
        if mean.len() != m || chol.nrows() != m || chol.ncols() != m {
            return Err(CalibError::InvalidInput(format!(
                "variational state dimensions disagree: {m} inducing points, mean {}, factor {}x{}",
                mean.len(),
                chol.nrows(),
                chol.ncols()
            )));
        }
        for i in 0..m {
            if !(chol[(i, i)] > 0.0) {
                return Err(CalibError::InvalidInput(format!(
                    "factor diagonal entry {i} is not positive"
                )));
            }
            for j in (i + 1)..m {
                if chol[(i, j)] != 0.0 {
                    return Err(CalibError::InvalidInput("factor is not lower triangular".into()));
                }
            }
        }
        Ok(VariationalState { z, mean, chol })
    }

    /// `q(u)` equal to the prior: `m = 0`, `R = chol(Kzz)`.
    pub fn prior(z: Vec<IndexPoint>, assign: &KernelAssignment) -> Result<Self> {
        let kzz = build_cov(assign, &z, &z)?;
        let l = jittered_cholesky(&kzz)?.l();
        let m = z.len();
        Ok(VariationalState { z, mean: DVector::zeros(m), chol: l })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let m = self.len();
        let mut packed = Vec::with_capacity(m * (m + 1) / 2);
        for i in 0..m {
            for j in 0..=i {
                packed.push(self.chol[(i, j)]);
            }
        }
        Checkpoint {
            m,
            z: self.z.iter().map(|p| (p.time, p.sensor, p.param)).collect(),
            mean: self.mean.iter().copied().collect(),
            chol_packed: packed,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let m = c.m;
        if c.z.len() != m || c.mean.len() != m || c.chol_packed.len() != m * (m + 1) / 2 {
            return Err(CalibError::InvalidInput("checkpoint arrays have inconsistent sizes".into()));
        }
        let mut chol = DMatrix::zeros(m, m);
        let mut k = 0;
        for i in 0..m {
            for j in 0..=i {
                chol[(i, j)] = c.chol_packed[k];
                k += 1;
            }
        }
        let z = c.z.iter().map(|&(t, s, p)| IndexPoint::new(t, s, p)).collect();
        VariationalState::new(z, DVector::from_vec(c.mean.clone()), chol)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let c: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&c)
    }
}

/// Serialized form of a [`VariationalState`]: `R` is packed row by row over
/// its lower triangle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub m: usize,
    pub z: Vec<(f64, SensorId, usize)>,
    pub mean: Vec<f64>,
    pub chol_packed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBatch {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBatch {
    pub fn marginal_variances(&self) -> Vec<f64> {
        self.cov.diagonal().iter().map(|v| v.max(0.0)).collect()
    }
}

/// Posterior `q(f)` at `xs` given the variational state.
pub fn predict_q(
    xs: &[IndexPoint],
    state: &VariationalState,
    assign: &KernelAssignment,
) -> Result<GaussianBatch> {
    let kzz = build_cov(assign, &state.z, &state.z)?;
    let lz = jittered_cholesky(&kzz)?.l();
    let kzx = build_cov(assign, &state.z, xs)?;
    let kxx = build_cov(assign, xs, xs)?;
    // V = Lz⁻¹ Kzx, so Kxz Kzz⁻¹ Kzx = Vᵀ V
    let v = crate::linalg::solve_lower_mat(&lz, &kzx);
    // Aᵀ = Kzz⁻¹ Kzx = Lz⁻ᵀ V
    let at = lz.tr_solve_lower_triangular(&v).expect("inducing factor is singular");
    let mean = at.transpose() * &state.mean;
    let b = at.transpose() * &state.chol;
    let mut cov = kxx - v.transpose() * &v + &b * b.transpose();
    cov = (&cov + cov.transpose()) * 0.5;
    for i in 0..cov.nrows() {
        if cov[(i, i)] < 0.0 {
            cov[(i, i)] = 0.0;
        }
    }
    Ok(GaussianBatch { mean, cov })
}

/// `KL(N(m, R Rᵀ) || N(0, K))` in closed form.
pub fn kl_gaussian(state: &VariationalState, kzz: &DMatrix<f64>) -> Result<f64> {
    let m = state.len();
    if kzz.nrows() != m || kzz.ncols() != m {
        return Err(CalibError::InvalidInput("prior covariance has the wrong size".into()));
    }
    let lk = jittered_cholesky(kzz)?.l();
    let a = crate::linalg::solve_lower_mat(&lk, &state.chol);
    let b = crate::linalg::solve_lower(&lk, &state.mean);
    let trace = a.norm_squared();
    let maha = b.norm_squared();
    let logdet_k = logdet_from_chol(&lk);
    let logdet_s: f64 = 2.0 * state.chol.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>();
    Ok(0.5 * (trace + maha - m as f64 + logdet_k - logdet_s))
}

/// Reparameterized draw `mean + L eps` with `L` the Cholesky factor of `cov`.
pub fn sample_q(dist: &GaussianBatch, eps: &[f64]) -> Result<DVector<f64>> {
    let n = dist.mean.len();
    if eps.len() != n {
        return Err(CalibError::InvalidInput(format!(
            "expected {n} standard-normal draws, got {}",
            eps.len()
        )));
    }
    let l = robust_cholesky(&dist.cov)?;
    Ok(&dist.mean + l * DVector::from_column_slice(eps))
}
