//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{CalibError, Result};

/// Relative jitter added to every diagonal entry before the first attempt.
pub const BASE_JITTER: f64 = 1e-6;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-4;

/// Cholesky factor of `k + jitter * diag(k)`, escalating the relative jitter
/// by 10x from [`BASE_JITTER`] up to [`MAX_JITTER`].
///
/// Jitter is proportional to each diagonal entry, so factoring a
/// block-diagonal matrix block by block gives the same factor as factoring
/// it whole.
pub fn jittered_cholesky(k: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    let mut rel = BASE_JITTER;
    while rel <= MAX_JITTER * (1.0 + 1e-9) {
        let mut kj = k.clone();
        for i in 0..n {
            let d = k[(i, i)];
            kj[(i, i)] = d + rel * d.abs().max(f64::MIN_POSITIVE);
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok(c);
        }
        rel *= 10.0;
    }
    Err(CalibError::Numerical(format!(
        "matrix of size {n} not positive definite after jitter {MAX_JITTER:e}"
    )))
}

/// Cholesky for small sample covariances where entries can be exactly zero
/// (for example a latent with no prior variance left). Adds an absolute
/// floor to the diagonal when the plain factorization fails.
pub fn robust_cholesky(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = Cholesky::new(s.clone()) {
        return Ok(c.l());
    }
    let scale = s.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
    let mut jitter = 1e-12 * scale;
    for _ in 0..8 {
        let mut sj = s.clone();
        for i in 0..s.nrows() {
            sj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(sj) {
            return Ok(c.l());
        }
        jitter *= 10.0;
    }
    Err(CalibError::Numerical("sample covariance is not positive semi-definite".into()))
}

/// `log |det(L Lᵀ)|` for a lower-triangular `l` with positive diagonal.
pub fn logdet_from_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Solves `L x = b` for lower-triangular `l`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor has a zero on its diagonal")
}

pub fn solve_lower_mat(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor has a zero on its diagonal")
}

/// Reverse-mode adjoint of the Cholesky factorization.
///
/// Given `L = chol(S)` and the adjoint `l_bar` of a scalar loss with respect
/// to the lower triangle of `L`, returns the symmetric gradient `G` such that
/// `d loss = tr(G dS)` for any symmetric perturbation `dS`.
pub fn cholesky_adjoint(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    // P = Phi(Lᵀ L̄): lower triangle with the diagonal halved.
    let mut p = l.transpose() * l_bar;
    for i in 0..n {
        for j in (i + 1)..n {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    // X = L⁻ᵀ P L⁻¹
    let y = l
        .tr_solve_lower_triangular(&p)
        .expect("triangular factor has a zero on its diagonal");
    let xt = l
        .tr_solve_lower_triangular(&y.transpose())
        .expect("triangular factor has a zero on its diagonal");
    let x = xt.transpose();
    (&x + x.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_adjoint_matches_finite_differences() {
        // loss(S) = sum_ij W_ij L_ij with L = chol(S)
        let s = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let w = DMatrix::from_row_slice(3, 3, &[0.3, 0.0, 0.0, -1.2, 0.7, 0.0, 0.4, 2.0, -0.5]);
        let loss = |s: &DMatrix<f64>| {
            let l = Cholesky::new(s.clone()).unwrap().l();
            l.component_mul(&w).sum()
        };
        let l = Cholesky::new(s.clone()).unwrap().l();
        let g = cholesky_adjoint(&l, &w);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..=i {
                let mut sp = s.clone();
                let mut sm = s.clone();
                sp[(i, j)] += h;
                sm[(i, j)] -= h;
                if i != j {
                    sp[(j, i)] += h;
                    sm[(j, i)] -= h;
                }
                let fd = (loss(&sp) - loss(&sm)) / (2.0 * h);
                let an = if i == j { g[(i, i)] } else { 2.0 * g[(i, j)] };
                assert!((fd - an).abs() < 1e-7, "({i},{j}) fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn jitter_scales_with_diagonal() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = jittered_cholesky(&k).unwrap();
        let l = c.l();
        assert!(l[(1, 1)] > 0.0);
    }
}
