//! Evaluation metrics. NLPDs are summed over points, in nats.

use std::f64::consts::PI;

use serde::Serialize;

use crate::{CalibError, Result};

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CalibError::InvalidInput(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// `sum (pred - truth)^2 / sum (truth - mean(truth))^2`.
pub fn nmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    if truth.len() < 2 {
        return Err(CalibError::InvalidInput("nmse needs at least two points".into()));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let dev: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if dev == 0.0 {
        return Err(CalibError::InvalidInput("nmse undefined for constant truth".into()));
    }
    let err: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(err / dev)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    if truth.is_empty() {
        return Err(CalibError::InvalidInput("mae needs at least one point".into()));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64)
}

/// `sum_i -log N(truth_i; mean_i, std_i^2)`.
pub fn nlpd_gaussian(mean: &[f64], std: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(mean.len(), truth.len())?;
    same_len(std.len(), truth.len())?;
    let mut terms = Vec::with_capacity(truth.len());
    for ((m, s), t) in mean.iter().zip(std).zip(truth) {
        if !(*s > 0.0) {
            return Err(CalibError::InvalidInput(format!("nonpositive predictive std {s}")));
        }
        let z = (t - m) / s;
        terms.push(0.5 * (2.0 * PI).ln() + s.ln() + 0.5 * z * z);
    }
    Ok(compensated_sum(terms))
}

/// Neumaier summation; an infinite term makes the sum infinite.
fn compensated_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in terms {
        if x.is_infinite() {
            return x;
        }
        let t = sum + x;
        c += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + c
}

fn check_posteriors(post: &[Vec<f64>], truth: &[usize]) -> Result<()> {
    same_len(post.len(), truth.len())?;
    for (p, &t) in post.iter().zip(truth) {
        if t >= p.len() {
            return Err(CalibError::InvalidInput(format!("class {t} outside posterior of length {}", p.len())));
        }
        let s: f64 = p.iter().sum();
        if p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(CalibError::InvalidInput("posterior is not a probability vector".into()));
        }
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(post: &[Vec<f64>], truth: &[usize]) -> Result<f64> {
    check_posteriors(post, truth)?;
    if truth.is_empty() {
        return Err(CalibError::InvalidInput("accuracy needs at least one item".into()));
    }
    let hits = post.iter().zip(truth).filter(|(p, &t)| argmax(p) == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `sum_i -log p_i(truth_i)`; infinite when a true class has zero mass.
pub fn nlpd_categorical(post: &[Vec<f64>], truth: &[usize]) -> Result<f64> {
    check_posteriors(post, truth)?;
    Ok(compensated_sum(post.iter().zip(truth).map(|(p, &t)| -p[t].ln())))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContinuousReport {
    pub n: usize,
    pub nmse: f64,
    pub mae: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nlpd: Option<f64>,
}

impl ContinuousReport {
    pub fn compute(pred: &[f64], std: Option<&[f64]>, truth: &[f64]) -> Result<Self> {
        Ok(ContinuousReport {
            n: truth.len(),
            nmse: nmse(pred, truth)?,
            mae: mae(pred, truth)?,
            nlpd: std.map(|s| nlpd_gaussian(pred, s, truth)).transpose()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoricalReport {
    pub n: usize,
    pub accuracy: f64,
    pub nlpd: f64,
}

impl CategoricalReport {
    pub fn compute(post: &[Vec<f64>], truth: &[usize]) -> Result<Self> {
        Ok(CategoricalReport { n: truth.len(), accuracy: accuracy(post, truth)?, nlpd: nlpd_categorical(post, truth)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nmse_examples() {
        let t = [0.0, 1.0, 2.0];
        assert_eq!(nmse(&t, &t).unwrap(), 0.0);
        assert_eq!(nmse(&[1.0; 3], &t).unwrap(), 1.0);
        assert_eq!(nmse(&[0.0, 1.0, 3.0], &t).unwrap(), 0.5);
        assert!(nmse(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(nmse(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.5, 2.5], &[1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(mae(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn nlpd_gaussian_examples() {
        let v = nlpd_gaussian(&[0.0], &[1.0], &[0.0]).unwrap();
        assert!((v - 0.91894).abs() < 1e-5);
        let n = nlpd_gaussian(&[1.0, 2.0, 3.0], &[1.0; 3], &[1.0, 2.0, 3.0]).unwrap();
        assert!((n - 1.5 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!(nlpd_gaussian(&[0.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn nlpd_gaussian_matches_quadrature_of_density() {
        // -log of the density recovered by differentiating a Simpson-integrated CDF
        let (m, s, t) = (1.3, 0.7, 2.1);
        let pdf = |x: f64| (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt());
        let cdf = |x: f64| {
            let (a, n) = (m - 12.0 * s, 4000);
            let h = (x - a) / n as f64;
            let mut acc = pdf(a) + pdf(x);
            for i in 1..n {
                acc += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        let d = 1e-4;
        let dens = (cdf(t + d) - cdf(t - d)) / (2.0 * d);
        let v = nlpd_gaussian(&[m], &[s], &[t]).unwrap();
        assert!((v + dens.ln()).abs() < 1e-6);
    }

    #[test]
    fn categorical_examples() {
        let one_hot = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
        assert_eq!(accuracy(&one_hot, &[1, 0]).unwrap(), 1.0);
        assert_eq!(nlpd_categorical(&one_hot, &[1, 0]).unwrap(), 0.0);
        assert_eq!(nlpd_categorical(&one_hot, &[2, 0]).unwrap(), f64::INFINITY);
        let uniform = vec![vec![1.0 / 3.0; 3]; 127];
        let truth: Vec<usize> = (0..127).map(|i| i % 3).collect();
        let v = nlpd_categorical(&uniform, &truth).unwrap();
        assert_eq!(v, 127.0 * 3f64.ln());
        assert!((v - 139.5).abs() < 0.05);
        // ties resolve to class 0
        assert_eq!(accuracy(&uniform[..3], &[0, 0, 0]).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(
            pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, 0.1f64..5.0), 3..30),
            rot in 0usize..30,
        ) {
            let mut truth: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            truth[0] += 100.0;
            let pred: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let std: Vec<f64> = pairs.iter().map(|p| p.2).collect();
            let k = rot % truth.len();
            let rotate = |v: &[f64]| { let mut v = v.to_vec(); v.rotate_left(k); v };
            let (rt, rp, rs) = (rotate(&truth), rotate(&pred), rotate(&std));
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs());
            prop_assert!(close(nmse(&pred, &truth).unwrap(), nmse(&rp, &rt).unwrap()));
            prop_assert!(close(mae(&pred, &truth).unwrap(), mae(&rp, &rt).unwrap()));
            prop_assert!(close(nlpd_gaussian(&pred, &std, &truth).unwrap(), nlpd_gaussian(&rp, &rs, &rt).unwrap()));
        }

        #[test]
        fn nmse_is_scale_invariant(
            pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..30),
            c in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
        ) {
            let mut truth: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            truth[0] += 100.0;
            let pred: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let a = nmse(&pred, &truth).unwrap();
            let sp: Vec<f64> = pred.iter().map(|v| v * c).collect();
            let st: Vec<f64> = truth.iter().map(|v| v * c).collect();
            let b = nmse(&sp, &st).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }
    }
}
