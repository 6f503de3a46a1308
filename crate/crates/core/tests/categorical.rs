use calibnet::categorical::{
    pair_records, predict_species, train_categorical, Label, SpeciesPredictor, SpeciesPrior,
};
use calibnet::gp::VariationalState;
use calibnet::kernels::{IndexPoint, KernelAssignment, KernelSpec, SensorKind};
use calibnet::pair::{SensorInfo, SensorTable, SensorType, TrainOptions};
use calibnet::SensorId;
use nalgebra::{DMatrix, DVector};

fn table(refs: &[u32], others: &[u32]) -> SensorTable {
    let info = |id: u32, is_reference| SensorInfo { id: SensorId(id), sensor_type: SensorType::Static, is_reference };
    SensorTable::new(refs.iter().map(|&i| info(i, true)).chain(others.iter().map(|&i| info(i, false)))).unwrap()
}

fn bias_rules(variance: f64) -> KernelAssignment {
    KernelAssignment::new().with_rule(SensorKind::Static, None, KernelSpec::Bias { variance })
}

/// A near-deterministic state whose latents reproduce the given confusion
/// matrices (row-major, column-stochastic) at every time.
fn fixed_state(confusions: &[(u32, Vec<f64>)], a: usize) -> VariationalState {
    let mut z = Vec::new();
    let mut mean = Vec::new();
    for (id, p) in confusions {
        for k in 0..a * a {
            z.push(IndexPoint::new(0.0, SensorId(*id), k));
            mean.push(p[k].ln());
        }
    }
    let n = z.len();
    VariationalState::new(z, DVector::from_vec(mean), DMatrix::identity(n, n) * 1e-9).unwrap()
}

#[test]
fn two_fixed_labelers_match_enumeration() {
    let p1 = vec![0.7, 0.2, 0.1, 0.2, 0.5, 0.3, 0.1, 0.3, 0.6];
    let p2 = vec![0.4, 0.1, 0.3, 0.3, 0.8, 0.3, 0.3, 0.1, 0.4];
    let prior = SpeciesPrior::new(vec![0.5, 0.2, 0.3]).unwrap();
    let labelers = table(&[0], &[1, 2]);
    let st = fixed_state(&[(1, p1.clone()), (2, p2.clone())], 3);
    let rules = bias_rules(1e-4);
    for y1 in 0..3 {
        for y2 in 0..3 {
            let got = predict_species(&[(SensorId(1), y1, 4.0), (SensorId(2), y2, 9.0)], &st, &labelers, &rules, &prior, 20, 0)
                .unwrap();
            let joint: Vec<f64> = (0..3).map(|psi| p1[y1 * 3 + psi] * p2[y2 * 3 + psi] * prior.probs()[psi]).collect();
            let z: f64 = joint.iter().sum();
            for psi in 0..3 {
                assert!((got[psi] - joint[psi] / z).abs() < 1e-4, "y=({y1},{y2}) psi={psi}: {} vs {}", got[psi], joint[psi] / z);
            }
        }
    }
}

#[test]
fn uninformative_labelers_return_prior_and_reference_is_one_hot() {
    let prior = SpeciesPrior::new(vec![0.2, 0.5, 0.3]).unwrap();
    let labelers = table(&[0], &[1]);
    let st = fixed_state(&[(1, vec![1.0 / 3.0; 9])], 3);
    let rules = bias_rules(1e-4);
    let got = predict_species(&[(SensorId(1), 2, 1.0)], &st, &labelers, &rules, &prior, 10, 3).unwrap();
    for (g, p) in got.iter().zip(prior.probs()) {
        assert!((g - p).abs() < 1e-4, "{g} vs {p}");
    }
    let got = predict_species(&[(SensorId(0), 1, 1.0), (SensorId(1), 0, 1.0)], &st, &labelers, &rules, &prior, 10, 3).unwrap();
    assert_eq!(got, vec![0.0, 1.0, 0.0]);
}

#[test]
fn labeler_order_does_not_matter() {
    let labelers = table(&[0], &[1, 2, 3]);
    let mut z = Vec::new();
    for id in 1..=3 {
        for k in 0..4 {
            z.push(IndexPoint::new(0.0, SensorId(id), k));
            z.push(IndexPoint::new(50.0, SensorId(id), k));
        }
    }
    let n = z.len();
    let mean = DVector::from_fn(n, |i, _| ((i * 7) % 5) as f64 * 0.4 - 0.8);
    let chol = DMatrix::from_fn(n, n, |i, j| if i == j { 0.5 } else if i > j { 0.01 * ((i + j) % 3) as f64 } else { 0.0 });
    let st = VariationalState::new(z, mean, chol).unwrap();
    let rules = KernelAssignment::new()
        .with_rule(SensorKind::Static, None, KernelSpec::Eq { variance: 2.0, lengthscale: 30.0 });
    let prior = SpeciesPrior::new(vec![0.6, 0.4]).unwrap();
    let pred = SpeciesPredictor::new(&st, &labelers, &rules, &prior, 50, 11).unwrap();
    let labels = vec![(SensorId(1), 0, 3.0), (SensorId(2), 1, 17.0), (SensorId(3), 1, 40.0), (SensorId(1), 1, 44.0)];
    let base = pred.predict(&labels).unwrap();
    let mut rev = labels.clone();
    rev.reverse();
    assert_eq!(pred.predict(&rev).unwrap(), base);
    let rotated = [&labels[2..], &labels[..2]].concat();
    assert_eq!(pred.predict(&rotated).unwrap(), base);
    assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

fn perfect_labeler_data(n: u64, a: usize) -> Vec<Label> {
    let mut labels = Vec::new();
    for i in 0..n {
        let y = (i as usize * 7 + i as usize / 3) % a;
        labels.push(Label { item: i, labeler: SensorId(0), label: y, order: i as f64 });
        labels.push(Label { item: i, labeler: SensorId(1), label: y, order: i as f64 });
    }
    labels
}

fn quick_opts(seed: u64) -> TrainOptions {
    TrainOptions {
        samples: 5,
        batch_size: 1000,
        steps: 300,
        learning_rate: 0.1,
        final_learning_rate: Some(0.01),
        seed,
        oversample_factor: 1.0,
        inducing_per_gp: 3,
    }
}

#[test]
fn perfect_labeler_recovers_diagonal_confusion() {
    let labels = perfect_labeler_data(60, 3);
    let records = pair_records(&labels);
    let labelers = table(&[0], &[1]);
    let prior = SpeciesPrior::uniform(3);
    let rules = bias_rules(25.0);
    let fit = train_categorical(&records, &labelers, &prior, &rules, &quick_opts(0)).unwrap();
    let head: f64 = fit.trace[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = fit.trace[fit.trace.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail > head, "ELBO did not increase: {head} -> {tail}");
    let pred = SpeciesPredictor::new(&fit.state, &labelers, &rules, &prior, 200, 1).unwrap();
    for t in [0.0, 30.0, 59.0] {
        let p = pred.expected_confusion(SensorId(1), t).unwrap();
        for k in 0..3 {
            assert!(p[k * 3 + k] > 0.9, "t={t} diag {k}: {}", p[k * 3 + k]);
        }
    }
}

#[test]
fn training_is_seed_deterministic() {
    let labels = perfect_labeler_data(20, 2);
    let records = pair_records(&labels);
    let labelers = table(&[0], &[1]);
    let prior = SpeciesPrior::uniform(2);
    let rules = bias_rules(4.0);
    let opts = TrainOptions { steps: 30, batch_size: 8, ..quick_opts(5) };
    let a = train_categorical(&records, &labelers, &prior, &rules, &opts).unwrap();
    let b = train_categorical(&records, &labelers, &prior, &rules, &opts).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.state, b.state);
    let c = train_categorical(&records, &labelers, &prior, &rules, &TrainOptions { seed: 6, ..opts }).unwrap();
    assert_ne!(a.trace, c.trace);
}
