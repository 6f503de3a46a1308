use std::f64::consts::PI;

use calibnet::gp::VariationalState;
use calibnet::inference::{BatchPlan, Engine, InducingLayout, PairLikelihood};
use calibnet::kernels::{build_cov, IndexPoint, KernelAssignment, KernelSpec, SensorKind};
use calibnet::pair::*;
use calibnet::SensorId;

fn table(n_low: u32) -> SensorTable {
    let mut s = vec![SensorInfo { id: SensorId(0), sensor_type: SensorType::Static, is_reference: true }];
    for i in 1..=n_low {
        s.push(SensorInfo { id: SensorId(i), sensor_type: SensorType::Mobile, is_reference: false });
    }
    SensorTable::new(s).unwrap()
}

fn rules(variance: f64, lengthscale: f64) -> KernelAssignment {
    KernelAssignment::new()
        .with_rule(SensorKind::Static, None, KernelSpec::Eq { variance, lengthscale })
        .with_rule(SensorKind::Mobile, None, KernelSpec::Eq { variance, lengthscale })
}

fn toy_records() -> Vec<ColocationRecord> {
    // 3 sensors, 10 records touching every pairing
    let pairs = [(0, 1), (1, 2), (0, 2), (2, 1), (1, 0), (0, 1), (2, 0), (1, 2), (0, 2), (1, 2)];
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            let t = 1.0 + 0.9 * i as f64;
            ColocationRecord::new(t, SensorId(a), SensorId(b), 20.0 + 3.0 * i as f64, 24.0 + 2.5 * i as f64)
        })
        .collect()
}

fn perturbed_theta(layout: &InducingLayout, scale: f64) -> Vec<f64> {
    let mut theta = layout.prior_whitened().pack();
    for (i, t) in theta.iter_mut().enumerate() {
        *t += scale * (((i * 37) % 17) as f64 / 8.0 - 1.0);
    }
    theta
}

fn max_relative_error<L: PairLikelihood>(engine: &Engine<'_, L>, theta: &[f64], weights: &[f64]) -> f64 {
    let items = engine.full_batch(weights);
    let mut grad = vec![0.0; theta.len()];
    engine.evaluate(theta, &items, 3, 11, 0, Some(&mut grad)).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for i in 0..theta.len() {
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[i] += h;
        tm[i] -= h;
        let fp = engine.evaluate(&tp, &items, 3, 11, 0, None).unwrap();
        let fm = engine.evaluate(&tm, &items, 3, 11, 0, None).unwrap();
        let fd = (fp - fm) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1e-6 * scale);
        worst = worst.max((fd - grad[i]).abs() / denom);
    }
    worst
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    let sensors = table(2);
    let data = toy_records();
    let cfg = LikelihoodConfig { sigma2: 4.0, gamma2: 900.0 };
    for phi in [CalibrationFunction::LogScale, CalibrationFunction::Linear, CalibrationFunction::Scale] {
        let assign = sensors.bind(&rules(0.5, 4.0));
        let z = inducing_points(&sensors, phi.n_params(), (0.0, 10.0), 3).unwrap();
        let layout = InducingLayout::new(&z, &assign).unwrap();
        let model = PairModel { phi, cfg, sensors: &sensors };
        let engine = Engine::new(&model, &layout, &data).unwrap();
        let mut theta = perturbed_theta(&layout, 0.1);
        if phi != CalibrationFunction::LogScale {
            // keep gains away from zero
            for (i, p) in z.iter().enumerate() {
                if p.param == 0 {
                    theta[i] += 3.0;
                }
            }
        }
        let weights: Vec<f64> = (0..data.len()).map(|i| 0.5 + 0.1 * i as f64).collect();
        let err = max_relative_error(&engine, &theta, &weights);
        assert!(err < 1e-4, "{phi:?}: max relative error {err}");
    }
}

fn simpson_2d(f: impl Fn(f64, f64) -> f64, lo: (f64, f64), hi: (f64, f64), n: usize) -> f64 {
    let w = |i: usize| if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
    let hx = (hi.0 - lo.0) / n as f64;
    let hy = (hi.1 - lo.1) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        for j in 0..=n {
            acc += w(i) * w(j) * f(lo.0 + i as f64 * hx, lo.1 + j as f64 * hy);
        }
    }
    acc * hx * hy / 9.0
}

#[test]
fn likelihood_integrates_to_one_over_readings() {
    let sensors = table(2);
    let cfg = LikelihoodConfig { sigma2: 1.5, gamma2: 6.0 };
    let cases: [(CalibrationFunction, Vec<f64>, Vec<f64>); 2] = [
        (CalibrationFunction::Linear, vec![1.3, 0.4], vec![0.7, -0.9]),
        (CalibrationFunction::LogScale, vec![0.25], vec![-0.4]),
    ];
    for (phi, f1, f2) in cases {
        // calibrated values have sd <= sqrt(7.5) ~ 2.74; bounds cover >12 sd in raw units
        let (g1, g2) = (phi.apply(1.0, &f1).unwrap().0 - phi.apply(0.0, &f1).unwrap().0, phi.apply(1.0, &f2).unwrap().0 - phi.apply(0.0, &f2).unwrap().0);
        let (c1, c2) = (phi.apply(0.0, &f1).unwrap().0, phi.apply(0.0, &f2).unwrap().0);
        let half = 40.0;
        let lo = ((-c1 - half) / g1, (-c2 - half) / g2);
        let hi = ((-c1 + half) / g1, (-c2 + half) / g2);
        let total = simpson_2d(
            |y1, y2| {
                let r = ColocationRecord::new(0.0, SensorId(1), SensorId(2), y1, y2);
                pair_loglik(&r, &f1, &f2, phi, &sensors, &cfg).unwrap().exp()
            },
            lo,
            hi,
            600,
        );
        assert!((total - 1.0).abs() < 1e-6, "{phi:?}: {total}");
    }
}

#[test]
fn elbo_is_invariant_to_record_order() {
    let sensors = table(2);
    let data = toy_records();
    let mut rev = data.clone();
    rev.reverse();
    let cfg = LikelihoodConfig { sigma2: 4.0, gamma2: 900.0 };
    let r = rules(0.5, 4.0);
    let z = inducing_points(&sensors, 1, (0.0, 10.0), 3).unwrap();
    let st = VariationalState::prior(z, &sensors.bind(&r)).unwrap();
    let w = vec![1.0; data.len()];
    let a = elbo(&st, &data, CalibrationFunction::LogScale, &sensors, &r, &cfg, 4, &w, 5).unwrap();
    let b = elbo(&st, &rev, CalibrationFunction::LogScale, &sensors, &r, &cfg, 4, &w, 5).unwrap();
    assert_eq!(a, b);
}

/// Log marginal likelihood of two records sharing one time point, by
/// quadrature over the two latent gains in whitened coordinates.
#[test]
fn elbo_lower_bounds_marginal_likelihood() {
    let sensors = table(2);
    let cfg = LikelihoodConfig { sigma2: 2.0, gamma2: 400.0 };
    let r = rules(0.3, 5.0);
    let data = vec![
        ColocationRecord::new(2.0, SensorId(1), SensorId(2), 14.0, 11.0),
        ColocationRecord::new(2.0, SensorId(0), SensorId(1), 12.0, 15.0),
    ];
    let assign = sensors.bind(&r);
    let pts = [IndexPoint::new(2.0, SensorId(1), 0), IndexPoint::new(2.0, SensorId(2), 0)];
    let k = build_cov(&assign, &pts, &pts).unwrap();
    let sd = [k[(0, 0)].sqrt(), k[(1, 1)].sqrt()];
    let phi = CalibrationFunction::LogScale;
    let lik = |f1: f64, f2: f64| {
        pair_loglik(&data[0], &[f1], &[f2], phi, &sensors, &cfg).unwrap()
            + pair_loglik(&data[1], &[], &[f1], phi, &sensors, &cfg).unwrap()
    };
    // the gains are independent a priori, so integrate against two normals
    let integrand = |a: f64, b: f64| {
        let dens = (-0.5 * (a * a + b * b)).exp() / (2.0 * PI);
        dens * lik(a * sd[0], b * sd[1]).exp()
    };
    let evidence = simpson_2d(integrand, (-9.0, -9.0), (9.0, 9.0), 900).ln();

    let z = inducing_points(&sensors, 1, (0.0, 4.0), 3).unwrap();
    let layout = InducingLayout::new(&z, &assign).unwrap();
    let model = PairModel { phi, cfg, sensors: &sensors };
    let engine = Engine::new(&model, &layout, &data).unwrap();
    let items = engine.full_batch(&[1.0, 1.0]);
    for scale in [0.0, 0.2, 0.5] {
        let theta = perturbed_theta(&layout, scale);
        let bound = engine.evaluate(&theta, &items, 20000, 3, 0, None).unwrap();
        assert!(bound <= evidence + 1e-3, "ELBO {bound} exceeds log evidence {evidence}");
    }
}

fn loglik_at_zero(data: &[ColocationRecord], sensors: &SensorTable, cfg: &LikelihoodConfig) -> Vec<f64> {
    data.iter()
        .map(|r| {
            let c = |s| if sensors.is_reference(s).unwrap() { vec![] } else { vec![0.1] };
            pair_loglik(r, &c(r.s1), &c(r.s2), CalibrationFunction::LogScale, sensors, cfg).unwrap()
        })
        .collect()
}

#[test]
fn weighted_minibatch_is_unbiased() {
    let sensors = table(2);
    let data = toy_records();
    let cfg = LikelihoodConfig { sigma2: 4.0, gamma2: 900.0 };
    let ll = loglik_at_zero(&data, &sensors, &cfg);
    let full: f64 = ll.iter().sum();
    let iw = make_importance_weights(&data, &sensors, 3.0).unwrap();
    let plan = BatchPlan::Sampled { probs: iw.probs, weights: iw.weights, batch: 4 };
    let dist = plan.sampler().unwrap().unwrap();
    let n = 10_000;
    let est: Vec<f64> = (0..n)
        .map(|step| plan.draw(&dist, |i| i as u64, 17, step).iter().map(|it| it.weight * ll[it.index]).sum())
        .collect();
    let mean = est.iter().sum::<f64>() / n as f64;
    let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - full).abs() < 3.0 * se, "mean {mean} vs {full} (se {se})");
}

#[test]
fn doubled_weights_on_half_the_data_match_in_expectation() {
    let sensors = table(2);
    let half = toy_records();
    let mut doubled = half.clone();
    // duplicates shifted by a tiny time offset so they get their own draws
    doubled.extend(half.iter().map(|r| ColocationRecord { t1: r.t1 + 1e-9, t2: r.t2 + 1e-9, ..*r }));
    let cfg = LikelihoodConfig { sigma2: 4.0, gamma2: 900.0 };
    let r = rules(0.5, 4.0);
    let z = inducing_points(&sensors, 1, (0.0, 10.0), 3).unwrap();
    let st = VariationalState::prior(z, &sensors.bind(&r)).unwrap();
    let diffs: Vec<f64> = (0..200)
        .map(|seed| {
            let a = elbo(&st, &doubled, CalibrationFunction::LogScale, &sensors, &r, &cfg, 1, &vec![1.0; 20], seed).unwrap();
            let b = elbo(&st, &half, CalibrationFunction::LogScale, &sensors, &r, &cfg, 1, &[2.0; 10], seed + 1000).unwrap();
            a - b
        })
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let se = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    assert!(mean.abs() < 3.0 * se, "mean difference {mean} (se {se})");
}

fn anchoring_toy() -> (SensorTable, Vec<ColocationRecord>) {
    let sensors = table(1);
    let data = (0..50)
        .map(|i| {
            let t = 2.0 * i as f64;
            let p = 50.0 + 30.0 * (2.0 * PI * t / 24.0).sin();
            ColocationRecord::new(t, SensorId(0), SensorId(1), p, p / 2.0)
        })
        .collect();
    (sensors, data)
}

fn anchoring_opts(seed: u64) -> TrainOptions {
    TrainOptions {
        steps: 2000,
        batch_size: 256,
        learning_rate: 0.02,
        final_learning_rate: Some(0.002),
        inducing_per_gp: 10,
        seed,
        ..Default::default()
    }
}

#[test]
fn reference_anchors_a_constant_gain() {
    let (sensors, data) = anchoring_toy();
    let r = rules(4.0, 60.0);
    let cfg = LikelihoodConfig { sigma2: 1.0, gamma2: LikelihoodConfig::default_gamma2(&data) };
    let phi = CalibrationFunction::Scale;
    let fit = train(&data, &sensors, phi, &r, &cfg, &anchoring_opts(3)).unwrap();
    let q: Vec<Query> = data.iter().map(|d| Query { sensor: SensorId(1), time: d.t2, raw: Some(d.y2) }).collect();
    let pred = predict_calibration(&fit.state, &q, phi, &sensors, &r, 400, 1).unwrap();
    let mut covered = 0;
    for p in &pred {
        assert!((1.9..=2.1).contains(&p.param_mean[0]), "gain {} at t={}", p.param_mean[0], p.time);
        let mut s: Vec<f64> = p.param_samples.iter().map(|v| v[0]).collect();
        s.sort_by(f64::total_cmp);
        let (lo, hi) = (s[(0.025 * s.len() as f64) as usize], s[(0.975 * s.len() as f64) as usize - 1]);
        if lo <= 2.0 && 2.0 <= hi {
            covered += 1;
        }
    }
    assert!(covered as f64 >= 0.85 * pred.len() as f64, "coverage {covered}/{}", pred.len());

    let k = fit.trace.len() / 10;
    let head = fit.trace[..k].iter().sum::<f64>() / k as f64;
    let tail = fit.trace[fit.trace.len() - k..].iter().sum::<f64>() / k as f64;
    assert!(tail > head, "ELBO did not improve: {head} -> {tail}");
}

#[test]
fn training_is_seed_deterministic() {
    let (sensors, data) = anchoring_toy();
    let r = rules(4.0, 60.0);
    let cfg = LikelihoodConfig { sigma2: 1.0, gamma2: 1e4 };
    let opts = TrainOptions { steps: 50, batch_size: 16, oversample_factor: 2.0, ..anchoring_opts(9) };
    let a = train(&data, &sensors, CalibrationFunction::LogScale, &r, &cfg, &opts).unwrap();
    let b = train(&data, &sensors, CalibrationFunction::LogScale, &r, &cfg, &opts).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.trace, b.trace);
    let c = train(&data, &sensors, CalibrationFunction::LogScale, &r, &cfg, &TrainOptions { seed: 10, ..opts }).unwrap();
    assert_ne!(a.state, c.state);
}

#[test]
fn nonfinite_elbo_aborts_with_diagnostic() {
    let (sensors, data) = anchoring_toy();
    let r = rules(4.0, 60.0);
    // a learning rate this large overflows exp(f) within a few steps
    let cfg = LikelihoodConfig { sigma2: 1e-6, gamma2: 1e4 };
    let opts = TrainOptions { steps: 500, learning_rate: 1e6, ..anchoring_opts(0) };
    match train(&data, &sensors, CalibrationFunction::LogScale, &r, &cfg, &opts) {
        Err(calibnet::CalibError::NonFiniteElbo { step, first, last }) => {
            assert!(first <= last && last < data.len());
            assert!(step < 500);
        }
        other => panic!("expected NonFiniteElbo, got {:?}", other.map(|f| f.trace.len())),
    }
}
