use std::path::Path;
use std::process::{Command, Output};

use calibnet::io::{read_colocations, read_item_truth, read_labels, read_sensors, read_tests};
use calibnet::synth::{gen_categorical, gen_pollution, CategoricalScenario, PollutionScenario};

const QUICK_VI: &str = r#"
[optimizer]
steps = 60
inducing_per_gp = 6
learning_rate = 0.02

[likelihood]
sigma2 = 100.0

[prediction]
samples = 8

[[kernels]]
sensor_kind = "static"
kernel = { kind = "eq", variance = 0.3, lengthscale = 500.0 }

[[kernels]]
sensor_kind = "mobile"
kernel = { kind = "eq", variance = 0.3, lengthscale = 160.0 }

[preprocess]
min = 0.0
"#;

fn calibnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calibnet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = calibnet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_calibrate_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("quick.toml");
    std::fs::write(&cfg, QUICK_VI).unwrap();
    let sim = d.join("sim");
    ok(&["simulate", "pollution", "--noise", "10", "--seed", "2", "--out", s(&sim)]);
    let vi = d.join("vi");
    ok(&[
        "calibrate-vi", "--config", s(&cfg), "--colocations", s(&sim.join("colocations.csv")),
        "--sensors", s(&sim.join("sensors.csv")), "--queries", s(&sim.join("tests.csv")), "--out", s(&vi),
    ]);
    for f in ["state.json", "trace.csv", "predictions.csv", "calibrated.csv", "manifest.json", "config.toml"] {
        assert!(vi.join(f).exists(), "missing {f}");
    }
    let header = std::fs::read_to_string(vi.join("predictions.csv")).unwrap();
    let first = header.lines().next().unwrap();
    assert!(first.starts_with("sensor,time,param,post_mean,post_std,sample_0,"));
    assert!(first.ends_with(",sample_7"));

    let metrics = d.join("metrics.json");
    ok(&["evaluate", "continuous", "--predictions", s(&vi.join("calibrated.csv")), "--truth", s(&sim.join("tests.csv")), "--out", s(&metrics)]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(m["calibrated"]["nmse"].as_f64().unwrap().is_finite());
    assert!(m["calibrated"]["nlpd"].as_f64().is_some());
    assert!(m["raw"]["nmse"].as_f64().unwrap() > 0.0);

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(vi.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "calibrate-vi");
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn evaluate_identical_predictions_gives_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tests.csv"), "sensor,time,raw,true_value,true_scaling\n3,1.5,10,20,0.5\n3,2.5,12,24,0.5\n4,1.5,30,20,1.5\n").unwrap();
    std::fs::write(d.join("pred.csv"), "sensor,time,raw,mean,std\n3,1.5,10,20,\n3,2.5,12,24,\n4,1.5,30,20,\n").unwrap();
    ok(&["evaluate", "continuous", "--predictions", s(&d.join("pred.csv")), "--truth", s(&d.join("tests.csv")), "--out", s(&d.join("m.json"))]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(m["calibrated"]["nmse"], 0.0);
    assert_eq!(m["calibrated"]["mae"], 0.0);
    assert!(m["calibrated"].get("nlpd").is_none());

    std::fs::write(d.join("truth.csv"), "item_id,label\n1,0\n2,2\n").unwrap();
    std::fs::write(d.join("post.csv"), "item_id,method,p_0,p_1,p_2\n1,a,1,0,0\n2,a,0,0,1\n1,b,0,1,0\n2,b,0,0,1\n").unwrap();
    ok(&["evaluate", "categorical", "--predictions", s(&d.join("post.csv")), "--truth", s(&d.join("truth.csv")), "--out", s(&d.join("c.json"))]);
    let c: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("c.json")).unwrap()).unwrap();
    assert_eq!(c["a"]["accuracy"], 1.0);
    assert_eq!(c["a"]["nlpd"], 0.0);
    assert_eq!(c["b"]["accuracy"], 0.5);
    assert_eq!(c["b"]["nlpd"], "inf");
}

#[test]
fn simulated_files_reload_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    ok(&["simulate", "pollution", "--noise", "5", "--seed", "7", "--out", s(&out)]);
    let expect = gen_pollution(&PollutionScenario { noise_scale: 5.0, ..Default::default() }, 7).unwrap();
    assert_eq!(read_colocations(&out.join("colocations.csv")).unwrap(), expect.colocations);
    assert_eq!(read_sensors(&out.join("sensors.csv")).unwrap(), expect.sensors);
    assert_eq!(read_tests(&out.join("tests.csv")).unwrap(), expect.tests);

    let out = dir.path().join("c");
    ok(&["simulate", "categorical", "--seed", "3", "--out", s(&out)]);
    let expect = gen_categorical(&CategoricalScenario::default(), 3).unwrap();
    assert_eq!(read_labels(&out.join("labels.csv")).unwrap(), expect.labels);
    assert_eq!(read_sensors(&out.join("labelers.csv")).unwrap(), expect.labelers);
    let train = read_item_truth(&out.join("truth_train.csv")).unwrap();
    assert_eq!(train.keys().copied().collect::<Vec<_>>(), expect.train_items);
    assert!(train.iter().all(|(i, l)| expect.truth[i] == *l));
}

#[test]
fn bad_inputs_fail_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("bad.toml");
    std::fs::write(&cfg, "[optimizer]\nlearning_rate = -1.0\n").unwrap();
    std::fs::write(d.join("c.csv"), "t1,t2,sensor1,sensor2,y1,y2\n0,0,1,0,1,1\n").unwrap();
    std::fs::write(d.join("s.csv"), "id,type,is_reference\n0,static,true\n1,static,false\n").unwrap();
    let args = |cfg: &Path| {
        vec![
            "calibrate-vi".to_string(), "--config".into(), s(cfg).into(), "--colocations".into(),
            s(&d.join("c.csv")).into(), "--sensors".into(), s(&d.join("s.csv")).into(), "--out".into(), s(&d.join("o")).into(),
        ]
    };
    let run = |a: Vec<String>| calibnet(&a.iter().map(String::as_str).collect::<Vec<_>>());

    let out = run(args(&cfg));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("optimizer.learning_rate"));

    std::fs::write(&cfg, "[optimizer]\nlearning_rat = 0.1\n").unwrap();
    let out = run(args(&cfg));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    std::fs::write(&cfg, "").unwrap();
    std::fs::write(d.join("c.csv"), "t1,t2,sensor1,sensor2,y1,y2\n0,0,1,0,1,1\n0,0,1,0,abc,1\n").unwrap();
    let out = run(args(&cfg));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");

    let out = calibnet(&["simulate", "pollution", "--out", s(&d.join("x")), "--scenario", s(&d.join("missing.toml"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));
}
