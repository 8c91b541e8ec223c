use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tailsens")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn file(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

const GAUSSIAN: &str = r#"{"kind": "gaussian_linear", "dim": 2}"#;
const MINSQ: &str = r#"{"kind": "custom", "dim": 1, "params": {"formula": "min_shortfall_squared", "atoms": [0, 1, 2]}}"#;

#[test]
fn es_report_has_expected_shape() {
    let t = tempfile::tempdir().unwrap();
    let model = file(t.path(), "g.json", GAUSSIAN);
    let out = t.path().join("r");
    let o = run(&[
        "es", "--model", &model, "--x", "3,4", "--alpha", "0.95", "--n-samples", "1000000", "--seed", "7", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    let es = r["results"]["tail_estimate"]["es"].as_f64().unwrap();
    assert!((es - 10.314).abs() < 0.04);
    assert_eq!(r["results"]["tail_estimate"]["mode"], "general");
    assert!((r["oracle"]["es"].as_f64().unwrap() - 10.31356).abs() < 1e-5);
    assert!(r["generated_at_unix"].is_u64());
    assert_eq!(r["config"]["model"]["kind"], "gaussian_linear");
    assert_eq!(r["config"]["model"]["params"]["sigma"][1][1], 1.0);
    for key in ["config", "results", "verdicts", "oracle"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn verify_prop1_fixture_passes() {
    let t = tempfile::tempdir().unwrap();
    let model = file(t.path(), "minsq.json", MINSQ);
    let out = t.path().join("p1");
    let o = run(&["verify-prop1", "--model", &model, "--x", "1", "--axis", "1", "--order", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let r = report(&out);
    let ls = &r["results"]["level_set"];
    assert_eq!(ls["estimate"], 0.0);
    assert_eq!(ls["abs_estimate"], 0.0);
    assert_eq!(ls["prob_zero_deriv"], 1.0);
    assert_eq!(ls["verdict"], "pass");
    assert_eq!(r["verdicts"]["proposition1"], "pass");
    assert_eq!(r["oracle"]["level_set"]["estimate"], 0.0);
}

#[test]
fn second_order_gaussian_es_derivative_fails_premise() {
    let t = tempfile::tempdir().unwrap();
    let model = file(t.path(), "g.json", GAUSSIAN);
    let out = t.path().join("d2");
    let o = run(&[
        "es-deriv", "--model", &model, "--x", "3,4", "--alpha", "0.95", "--axis", "1", "--order", "2", "--n-samples",
        "200000", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert_eq!(report(&out)["verdicts"]["tail_monotonicity"], "premise_failed");
}

#[test]
fn additive_second_derivative_passes_premise() {
    let t = tempfile::tempdir().unwrap();
    let model = file(t.path(), "a.json", r#"{"kind": "additive_smooth", "dim": 2}"#);
    let out = t.path().join("a");
    let o = run(&["es-deriv", "--model", &model, "--x", "1,2", "--order", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let v = report(&out)["results"]["tail_estimate"]["derivative"]["value"].as_f64().unwrap();
    assert!((v - 2.0).abs() < 0.02);
}

#[test]
fn not_applicable_exits_two() {
    let t = tempfile::tempdir().unwrap();
    let model = file(t.path(), "a.json", r#"{"kind": "additive_smooth", "dim": 2, "homogeneity_degree": 1}"#);
    let out = t.path().join("na");
    let o = run(&["verify-prop2", "--model", &model, "--x", "1,2", "--n-samples", "1000", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert_eq!(report(&out)["verdicts"]["applicable"], "not_applicable");
    let o = run(&["euler", "--model", &model, "--x", "1,2", "--n-samples", "1000"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn lemma1_controls() {
    assert_eq!(code(&run(&["lemma1-probe", "--family", "empty", "--n-samples", "1000"])), 0);
    assert_eq!(code(&run(&["lemma1-probe", "--family", "unbounded", "--n-samples", "100000"])), 2);
    assert_eq!(code(&run(&["lemma1-probe", "--family", "fixed:0.3", "--n-samples", "10000"])), 2);
}

#[test]
fn usage_and_data_errors_exit_one() {
    let t = tempfile::tempdir().unwrap();
    let model = file(t.path(), "g.json", GAUSSIAN);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["es", "--x", "3,4"])), 1);
    assert_eq!(code(&run(&["es", "--model", &model])), 1);
    assert_eq!(code(&run(&["es", "--model", &model, "--x", "3"])), 1);
    assert_eq!(code(&run(&["es", "--model", &model, "--x", "3,4", "--alpha", "1.5"])), 1);
    assert_eq!(code(&run(&["es", "--model", &model, "--x", "3,4", "--axis", "3"])), 1);
    assert_eq!(code(&run(&["var-deriv", "--model", &model, "--x", "3,4", "--bands", "0.1,0.2"])), 1);
    let bad = file(t.path(), "bad.json", "{\"kind\": \"gaussian_linear\",\n \"dim\": 2,\n \"colour\": 1}");
    let o = run(&["es", "--model", &bad, "--x", "3,4"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn config_schema_violation_names_the_field() {
    let t = tempfile::tempdir().unwrap();
    let cfg = file(t.path(), "cfg.json", r#"{"alpha": 0.9, "sample_count": 10}"#);
    let o = run(&["var", "--config", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sample_count"));
}

#[test]
fn flags_override_config() {
    let t = tempfile::tempdir().unwrap();
    let cfg = file(
        t.path(),
        "cfg.json",
        &format!(r#"{{"model": {GAUSSIAN}, "x": [3, 4], "alpha": 0.9, "n_samples": 5000, "seed": 3}}"#),
    );
    let out = t.path().join("o");
    let o = run(&["var", "--config", &cfg, "--alpha", "0.99", "--no-timestamp", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let r = report(&out);
    assert_eq!(r["config"]["alpha"], 0.99);
    assert_eq!(r["config"]["n_samples"], 5000);
    assert_eq!(r["config"]["seed"], 3);
    assert!(r.get("generated_at_unix").is_none());
}

#[test]
fn simulate_writes_loadable_samples() {
    let t = tempfile::tempdir().unwrap();
    let model = file(t.path(), "g.json", GAUSSIAN);
    let out = t.path().join("s");
    let o = run(&["simulate", "--model", &model, "--x", "3,4", "--axis", "2", "--n-samples", "500", "--seed", "9", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let set = tailsens::sampling::SampleSet::load(out.join("samples.csv")).unwrap();
    assert_eq!(set.len(), 500);
    assert_eq!(set.seed, 9);
    assert!(set.deriv(1, 1).is_some());
}

#[test]
fn convergence_table_written() {
    let t = tempfile::tempdir().unwrap();
    let model = file(t.path(), "a.json", r#"{"kind": "additive_smooth", "dim": 2}"#);
    let out = t.path().join("c");
    let o = run(&["convergence", "--model", &model, "--x", "1,2", "--m-schedule", "16,32,64", "--n-samples", "2000", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert!(csv.starts_with("m,estimate\n16,"));
    let limit = report(&out)["results"]["convergence"]["extrapolated"].as_f64().unwrap();
    assert!((limit - 2.0).abs() < 1e-9);
}
