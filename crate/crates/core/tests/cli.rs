use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const MODEL: &str = r#"{
  "n_assets": 2, "n_states": 2,
  "growth": [[-2.0, -1.0], [0.5, 0.3]],
  "covariance": [[0.04, 0.01], [0.01, 0.03]],
  "generator": [[-25.0, 2.0], [25.0, -2.0]],
  "prior": [0.5, 0.5]
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regime-portfolio")).current_dir(dir).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

fn simulate(dir: &Path, steps: usize) {
    write(dir, "sim.json", &format!(r#"{{"seed": 3, "simulate": {{"model": {MODEL}, "horizon_steps": {steps}}}}}"#));
    let out = run(dir, &["simulate", "--config", "sim.json", "--out", "sim"]);
    assert!(out.status.success(), "{}", stderr(&out));
}

fn read_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn single_state_simulation_writes_one_row_per_time() {
    let tmp = TempDir::new().unwrap();
    let model = r#"{"n_assets": 1, "n_states": 1, "growth": [[0.05]], "covariance": [[0.04]], "generator": [[0.0]], "prior": [1.0]}"#;
    write(tmp.path(), "c.json", &format!(r#"{{"simulate": {{"model": {model}, "horizon_steps": 30}}}}"#));
    let out = run(tmp.path(), &["simulate", "--config", "c.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("out/path.csv")).unwrap();
    assert_eq!(csv.lines().count(), 32);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "simulate");
    assert!(meta["files"]["path.csv"].as_str().unwrap().len() == 64);
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), 50);
    let out = run(tmp.path(), &["simulate", "--config", "sim.json", "--out", "other", "--seed", "4"]);
    assert!(out.status.success());
    let a = fs::read(tmp.path().join("sim/path.csv")).unwrap();
    let b = fs::read(tmp.path().join("other/path.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    simulate(dir, 900);
    write(
        dir,
        "run.json",
        r#"{
  "seed": 5,
  "fit": {"data": {"file": "sim/path.csv"}, "candidate_states": [1, 2], "em": {"n_restarts": 2}},
  "filter": {"model_file": "fit_a/model.json", "data": {"file": "sim/path.csv"}},
  "allocate": {"model_file": "fit_a/model.json", "data": {"file": "sim/path.csv"}},
  "backtest": {"data": {"file": "sim/path.csv"}, "spec": {"estimation_window": 500, "investment_window": 100, "roll_step": 150, "baseline": "gbm", "candidate_states": [1, 2], "em": {"n_restarts": 2}}}
}"#,
    );
    for cmd in ["fit", "filter", "allocate", "backtest"] {
        for tag in ["a", "b"] {
            let out_dir = format!("{cmd}_{tag}");
            let out = run(dir, &[cmd, "--config", "run.json", "--out", &out_dir, "--threads", "2"]);
            assert!(out.status.success(), "{cmd}: {}", stderr(&out));
        }
        let a = read_dir(&dir.join(format!("{cmd}_a")));
        let b = read_dir(&dir.join(format!("{cmd}_b")));
        assert!(a.len() >= 2);
        assert_eq!(a, b, "{cmd} outputs differ");
    }
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("fit_a/fit.json")).unwrap()).unwrap();
    assert_eq!(fit["n_states"], fit["chosen"]["ICL"]);
    let criteria = fs::read_to_string(dir.join("fit_a/criteria.csv")).unwrap();
    assert_eq!(criteria.lines().count(), 3);
    let posterior = fs::read_to_string(dir.join("filter_a/posterior.csv")).unwrap();
    assert_eq!(posterior.lines().count(), 901);
}

#[test]
fn missing_covariance_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let model = r#"{"n_assets": 1, "n_states": 1, "growth": [[0.05]], "generator": [[0.0]], "prior": [1.0]}"#;
    write(tmp.path(), "c.json", &format!(r#"{{"simulate": {{"model": {model}, "horizon_steps": 30}}}}"#));
    let out = run(tmp.path(), &["simulate", "--config", "c.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("covariance"), "{}", stderr(&out));
}

#[test]
fn unknown_keys_and_missing_sections_are_input_errors() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "c.json", r#"{"simulate": {"horizon_steps": 3}, "bogus": 1}"#);
    let out = run(tmp.path(), &["simulate", "--config", "c.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"));
    write(tmp.path(), "d.json", r#"{"seed": 1}"#);
    let out = run(tmp.path(), &["fit", "--config", "d.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("fit"));
    assert_eq!(run(tmp.path(), &["nonsense"]).status.code(), Some(2));
}

#[test]
fn malformed_csv_row_is_reported() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "r.csv", "date,a,b\nd1,0.01,0.02\nd2,0.01,oops\nd3,0.0,0.0\n");
    write(tmp.path(), "c.json", r#"{"fit": {"data": {"file": "r.csv", "format": "returns"}, "candidate_states": [1]}}"#);
    let out = run(tmp.path(), &["fit", "--config", "c.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("row 3"), "{}", stderr(&out));
}

#[test]
fn single_candidate_fit_is_the_constant_parameter_model() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), 300);
    write(tmp.path(), "c.json", r#"{"fit": {"data": {"file": "sim/path.csv"}, "candidate_states": [1]}}"#);
    let out = run(tmp.path(), &["fit", "--config", "c.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(tmp.path().join("out/model.json")).unwrap();
    let model = regime_portfolio::HmmModel::from_json(&text).unwrap();
    let path = regime_portfolio::PricePath::read_csv(fs::File::open(tmp.path().join("sim/path.csv")).unwrap()).unwrap();
    let base = regime_portfolio::backtest::gbm_baseline_fit(&path.increments(), path.dt().unwrap()).unwrap();
    assert_eq!(model.n_states(), 1);
    assert!((model.growth(0) - base.growth(0)).amax() < 1e-12);
    assert!((model.covariance() - base.covariance()).amax() < 1e-12);
}

#[test]
fn backtest_without_enough_data_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), 200);
    write(tmp.path(), "c.json", r#"{"backtest": {"data": {"file": "sim/path.csv"}}}"#);
    let out = run(tmp.path(), &["backtest", "--config", "c.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("200 steps"), "{}", stderr(&out));
}

#[test]
fn overflowing_returns_are_a_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "r.csv", "date,a,b\nd1,1e308,1e308\nd2,0.0,0.0\n");
    write(tmp.path(), "c.json", &format!(r#"{{"filter": {{"model": {MODEL}, "data": {{"file": "r.csv", "format": "returns"}}}}}}"#));
    let out = run(tmp.path(), &["filter", "--config", "c.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn allocation_reports_its_parts() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "c.json",
        &format!(r#"{{"allocate": {{"model": {MODEL}, "posterior": [0.25, 0.75], "prefs": {{"zeta0": 1.0, "zeta1": 2.0, "zeta2": 1.0, "q": "covariance"}}}}}}"#),
    );
    let out = run(tmp.path(), &["allocate", "--config", "c.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let w: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/weights.json")).unwrap()).unwrap();
    let weights: Vec<f64> = serde_json::from_value(w["weights"].clone()).unwrap();
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let gamma: Vec<f64> = serde_json::from_value(w["gamma_hat"].clone()).unwrap();
    assert!((gamma[0] - (0.25 * -2.0 + 0.75 * 0.5)).abs() < 1e-15);
    let parts: Vec<f64> = serde_json::from_value(w["decomposition"].clone()).unwrap();
    assert!((parts[0] - 0.25).abs() < 1e-15 && (parts[1] - 0.5).abs() < 1e-15);
}
