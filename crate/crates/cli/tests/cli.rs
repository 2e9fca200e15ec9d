use std::fs;
use std::process::{Command, Output};

use cec_core::diagnostics::{read_sweep_csv, CSV_HEADER};
use serde_json::Value;

const V0_T30: f64 = 323.523636295530;

fn cec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cec"))
        .args(args)
        .env_remove("CEC_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn solve_prints_the_fixture_value() {
    let doc = json_of(&cec(&["solve", "--model", "diamond", "--T", "30"]));
    let v = doc["value"].as_f64().unwrap();
    assert!((v - V0_T30).abs() < 1e-7, "{v}");
    assert_eq!(doc["plan"]["u_star"].as_array().unwrap().len(), 30);
}

#[test]
fn deterministic_simulation_closes_the_gap() {
    let doc = json_of(&cec(&[
        "simulate", "--model", "diamond", "--policy", "update", "--sigma", "0", "--reps", "5", "--seed", "1", "--T", "30",
    ]));
    let gap = doc["gap_bound"].as_f64().unwrap();
    assert!(gap.abs() <= 1e-4 * V0_T30, "{gap}");
    assert_eq!(doc["m"].as_u64(), Some(5));
}

#[test]
fn zero_replications_is_a_usage_error() {
    let out = cec(&["simulate", "--reps", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--reps") && err.contains("Usage: cec simulate"), "{err}");
}

#[test]
fn argument_errors_exit_two() {
    for args in [
        &["simulate", "--policy", "greedy"][..],
        &["simulate", "--set", "nonsense=1", "--reps", "1"],
        &["simulate", "--set", "T"],
        &["solve", "--model", "custom-json"],
        &["diagnose", "--format", "csv"],
        &["simulate", "--policy", "hybrid", "--theta", "-1"],
        &["solve", "--T", "0"],
    ] {
        assert_eq!(cec(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_one() {
    let out = cec(&["solve", "--config", "/nonexistent/params.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("params.json"));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"T": 3, "volume": 2}"#).unwrap();
    assert_eq!(cec(&["solve", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn overrides_and_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("params.json");
    fs::write(&cfg, r#"{"T": 4, "sigma": 0.5}"#).unwrap();
    let from_file = json_of(&cec(&["solve", "--config", cfg.to_str().unwrap()]));
    let from_set = json_of(&cec(&["solve", "--set", "T=4", "--set", "sigma=0.5"]));
    assert_eq!(from_file["T"].as_u64(), Some(4));
    assert_eq!(from_file, from_set);
}

#[test]
fn custom_instance_solves() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.json");
    fs::write(
        &path,
        r#"{
            "n_x": 1, "n_u": 1, "n_w": 1, "T": 2, "x1": [0.0],
            "reward": {"kind": "alpha_fair", "alpha": 0.5, "groups": [[2]]},
            "inequalities": [
                {"kind": "affine", "coeffs": [0, 0, -1]},
                {"kind": "affine", "coeffs": [0, -1, 1]}
            ],
            "dynamics": {"c": [[1], [0], [0]], "d": [0]},
            "noise": {"mean": [3.0], "half_width": [1.0], "sigma": 0.5}
        }"#,
    )
    .unwrap();
    let doc = json_of(&cec(&["solve", "--model", "custom-json", "--config", path.to_str().unwrap()]));
    assert!((doc["value"].as_f64().unwrap() - 4.0 * 3f64.sqrt()).abs() < 1e-6);
    let sim = json_of(&cec(&[
        "simulate", "--model", "custom-json", "--config", path.to_str().unwrap(), "--policy", "projection", "--reps", "10",
    ]));
    assert!(sim["gap_bound"].as_f64().unwrap() >= -2.0 * sim["stderr"].as_f64().unwrap());
}

#[test]
fn sweep_csv_schema_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let out = cec(&[
            "sweep-sigma", "--T", "5", "--sigma-grid", "0,0.5,1", "--policy", "hybrid", "--paired-theta", "--reps", "8",
            "--format", "csv", "--output", path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(path).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let text = String::from_utf8(a.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
    let rows = read_sweep_csv(a.as_slice()).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1].theta, Some(0.8));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cec"))
        .args(["sweep-theta", "--T", "4", "--theta-grid", "0.5,100", "--reps", "4", "--format", "csv"])
        .env("CEC_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let rows = read_sweep_csv(fs::read(dir.path().join("sweep-theta.csv")).unwrap().as_slice()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].resolves, 1.0);
}

#[test]
fn diagnose_reports_regularity() {
    let doc = json_of(&cec(&["diagnose", "--T", "3"]));
    assert_eq!(doc["licq"], Value::Bool(true));
    assert_eq!(doc["strict_comp"], Value::Bool(true));
    assert_eq!(doc["projection_t1"]["degenerate"], Value::Bool(true));
    assert_eq!(doc["stages"].as_array().unwrap().len(), 3);
}
