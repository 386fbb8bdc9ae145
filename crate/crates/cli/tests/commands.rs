use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn banditloop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_banditloop"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn run_verify_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let report = json(&banditloop(
        d,
        &["run", "--events", "3000", "--store", "st", "--csv", "w.csv", "--log", "log.ndjson"],
    ));
    assert_eq!(report["events"], 3000);
    let csv = std::fs::read_to_string(d.join("w.csv")).unwrap();
    assert!(csv.starts_with("events,mean_reward,"));

    let rep = json(&banditloop(d, &["verify", "--store", "st"]));
    assert_eq!(rep["decisions"], 3000);
    assert!(rep["checkpoints"].as_u64().unwrap() > 0);

    let est = json(&banditloop(d, &["evaluate", "--data", "log.ndjson", "--store", "st"]));
    assert_eq!(est["n"], 3000);
    assert!(est["estimate"].as_f64().unwrap() > 0.0);
    let fixed = json(&banditloop(d, &["evaluate", "--data", "log.ndjson", "--action", "1"]));
    assert_eq!(fixed["ci_width"], est["ci_width"]);
}

#[test]
fn verify_fails_with_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    json(&banditloop(d, &["run", "--events", "1500", "--store", "st"]));
    let out = banditloop(d, &["verify", "--store", "st", "--rate", "0.02"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("replay diverged"));
}

#[test]
fn offline_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    json(&banditloop(d, &["run", "--events", "3000", "--log", "log.ndjson"]));
    let out = banditloop(d, &["split", "--data", "log.ndjson", "--train", "tr.ndjson", "--test", "te.ndjson"]);
    assert!(out.status.success());
    let lines = |f: &str| std::fs::read_to_string(d.join(f)).unwrap().lines().count();
    assert_eq!(lines("tr.ndjson") + lines("te.ndjson"), 3000);

    let out = banditloop(d, &["corrupt", "--data", "tr.ndjson", "--out", "bad.ndjson", "--mode", "delete-feature"]);
    assert!(out.status.success());
    assert!(!std::fs::read_to_string(d.join("bad.ndjson")).unwrap().contains("\"user\""));

    let rep = json(&banditloop(d, &["discrepancy", "--data", "log.ndjson", "--mode", "add-decision-feature"]));
    assert_eq!(rep["mode"], "add_decision_feature");
    assert!(rep["ratio"].as_f64().unwrap() > 1.0);
    let clean = json(&banditloop(d, &["discrepancy", "--data", "log.ndjson"]));
    assert_eq!(clean["mode"], "clean");

    let rows = json(&banditloop(d, &["staleness", "--data", "tr.ndjson", "te.ndjson"]));
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(rows[0]["ratio"], 1.0);
}

#[test]
fn config_round_trips_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = banditloop(d, &["config", "--epsilon", "0.1", "--seed", "7"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("epsilon0 = 0.1"));
    std::fs::write(d.join("loop.toml"), &text).unwrap();
    let a = json(&banditloop(d, &["run", "--events", "1000", "--config", "loop.toml"]));
    let b = json(&banditloop(d, &["run", "--events", "1000", "--epsilon", "0.1", "--seed", "7"]));
    assert_eq!(a, b);

    std::fs::write(d.join("bad.toml"), "epsilon0 = 2.0\n").unwrap();
    assert!(!banditloop(d, &["run", "--config", "bad.toml"]).status.success());
}

#[test]
fn environment_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = banditloop(d, &["env", "--preset", "two-action"]);
    std::fs::write(d.join("env.json"), &out.stdout).unwrap();
    let rep = json(&banditloop(d, &["run", "--env-file", "env.json", "--events", "2000"]));
    assert!(rep["mean_reward"].as_f64().unwrap() > 0.5);
    assert!(!banditloop(d, &["env", "--preset", "nope"]).status.success());
}

#[test]
fn acceptance_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = banditloop(dir.path(), &["acceptance", "exploration-law"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[PASS]"));
    let out = banditloop(dir.path(), &["acceptance", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn throughput_reports_rates() {
    let dir = tempfile::tempdir().unwrap();
    let rep = json(&banditloop(dir.path(), &["throughput", "--threads", "2", "--decisions", "2000"]));
    assert_eq!(rep["decisions"], 2000);
    assert!(rep["decisions_per_second"].as_f64().unwrap() > 0.0);
}
