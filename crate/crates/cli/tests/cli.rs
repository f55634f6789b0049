use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn btnv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btnv")).args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = btnv(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> String {
    let path = dir.join(name);
    let mut args = vec!["simulate", "--order", "2", "--memory", "10", "--rank", "2", "--out", p(&path)];
    args.extend_from_slice(extra);
    let out = btnv(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    p(&path).to_string()
}

#[test]
fn simulate_identify_evaluate_recovers_rank_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--noise-std", "0.5", "--n", "1500", "--seed", "3"]);
    let model = dir.path().join("model");
    let fit = ok_json(&[
        "identify", "--data", &data, "--order", "2", "--memory", "10", "--rank", "10", "--max-iter", "1000",
        "--split", "1000", "--seed", "0", "--out", p(&model),
    ]);
    assert_eq!(fit["final_rank"], 2);

    let metrics = ok_json(&["evaluate", "--model", p(&model), "--data", &data, "--from", "1000"]);
    for key in ["rmse", "nll", "final_rank", "elbo", "runtime_s", "seed"] {
        assert!(metrics.get(key).is_some(), "missing {key}");
    }
    assert_eq!(metrics["final_rank"], 2);
    assert_eq!(metrics["seed"], 0);
    assert_eq!(metrics["rmse"], fit["rmse"]);
    assert!(metrics["rmse"].as_f64().unwrap() < 0.6, "{metrics}");
}

#[test]
fn lag_precisions_help_on_short_memory_systems() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--decay", "0.3", "--noise-std", "0.1", "--n", "1300", "--seed", "1"]);
    let nll = |delta: &str| {
        let model = dir.path().join(format!("model-{delta}"));
        let fit = ok_json(&[
            "identify", "--data", &data, "--order", "2", "--memory", "10", "--rank", "10", "--split", "300",
            "--delta", delta, "--out", p(&model),
        ]);
        fit["nll"].as_f64().unwrap()
    };
    let (on, off) = (nll("on"), nll("off"));
    assert!(on < off, "on {on} off {off}");
}

#[test]
fn predict_and_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--n", "300", "--seed", "5"]);
    let model = dir.path().join("model");
    ok_json(&[
        "identify", "--data", &data, "--order", "2", "--memory", "10", "--rank", "4", "--max-iter", "20",
        "--out", p(&model),
    ]);

    let inputs = dir.path().join("u.csv");
    let u_only: String = std::fs::read_to_string(&data)
        .unwrap()
        .lines()
        .map(|l| l.split(',').next().unwrap().to_string() + "\n")
        .collect();
    std::fs::write(&inputs, u_only).unwrap();
    let preds = dir.path().join("preds.csv");
    let out = btnv(&["predict", "--model", p(&model), "--data", p(&inputs), "--from", "290", "--out", p(&preds)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&preds).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "index,mean,variance,scale,dof");
    assert_eq!(lines.len(), 11);
    assert!(lines[1].starts_with("290,"));
    assert!(lines[1..].iter().all(|l| l.split(',').skip(1).all(|v| v.parse::<f64>().is_ok())));

    let (trace, profile) = (dir.path().join("trace.csv"), dir.path().join("delta.csv"));
    let out = btnv(&["report", "--model", p(&model), "--trace", p(&trace), "--delta-profile", p(&profile)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(trace).unwrap();
    assert!(trace.starts_with("iter,elbo,rank,e_tau\n0,"));
    let profile = std::fs::read_to_string(profile).unwrap();
    let rows: Vec<&str> = profile.lines().collect();
    assert_eq!(rows[0], "index,e_delta,row_norm_1,row_norm_2");
    assert_eq!(rows.len(), 1 + 11);
    assert!(rows[1..].iter().enumerate().all(|(i, r)| r.starts_with(&format!("{i},"))));
}

#[test]
fn several_seeds_are_summarized() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--n", "400", "--seed", "6"]);
    let model = dir.path().join("model");
    let out = ok_json(&[
        "identify", "--data", &data, "--order", "2", "--memory", "10", "--rank", "4", "--max-iter", "30",
        "--split", "300", "--seeds", "3", "--out", p(&model),
    ]);
    assert_eq!(out["runs"].as_array().unwrap().len(), 3);
    for key in ["final_rank", "elbo", "runtime_s", "rmse", "nll"] {
        assert!(out["summary"][key]["mean"].is_f64(), "{key}");
        assert!(out["summary"][key]["std"].is_f64(), "{key}");
    }
    let saved = ok_json(&["evaluate", "--model", p(&model), "--data", &data, "--split", "300"]);
    assert_eq!(saved["seed"], out["saved_seed"]);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "a.csv", &["--n", "50", "--seed", "9"]);
    let b = simulate(dir.path(), "b.csv", &["--n", "50", "--seed", "9"]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(btnv(&["evaluate", "--data", "x.csv"]).status.code(), Some(2));
    assert_eq!(btnv(&["frobnicate"]).status.code(), Some(2));
    let bad = [
        vec!["identify", "--data", "d.csv", "--memory", "3", "--out", "m", "--delta", "maybe"],
        vec!["identify", "--data", "d.csv", "--memory", "3", "--out", "m", "--priors", "1,1,1,1,1"],
        vec!["identify", "--data", "d.csv", "--memory", "0", "--out", "m"],
        vec!["identify", "--data", "d.csv", "--memory", "3", "--out", "m", "--tol", "-1"],
        vec!["report", "--model", "m"],
    ];
    for args in bad {
        assert_eq!(btnv(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = btnv(&["evaluate", "--model", p(&dir.path().join("missing")), "--data", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loading model"));

    let flat = dir.path().join("flat.csv");
    std::fs::write(&flat, "u,y\n1,2\n1,2\n1,2\n").unwrap();
    let out = btnv(&["identify", "--data", p(&flat), "--memory", "1", "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
}
