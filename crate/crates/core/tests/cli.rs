use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_judge-audit"))
        .args(args)
        .env_remove("JUDGE_AUDIT_THREADS")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

#[test]
fn audit_d1_report() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["audit", s(&fixture("d1.jsonl")), "--out", s(dir.path())]);
    let v = read_json(&dir.path().join("report.json"));
    assert_eq!(v["tool"], "judge-audit");
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(v["config"]["bootstrap"], 0);
    let r = &v["result"];
    assert_eq!(f(&r["recovery"]["value"]), 0.0);
    assert!((f(&r["global_r"]["value"]) - 0.4472).abs() < 1e-4);
    assert_eq!(f(&r["pcs_n"]["value"]), 0.5);
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("Recovery"));
}

#[test]
fn audit_missing_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["audit", "/nonexistent/x.jsonl", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no such input"));
}

#[test]
fn audit_validation_error_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        "{\"prompt_id\":\"P\",\"candidate_id\":\"a\",\"judge_score\":0.5,\"oracle_label\":1}\n{\"prompt_id\":\"P\",\"candidate_id\":\"b\",\"judge_score\":\"x\"}\n",
    )
    .unwrap();
    let out = run(&["audit", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.jsonl") && err.contains("line 2"), "{err}");
}

#[test]
fn audit_bootstrap_is_deterministic_across_threads() {
    let sim = tempfile::tempdir().unwrap();
    run_ok(&["simulate", "gaussian", "--rho", "0.5", "--n-prompts", "300", "--seed", "2", "--out", s(sim.path())]);
    let data = sim.path().join("dataset.jsonl");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let common = ["audit", s(&data), "--unbounded", "--bootstrap", "1000", "--seed", "9"];
    run_ok(&[&common[..], &["--out", s(a.path()), "--threads", "1"]].concat());
    run_ok(&[&common[..], &["--out", s(b.path()), "--threads", "4"]].concat());
    let ra = std::fs::read(a.path().join("report.json")).unwrap();
    let rb = std::fs::read(b.path().join("report.json")).unwrap();
    assert_eq!(ra, rb);
    let v: Value = serde_json::from_slice(&ra).unwrap();
    let ci = &v["result"]["recovery"]["ci"];
    assert!(f(&ci[0]) <= f(&ci[1]));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, format!("{{\"input\": {:?}, \"bootstrap\": 50, \"seed\": 3}}", s(&fixture("d1.jsonl")))).unwrap();
    run_ok(&["audit", "--config", s(&cfg), "--seed", "4", "--out", s(dir.path())]);
    let v = read_json(&dir.path().join("report.json"));
    assert_eq!(v["config"]["bootstrap"], 50);
    assert_eq!(v["config"]["seed"], 4);
}

#[test]
fn pairwise_commands() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["pairwise", s(&fixture("pairwise_agree.jsonl")), "--out", s(dir.path())]);
    let v = read_json(&dir.path().join("pairwise.json"));
    assert_eq!(f(&v["result"]["stats"]["agreement"]), 1.0);

    run_ok(&["pairwise", s(&fixture("pairwise_mixed.jsonl")), "--out", s(dir.path())]);
    let v = read_json(&dir.path().join("pairwise.json"));
    assert_eq!(f(&v["result"]["stats"]["p_eff"]), 0.625);
    assert_eq!(f(&v["result"]["stats"]["recovery_bo2"]), 0.25);
    assert_eq!(v["result"]["calibration"]["n_records"], 4);

    let out = run(&["pairwise", s(&fixture("empty.jsonl")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    run_ok(&["pairwise", s(&fixture("d1.jsonl")), "--from-pointwise", "--out", s(dir.path())]);
    let v = read_json(&dir.path().join("pairwise.json"));
    assert_eq!(f(&v["result"]["stats"]["p_eff"]), 0.5);
}

#[test]
fn estimate_commands() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["estimate", s(&fixture("d1.jsonl")), "--out", s(dir.path())]);
    let v = read_json(&dir.path().join("estimate.json"));
    assert_eq!(f(&v["result"]["recovery"]["estimate"]["point"]), 0.0);

    let out = run(&["estimate", s(&fixture("partial_no_prob.jsonl")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let sim = tempfile::tempdir().unwrap();
    run_ok(&["simulate", "gaussian", "--rho", "0.6", "--n-prompts", "400", "--seed", "5", "--out", s(sim.path())]);
    let data = sim.path().join("dataset.jsonl");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let common = ["estimate", s(&data), "--unbounded", "--budget-mode", "uniform", "--budget", "0.5", "--seed", "11", "--outcome-model", "judge-linear"];
    run_ok(&[&common[..], &["--out", s(a.path())]].concat());
    run_ok(&[&common[..], &["--out", s(b.path())]].concat());
    let ra = std::fs::read(a.path().join("estimate.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.path().join("estimate.json")).unwrap());
    let v: Value = serde_json::from_slice(&ra).unwrap();
    let est = &v["result"]["recovery"]["estimate"];
    assert!(f(&est["lo"]) < f(&est["hi"]));
    assert!((f(&v["result"]["mean_query_prob"]) - 0.5).abs() < 1e-12);
}

#[test]
fn simulate_gaussian_rho_one_audits_to_full_recovery() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["simulate", "gaussian", "--rho", "1", "--n-prompts", "200", "--out", s(dir.path())]);
    run_ok(&["audit", s(&dir.path().join("dataset.jsonl")), "--unbounded", "--out", s(dir.path())]);
    let v = read_json(&dir.path().join("report.json"));
    assert_eq!(f(&v["result"]["recovery"]["value"]), 1.0);
}

#[test]
fn simulate_discretize_csv_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["simulate", "discretize", "--rho", "0.6", "--n-prompts", "20000", "--seed", "1", "--out", s(dir.path())]);
    let mut rdr = csv::Reader::from_path(dir.path().join("discretize.csv")).unwrap();
    let rec: Vec<f64> = rdr.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert_eq!(rec.len(), 5);
    for w in rec.windows(2) {
        assert!(w[1] <= w[0] + 0.01, "{rec:?}");
    }
}

#[test]
fn simulate_nonident_datasets_match_in_global_r() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "simulate", "nonident", "--target-r", "0.47", "--rho-1", "0", "--rho-2", "0.6", "--n-prompts", "20000", "--seed", "3",
        "--out", s(dir.path()),
    ]);
    let mut r = Vec::new();
    for i in 1..=2 {
        let sub = dir.path().join(format!("a{i}"));
        run_ok(&["audit", s(&dir.path().join(format!("dataset_{i}.jsonl"))), "--unbounded", "--out", s(&sub)]);
        let v = read_json(&sub.join("report.json"));
        r.push((f(&v["result"]["global_r"]["value"]), f(&v["result"]["recovery"]["value"])));
    }
    assert!((r[0].0 - r[1].0).abs() < 0.01, "{r:?}");
    assert!(r[1].1 - r[0].1 > 0.3, "{r:?}");
}

#[test]
fn simulate_requirements_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["simulate", "requirements", "--targets", "0.5", "--n-prompts", "5000", "--tol", "0.01", "--out", s(dir.path())]);
    let v = read_json(&dir.path().join("requirements.json"));
    assert!((f(&v["result"][0]["rho"]) - 0.5).abs() < 0.05);
    let out = run(&["simulate", "requirements", "--targets", "1.0", "--n-prompts", "500", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn route_sweep_endpoints_and_dominance() {
    let sim = tempfile::tempdir().unwrap();
    run_ok(&["simulate", "gaussian", "--rho", "0.4", "--n-prompts", "500", "--seed", "6", "--out", s(sim.path())]);
    let data = sim.path().join("dataset.jsonl");
    run_ok(&[
        "route", s(&data), "--unbounded", "--policies", "random,random:3,low_margin,high_margin,oracle_optimal",
        "--budgets", "0,0.25,0.5,0.75,1", "--out", s(sim.path()),
    ]);
    let v = read_json(&sim.path().join("simulate.json"));
    let (vj, vo) = (f(&v["result"]["v_judge"]), f(&v["result"]["v_oracle"]));
    let mut rdr = csv::Reader::from_path(sim.path().join("route.csv")).unwrap();
    let rows: Vec<(String, f64, f64)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap(), r[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 25);
    for (_, b, value) in &rows {
        if *b == 0.0 {
            assert!((value - vj).abs() < 1e-12);
        }
        if *b == 1.0 {
            assert!((value - vo).abs() < 1e-12);
        }
        let best = rows.iter().find(|r| r.0 == "oracle_optimal" && r.1 == *b).unwrap().2;
        assert!(best >= value - 1e-12);
    }
}

#[test]
fn calibrate_commands() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["calibrate", s(&fixture("grid_monotone.jsonl")), "--split-seed", "7", "--out", s(dir.path())]);
    let first = std::fs::read(dir.path().join("calibrate.json")).unwrap();
    let v: Value = serde_json::from_slice(&first).unwrap();
    let d = &v["result"]["effect"]["delta"];
    assert_eq!(f(&d["recovery"]), 0.0);
    assert_eq!(f(&d["pcs"]), 0.0);

    run_ok(&["calibrate", s(&fixture("grid_monotone.jsonl")), "--split-seed", "7", "--out", s(dir.path())]);
    assert_eq!(first, std::fs::read(dir.path().join("calibrate.json")).unwrap());

    run_ok(&["calibrate", s(&fixture("grid_identity.jsonl")), "--out", s(dir.path())]);
    let v = read_json(&dir.path().join("calibrate.json"));
    for (k, x) in v["result"]["effect"]["delta"].as_object().unwrap() {
        assert_eq!(f(x), 0.0, "{k}");
    }
}

#[test]
fn help_exits_zero_everywhere() {
    for cmd in [
        vec!["--help"],
        vec!["audit", "--help"],
        vec!["pairwise", "--help"],
        vec!["estimate", "--help"],
        vec!["simulate", "--help"],
        vec!["simulate", "gaussian", "--help"],
        vec!["simulate", "discretize", "--help"],
        vec!["simulate", "requirements", "--help"],
        vec!["simulate", "nonident", "--help"],
        vec!["route", "--help"],
        vec!["calibrate", "--help"],
    ] {
        let out = run(&cmd);
        assert_eq!(out.status.code(), Some(0), "{cmd:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--"), "{cmd:?}");
    }
    assert_eq!(run(&["audit", "--bogus"]).status.code(), Some(2));
}
