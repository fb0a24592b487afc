use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "plant": {"heat": {"grid": 12, "dt": 2.0}},
  "design": {"M": 120, "N_i": 4, "N_o": 24, "T": 20000},
  "filter": {"steps": 60, "monte_carlo": 2, "nsr_levels": [0.01, 0.1, 0.2]},
  "rom": {"order": 4, "compare": 20},
  "seed": 7
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn arinput(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arinput"))
        .args(args)
        .env("ARINPUT_LOG", "error")
        .output()
        .unwrap()
}

fn run_ok(args: &[&str]) {
    let out = arinput(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// `lag,row,col,re,im` rows as (re, im) pairs.
fn read_sequence(path: &Path) -> Vec<(f64, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (f[3], f[4])
        })
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let out = arinput(&["recover", "--config", "/nonexistent/scenario.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("usage"), "{err}");
}

#[test]
fn missing_config_flag_is_a_usage_error() {
    let out = arinput(&["filter"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"design": {"M": "many"}}"#);
    assert_eq!(arinput(&["recover", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn recover_writes_three_tables_and_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let out = dir.path().join("out");
    run_ok(&["recover", "--config", s(&cfg), "--out", s(&out)]);
    let manifest = json(&out.join("manifest.json"));
    let files: Vec<&str> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f.as_str().unwrap())
        .collect();
    for name in ["ruu_recovered.csv", "ruu_true.csv", "ruu_relative_error.csv"] {
        assert!(out.join(name).is_file(), "{name} missing");
        assert!(files.contains(&name), "{name} not in manifest");
    }
    assert!(files.contains(&"manifest.json"));
    assert_eq!(manifest["seed"], 7);
    // the config snapshot alone reproduces the run
    let replay = write_config(
        dir.path(),
        "replay.json",
        &manifest["config"].to_string(),
    );
    let out2 = dir.path().join("replay");
    run_ok(&["recover", "--config", s(&replay), "--out", s(&out2)]);
    assert_eq!(
        fs::read(out.join("ruu_recovered.csv")).unwrap(),
        fs::read(out2.join("ruu_recovered.csv")).unwrap()
    );
}

#[test]
fn cg_and_direct_agree() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let (a, b) = (dir.path().join("direct"), dir.path().join("cg"));
    run_ok(&["recover", "--config", s(&cfg), "--out", s(&a), "--method", "direct"]);
    run_ok(&["recover", "--config", s(&cfg), "--out", s(&b), "--method", "cg"]);
    let x = read_sequence(&a.join("ruu_recovered.csv"));
    let y = read_sequence(&b.join("ruu_recovered.csv"));
    assert_eq!(x.len(), y.len());
    let diff: f64 = x
        .iter()
        .zip(&y)
        .map(|(p, q)| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = x.iter().map(|p| p.0 * p.0 + p.1 * p.1).sum::<f64>().sqrt();
    assert!(diff <= 1e-6 * norm, "relative difference {:e}", diff / norm);
    let ea = json(&a.join("recovery_summary.json"))["max_relative_error_significant"]
        .as_f64()
        .unwrap();
    let eb = json(&b.join("recovery_summary.json"))["max_relative_error_significant"]
        .as_f64()
        .unwrap();
    assert!((ea - eb).abs() <= 1e-6);
}

#[test]
fn filter_reports_both_filters() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let out = dir.path().join("out");
    run_ok(&["filter", "--config", s(&cfg), "--out", s(&out)]);
    let summary = json(&out.join("filter_summary.json"));
    for key in ["ar_based", "baseline"] {
        assert!(summary[key]["armse"].as_f64().unwrap() > 0.0);
        assert!(summary[key]["nsr"].as_f64().unwrap() > 0.0);
    }
    let rows = fs::read_to_string(out.join("estimation_ar.csv")).unwrap();
    // 60 steps, two monitored sensor nodes, one header
    assert_eq!(rows.lines().count(), 1 + 60 * 2);
    assert!(out.join("innovations_model.json").is_file());
}

#[test]
fn nsr_sweep_has_one_row_per_level() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let out = dir.path().join("out");
    run_ok(&["filter", "--config", s(&cfg), "--out", s(&out), "--sweep", "nsr"]);
    let table = fs::read_to_string(out.join("nsr_sweep.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "nsr_target,nsr,ar_order,ar_armse,baseline_armse");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0.01,"));
}

#[test]
fn full_order_reduction_is_exact() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "full.json",
        r#"{"plant": {"heat": {"grid": 12}}, "rom": {"order": 12, "compare": 30}}"#,
    );
    let out = dir.path().join("out");
    run_ok(&["reduce", "--config", s(&cfg), "--out", s(&out)]);
    let errs = fs::read_to_string(out.join("markov_error.csv")).unwrap();
    let worst = errs
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-8, "{worst:e}");
    assert!(out.join("rom.json").is_file());
    assert!(out.join("singular_values.csv").is_file());
}

#[test]
fn zero_order_reduction_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "zero.json", r#"{"rom": {"order": 0}}"#);
    let out = arinput(&["reduce", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn silent_input_has_undefined_nsr() {
    let dir = TempDir::new().unwrap();
    let zero = "[[[0,0],[0,0]],[[0,0],[0,0]]]";
    let eye = "[[[1,0],[0,0]],[[0,0],[1,0]]]";
    let text = format!(
        r#"{{"plant": {{"heat": {{"grid": 12}}}},
            "input_model": {{"custom": {{"A_e": {zero}, "B_e": {eye}, "C_e": {eye},
                                        "Q_nu": {zero}, "Q_mu": {zero}}}}},
            "noise": {{"nsr": 0.0}}}}"#
    );
    let cfg = write_config(dir.path(), "silent.json", &text);
    let out = arinput(&["filter", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("undefined ratio"), "{err}");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["pipeline", "--config", s(&cfg), "--out", s(&a)]);
    run_ok(&["pipeline", "--config", s(&cfg), "--out", s(&b)]);
    let mut compared = 0;
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        if Path::new(&name).extension().is_some_and(|e| e == "csv") {
            assert_eq!(
                fs::read(a.join(&name)).unwrap(),
                fs::read(b.join(&name)).unwrap(),
                "{name:?} differs"
            );
            compared += 1;
        }
    }
    assert!(compared >= 7);
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["recover", "--config", s(&cfg), "--out", s(&a)]);
    run_ok(&["recover", "--config", s(&cfg), "--out", s(&b), "--seed", "8"]);
    assert_ne!(
        fs::read(a.join("ruu_recovered.csv")).unwrap(),
        fs::read(b.join("ruu_recovered.csv")).unwrap()
    );
    assert_eq!(json(&b.join("manifest.json"))["seed"], 8);
}
