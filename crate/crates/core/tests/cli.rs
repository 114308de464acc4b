use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_zqv-transport"))
}

fn run_with(dir: &Path, sub: &str, config: Value, extra: &[&str]) -> Output {
    let cfg = dir.join("config.json");
    fs::write(&cfg, config.to_string()).unwrap();
    let out = dir.join("out");
    bin()
        .arg(sub)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("out/manifest.json")).unwrap()).unwrap()
}

fn check<'a>(m: &'a Value, name: &str) -> &'a Value {
    m["checks"].as_array().unwrap().iter().find(|c| c["name"] == name).unwrap_or_else(|| panic!("no check {name}"))
}

fn small(kind_extra: Value) -> Value {
    let mut base = json!({ "steps": 256, "paths": 100, "seed": 3 });
    for (k, v) in kind_extra.as_object().unwrap() {
        base[k] = v.clone();
    }
    base
}

#[test]
fn validate_reports_diagnostics() {
    let d = tempfile::tempdir().unwrap();
    let o = run_with(d.path(), "validate", json!({ "hurst": 0.4 }), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("H must lie in (1/2,1)"));
    let o = run_with(d.path(), "validate", json!({ "q": 3 }), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unsupported order"));
    let o = run_with(d.path(), "validate", json!({ "eps": [0.25, 0.125, 0.001] }), &[]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("< 2Δt"));
    let o = run_with(d.path(), "validate", json!({}), &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("config valid"));
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(bin().arg("no-such-command").output().unwrap().status.code(), Some(2));
    assert_eq!(bin().args(["qv", "--paths", "many"]).output().unwrap().status.code(), Some(2));
    let o = run_with(d.path(), "qv", json!({ "colour": "blue" }), &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin().args(["qv", "--config"]).arg(d.path().join("missing.json")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.path().join("out").exists());
}

#[test]
fn qv_example() {
    let d = tempfile::tempdir().unwrap();
    let o = run_with(d.path(), "qv", json!({ "q": 1, "hurst": 0.75, "steps": 1024, "paths": 500 }), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let m = manifest(d.path());
    let slope = check(&m, "qv_slope");
    assert_eq!(slope["pass"], true);
    assert!((slope["value"].as_f64().unwrap() - 0.5).abs() < 0.1);
    assert_eq!(m["pass"], true);
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS qv_slope"));
}

#[test]
fn flow_zero_drift_is_exact() {
    let d = tempfile::tempdir().unwrap();
    let o = run_with(d.path(), "flow", small(json!({ "drift": { "preset": "zero" } })), &[]);
    assert_eq!(o.status.code(), Some(0));
    let m = manifest(d.path());
    let inv = check(&m, "inversion");
    assert_eq!(inv["pass"], true);
    assert!(inv["value"].as_f64().unwrap() < 1e-14, "{inv}");
}

#[test]
fn check_failure_exits_1() {
    let d = tempfile::tempdir().unwrap();
    let o = run_with(d.path(), "bound-check", small(json!({ "drift": { "preset": "linear", "lambda": 1.0 } })), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    assert_eq!(manifest(d.path())["pass"], false);
}

#[test]
fn numeric_error_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let o = run_with(d.path(), "malliavin", small(json!({ "volterra_tol": 1e-300 })), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("malliavin"));
}

fn files(dir: &Path) -> BTreeSet<String> {
    fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect()
}

#[test]
fn artifacts_are_deterministic_and_listed() {
    for (sub, cfg) in [
        ("noise-stats", small(json!({}))),
        ("qv", small(json!({}))),
        ("flow", small(json!({}))),
        ("malliavin", small(json!({ "q": 2 }))),
        ("bound-check", small(json!({}))),
        ("kernel-table", small(json!({}))),
    ] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let oa = run_with(a.path(), sub, cfg.clone(), &["--threads", "1"]);
        let ob = run_with(b.path(), sub, cfg, &["--threads", "2"]);
        assert_eq!(oa.status.code(), ob.status.code());
        let m = manifest(a.path());
        let listed: BTreeSet<String> = m["artifacts"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_owned()).collect();
        assert_eq!(listed, files(&a.path().join("out")), "{sub}");
        assert!(listed.contains("manifest.json"));
        for f in &listed {
            if f == "manifest.json" {
                continue;
            }
            let (x, y) = (fs::read(a.path().join("out").join(f)).unwrap(), fs::read(b.path().join("out").join(f)).unwrap());
            assert!(x == y, "{sub}/{f} differs");
            if f.ends_with(".csv") {
                let text = String::from_utf8(x).unwrap();
                assert!(text.contains(&format!("config_sha256={}", m["config_sha256"].as_str().unwrap())), "{sub}/{f}");
            }
        }
        let mb = manifest(b.path());
        assert_eq!(m["config_sha256"], mb["config_sha256"]);
        assert_eq!(m["checks"], mb["checks"]);
        assert!(m["version"].is_string() && m["wall_clock_seconds"].is_number());
    }
}

#[test]
fn flags_override_config() {
    let d = tempfile::tempdir().unwrap();
    let o = run_with(d.path(), "noise-stats", small(json!({ "seed": 1 })), &["--seed", "9", "--paths", "120"]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(1));
    let m = manifest(d.path());
    assert_eq!(m["config"]["seed"], 9);
    assert_eq!(m["config"]["paths"], 120);
    assert_eq!(m["config"]["kind"], "noise-stats");
}
