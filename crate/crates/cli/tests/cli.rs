use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{"sample_paths": 2000, "centering_paths": 1000, "path_dump_count": 2}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_expfbm"));
    c.env_remove("EXPFBM_WORKERS");
    c
}

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    bin().args(args).arg("--config").arg(cfg).arg("--out").arg(out).output().unwrap()
}

fn json_stdout(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn kernel_verify_passes_and_emits_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.json", "{}");
    let o = run(&["kernel-verify", "--json"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json_stdout(&o);
    assert_eq!(doc["passed"], true);
    assert_eq!(doc["failures"].as_array().unwrap().len(), 0);
    assert_eq!(doc["config"]["horizon_T"], 1.0);
    assert_eq!(doc["config_hash"].as_str().unwrap().len(), 64);
    assert!(dir.path().join("out/kernel-verify.json").exists());
}

#[test]
fn corrupted_ch_fails_kernel_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.json", r#"{"kernel_ch_scale": 1.01}"#);
    let o = run(&["kernel-verify", "--json"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    let doc = json_stdout(&o);
    let failures: Vec<&str> = doc["failures"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert!(failures.iter().any(|f| f.starts_with("energy-continuous")), "{failures:?}");
    assert!(failures.iter().any(|f| f.starts_with("double-integral")), "{failures:?}");
}

#[test]
fn simulate_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.json", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["simulate"], &cfg, &a).status.code(), Some(0));
    let o = bin()
        .env("EXPFBM_WORKERS", "2")
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    for f in ["samples.csv", "paths.csv", "simulate.json"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let csv = std::fs::read_to_string(a.join("samples.csv")).unwrap();
    assert!(csv.starts_with("# code_version:"));
    assert!(csv.contains("# config_hash:") && csv.contains("# seed: ") && csv.contains("# grid: uniform n=256"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 2001);
}

#[test]
fn seed_changes_hash_and_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.json", SMALL);
    let a = run(&["simulate", "--json"], &cfg, &dir.path().join("a"));
    let b = run(&["simulate", "--json", "--seed", "7"], &cfg, &dir.path().join("b"));
    let (a, b) = (json_stdout(&a), json_stdout(&b));
    assert_ne!(a["config_hash"], b["config_hash"]);
    assert_eq!(b["seed"], 7);
}

#[test]
fn zero_paths_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.json", SMALL);
    let out = dir.path().join("out");
    let o = run(&["simulate", "--paths", "0"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    let data: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data, vec!["path_id,F,lnF,X"]);
}

#[test]
fn only_selects_a_single_report_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.json", SMALL);
    let out = dir.path().join("out");
    assert_eq!(run(&["simulate"], &cfg, &out).status.code(), Some(0));
    let o = run(&["bounds", "--only", "jkvm1b", "--no-simulate", "--json"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json_stdout(&o);
    let reports = doc["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0]["bound_id"], "jkvm1b");
    assert_eq!(doc["summary"].as_array().unwrap().len(), 1);
}

#[test]
fn missing_cache_with_no_simulate_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.json", SMALL);
    let o = run(&["bounds", "--only", "jkvm1b", "--no-simulate"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing dependency") && err.contains("simulate"), "{err}");
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let unknown = config(dir.path(), "u.json", r#"{"horizon": 1.0}"#);
    assert_eq!(run(&["simulate"], &unknown, &out).status.code(), Some(2));
    let bad = config(dir.path(), "b.json", r#"{"hurst": 0.3}"#);
    assert_eq!(run(&["kernel-verify"], &bad, &out).status.code(), Some(2));
    let ok = config(dir.path(), "c.json", SMALL);
    assert_eq!(run(&["bounds", "--only", "nonsense"], &ok, &out).status.code(), Some(2));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(2));
}

#[test]
fn exhausted_budget_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "c.json",
        r#"{"centering_paths": 1000, "nested_paths": 5000, "inner_paths": 50, "budget_seconds": 0.2}"#,
    );
    let o = run(&["malliavin", "--only", "kld2", "--json"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3));
    let doc = json_stdout(&o);
    assert_eq!(doc["complete"], false);
}

#[test]
fn malliavin_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "c.json",
        r#"{"centering_paths": 1000, "nested_paths": 100, "inner_paths": 50, "dphi_paths": 10,
            "fd_check_paths": 2, "clark_ocone_paths": 2000, "clark_ocone_grids": [16, 64]}"#,
    );
    let out = dir.path().join("out");
    let o = run(&["malliavin"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let profile = std::fs::read_to_string(out.join("malliavin_profile.csv")).unwrap();
    assert!(profile.contains("theta,kernel_T_theta,mean_dx_normalized,mean_dx,bound,margin"));
    let o = run(&["report", "--json"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0));
    let doc = json_stdout(&o);
    let ids: Vec<&str> = doc["summary"].as_array().unwrap().iter().map(|r| r["bound_id"].as_str().unwrap()).collect();
    assert!(ids.contains(&"kld2") && ids.contains(&"clark-ocone-decrease"), "{ids:?}");
    assert!(out.join("report.md").exists());
}

#[test]
fn report_without_documents_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.json", "{}");
    assert_eq!(run(&["report"], &cfg, &dir.path().join("empty")).status.code(), Some(2));
}
