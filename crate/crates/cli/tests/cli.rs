use std::path::Path;
use std::process::{Command, Output};

fn fpk(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpk"))
        .args(args)
        .env("FPK_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn config(checks: &str, extra: &str) -> String {
    format!(
        r#"{{
  "schema": 1,
  "name": "cli-case",
  "dimension": 1,
  "domain": {{"lower": [-4.0], "upper": [4.0]}},
  "cells": 160,
  "horizon": 0.5,
  "first": {{"builtin": "linear", "rate": 1.0, "sigma": 0.5}},
  "initial": {{"gaussian": {{"mean": [0.0], "variance": 0.5}}}},
  "checks": [{checks}],
  "exponents": {{"p": 2.0}},
  "particles": 2000{extra}
}}"#
    )
}

#[test]
fn passing_run_exits_zero_under_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("case.json");
    std::fs::write(&cfg, config("\"sobolev\"", "")).unwrap();
    let out = fpk(dir.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("sobolev[0]"));
    let manifest = std::fs::read_to_string(dir.path().join("cli-case/manifest.json")).unwrap();
    assert!(manifest.contains("\"passed\""));
}

#[test]
fn failed_check_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("case.json");
    std::fs::write(
        &cfg,
        config("\"superposition\"", "").replace("\"particles\": 2000", "\"particles\": 50"),
    )
    .unwrap();
    let out = fpk(dir.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn bad_config_exits_one_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("case.json");
    std::fs::write(&cfg, config("\"sobolev\"", "").replace("\"p\": 2.0", "\"p\": 0.5")).unwrap();
    let out = fpk(dir.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 11") && err.contains("p > 1"), "{err}");
    let missing = fpk(dir.path(), &["run", "does-not-exist.json"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn flag_overrides_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("case.json");
    std::fs::write(&cfg, config("\"sobolev\"", "")).unwrap();
    let other = dir.path().join("elsewhere");
    let out = fpk(
        dir.path(),
        &["--output-root", other.to_str().unwrap(), "run", cfg.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(other.join("cli-case/reports.csv").is_file());
    assert!(!dir.path().join("cli-case").exists());
}

#[test]
fn sweep_writes_fits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("case.json");
    std::fs::write(&cfg, config("\"sobolev\"", "")).unwrap();
    let out = fpk(
        dir.path(),
        &[
            "sweep",
            cfg.to_str().unwrap(),
            "--param",
            "kappa",
            "--values",
            "0.5,1,2",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cli-case-sweep-kappa/sweep.csv")).unwrap();
    assert!(csv.contains("fit-slope"));
    let bad = fpk(
        dir.path(),
        &[
            "sweep",
            cfg.to_str().unwrap(),
            "--param",
            "temperature",
            "--values",
            "1",
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn ot_prints_value() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, "x0,weight\n0.0,0.5\n1.0,0.5\n").unwrap();
    std::fs::write(&b, "x0,weight\n0.0,0.5\n3.0,0.5\n").unwrap();
    let out = fpk(
        dir.path(),
        &[
            "ot",
            a.to_str().unwrap(),
            b.to_str().unwrap(),
            "--cost",
            "power",
            "--delta",
            "2",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["value"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert!(dir.path().join("ot/plan.csv").is_file());
}

#[test]
fn zvonkin_command_passes_on_sine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("z.json");
    let raw = config("", "").replace(
        r#""first": {"builtin": "linear", "rate": 1.0, "sigma": 0.5}"#,
        r#""first": {"builtin": "sine-drift", "amplitude": 1.0, "frequency": 1.0, "sigma": 1.0}"#,
    );
    std::fs::write(&cfg, raw).unwrap();
    let out = fpk(dir.path(), &["zvonkin", cfg.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("cli-case-zvonkin/phi.csv").is_file());
}
