use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use superflow::stats::sha256_hex;

fn superflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_superflow")).args(args).output().expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let mut full = vec!["--out", dir.to_str().unwrap()];
    full.extend_from_slice(args);
    superflow(&full)
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn spectral_run_writes_a_consistent_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["spectral", "--grid", "801"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let spectral = json(&tmp.path().join("spectral.json"));
    assert!((spectral["lambda_c"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    assert_eq!(spectral["criticality"], "product-critical");

    let manifest = json(&tmp.path().join("manifest.json"));
    assert_eq!(manifest["command"], "spectral");
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.len() >= 4);
    for o in outputs {
        let bytes = fs::read(tmp.path().join(o["file"].as_str().unwrap())).unwrap();
        assert_eq!(o["bytes"].as_u64().unwrap(), bytes.len() as u64);
        assert_eq!(o["sha256"].as_str().unwrap(), sha256_hex(&bytes));
    }
    let csv = fs::read_to_string(tmp.path().join("truncations.csv")).unwrap();
    assert!(csv.contains("\r\n"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(superflow(&["--help"]).status.code(), Some(0));
    assert_eq!(superflow(&["no-such-command"]).status.code(), Some(64));
    assert_eq!(superflow(&["--gamma", "abc", "spectral"]).status.code(), Some(64));
    assert_eq!(superflow(&["--model", "super-bm", "--gamma", "2", "spectral"]).status.code(), Some(64));

    let region = ["--gamma", "0.5", "--replicates", "20", "verify", "--experiment", "extinction", "--times", "1", "--region"];
    let one = [&region[..], &["0.25"]].concat();
    assert_eq!(run_in(&tmp.path().join("r1"), &one).status.code(), Some(64));
    let two = [&region[..], &["0.25,0.75"]].concat();
    assert!(matches!(run_in(&tmp.path().join("r2"), &two).status.code(), Some(0) | Some(2)));

    let gated = run_in(&tmp.path().join("gated"), &["--model", "super-bm", "verify", "--experiment", "lln"]);
    assert_eq!(gated.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&gated.stderr).contains("product-criticality"));

    // the untransformed mass of a supercritical model is not flat
    let failed = run_in(
        &tmp.path().join("fail"),
        &["verify", "--experiment", "martingale", "--untransformed", "--replicates", "100", "--n", "50", "--times", "1,2"],
    );
    assert_eq!(failed.status.code(), Some(2));
    let verdict = json(&tmp.path().join("fail/verdict.json"));
    assert_eq!(verdict["pass"], false);
}

#[test]
fn models_lists_the_registry_and_configs_round_trip() {
    let out = superflow(&["models"]);
    assert_eq!(out.status.code(), Some(0));
    let list: Value = serde_json::from_slice(&out.stdout).unwrap();
    let list = list.as_array().unwrap();
    assert!(list.len() >= 3);

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("model.json");
    fs::write(&cfg, serde_json::to_vec(&list[0]["config"]).unwrap()).unwrap();
    let out = run_in(&tmp.path().join("run"), &["--config", cfg.to_str().unwrap(), "spectral", "--grid", "401"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_is_reproducible_for_a_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["--seed", "3", "--replicates", "20", "simulate", "--n", "40", "--times", "0.5,1", "--dump-positions"];
    for name in ["a", "b"] {
        let out = run_in(&tmp.path().join(name), &args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files: Vec<_> = fs::read_dir(tmp.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert!(files.len() > 2);
    for f in &files {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f:?}");
    }

    let other = run_in(&tmp.path().join("c"), &["--seed", "4", "--replicates", "20", "simulate", "--n", "40", "--times", "0.5,1", "--dump-positions"]);
    assert_eq!(other.status.code(), Some(0));
    assert_ne!(json(&tmp.path().join("a/manifest.json"))["outputs"], json(&tmp.path().join("c/manifest.json"))["outputs"]);
}

#[test]
fn transform_reports_zeroed_branching() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["--grid", "401", "transform"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let verdict = json(&tmp.path().join("verdict.json"));
    assert_eq!(verdict["pass"], true);
}
