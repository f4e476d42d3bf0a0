//! The `agld` binary end to end: outputs, exit codes and error messages.

use std::process::{Command, Output};

fn agld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agld")).args(args).output().expect("spawn agld")
}

#[test]
fn small_convex_run_writes_manifest_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = agld(&[
        "convex-sim", "--chains", "20", "--epochs", "3", "--method", "TMU-CA", "--method", "SGLD", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.toml", "TMU-CA.csv", "SGLD.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("TMU-CA.csv")).unwrap();
    assert!(csv.starts_with("method,access,updater,eta,epoch,metric,value\n"), "{csv}");
    // Epochs 0..=3, a w2 and a grad_evals row each.
    assert_eq!(csv.lines().count(), 1 + 4 * 2);
}

#[test]
fn iosim_writes_fault_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("io");
    let o = agld(&["iosim", "--epochs", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("iosim_summary.csv").exists());
    assert!(out.join("iosim_C10.csv").exists());
}

#[test]
fn unknown_method_fails_with_a_message() {
    let o = agld(&["convex-sim", "--method", "XYZ-RA", "--chains", "2"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("error:") && err.contains("XYZ"), "{err}");
}

#[test]
fn replay_of_missing_manifest_fails() {
    let o = agld(&["replay", "/nonexistent/manifest.toml"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest"));
}

#[test]
fn config_for_another_experiment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ridge.toml");
    std::fs::write(&path, "experiment = \"ridge\"\n").unwrap();
    let o = agld(&["convex-sim", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
}
