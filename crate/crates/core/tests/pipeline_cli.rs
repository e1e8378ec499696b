#[path = "support/chain.rs"]
mod chain;

use std::path::Path;
use std::process::{Command as Proc, Output};

use chain::*;
use liquidseg::pipeline::Command;

fn cli(ws: &Path, args: &[&str]) -> Output {
    Proc::new(env!("CARGO_BIN_EXE_liquidseg"))
        .args(args)
        .arg("--workspace")
        .arg(ws)
        .arg("-q")
        .env_remove("LIQUIDSEG_WORKSPACE")
        .output()
        .unwrap()
}

#[test]
fn missing_prerequisite_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let out = cli(d.path(), &["translate"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train-translate"), "{err}");
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let d = tempfile::tempdir().unwrap();
    let out = cli(d.path(), &["synth-gen", "--set", "synth.image_size=60"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth.image_size"));
    let out = cli(d.path(), &["synth-gen", "--set", "synth.no_such_field=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_field"));
}

#[test]
fn desk_refuses_a_config_file() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.toml");
    std::fs::write(&cfg, "seed = 3\n").unwrap();
    let out = cli(d.path(), &["run-all", "--desk", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn show_config_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let out = cli(d.path(), &["show-config", "--seed", "9"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = liquidseg::pipeline::config_from_str(&text, &[]).unwrap();
    assert_eq!(cfg.seed, 9);
}

#[test]
fn synth_gen_rerun_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let set = ["--set", "synth.colored_count=6", "--set", "synth.transparent_count=6", "--set", "synth.test_count=3"];
    let args: Vec<&str> = ["synth-gen"].iter().chain(set.iter()).copied().collect();
    assert!(cli(d.path(), &args).status.success());
    let first = snapshot(d.path());
    assert!(cli(d.path(), &args).status.success());
    assert!(differing(&first, &snapshot(d.path())).is_empty());
    assert!(d.path().join("logs/synth-gen.log").exists());
}

#[test]
fn report_refuses_mixed_seeds() {
    let cfg = reduced_config();
    let d = tempfile::tempdir().unwrap();
    run_chain(&cfg, d.path(), &Command::ALL[..Command::ALL.len() - 1]).unwrap();
    let out = cli(d.path(), &["report", "--seed", "1", "--config", "/dev/null"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
}

#[test]
fn reduced_chain_is_deterministic() {
    let (n, diff) = determinism_check();
    assert!(n > 50, "only {n} artifacts");
    assert!(diff.is_empty(), "differing artifacts: {diff:?}");
}
