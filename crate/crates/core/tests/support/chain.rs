//! Running pipeline commands in scratch workspaces and comparing the
//! artifacts they leave behind.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use liquidseg::pipeline::{config_from_str, run_command, Command, Logger, PipelineConfig, RunOptions, Workspace};

/// A few images and a single epoch per stage: every command runs, in
/// seconds rather than minutes.
pub fn reduced_config() -> PipelineConfig {
    let o: Vec<String> = [
        "synth.colored_count=16",
        "synth.transparent_count=16",
        "synth.test_count=8",
        "synth.empty_frames=6",
        "translation.epochs=1",
        "translation.num_patches=16",
        "segmentation.epochs=2",
        "pour.scenarios=[[0.0, 0.25]]",
        "pour.runs_per_scenario=1",
        "eval.fractions=[0.25, 0.5]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    config_from_str("", &o).expect("valid reduced config")
}

/// Run `cmds` in order; returns the wall time per command.
pub fn run_chain(cfg: &PipelineConfig, root: &Path, cmds: &[Command]) -> liquidseg::Result<Vec<(Command, Duration)>> {
    let ws = Workspace::new(root);
    cmds.iter()
        .map(|&c| {
            let t = Instant::now();
            run_command(c, cfg, &ws, RunOptions::default(), &mut Logger::silent())?;
            Ok((c, t.elapsed()))
        })
        .collect()
}

/// Every file under `root` except logs, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(root).unwrap().to_path_buf();
            if rel.starts_with("logs") {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Relative paths that differ between two snapshots, including files
/// present on one side only.
pub fn differing(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Vec<PathBuf> {
    let mut keys: Vec<&PathBuf> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}

/// Run the reduced chain in two fresh directories and list the artifacts
/// that differ. Also returns how many files were compared.
pub fn determinism_check() -> (usize, Vec<PathBuf>) {
    let cfg = reduced_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        run_chain(&cfg, d.path(), &Command::ALL).unwrap();
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    (sa.len(), differing(&sa, &sb))
}
