#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/two_model")
}

/// Fresh scratch directory holding a copy of the two-model fixture.
pub fn scratch_copy() -> tempfile::TempDir {
    let dir = tempfile::tempdir().expect("tempdir");
    for entry in std::fs::read_dir(fixture_dir()).expect("fixture dir") {
        let entry = entry.expect("fixture entry");
        std::fs::copy(entry.path(), dir.path().join(entry.file_name())).expect("copy fixture");
    }
    dir
}

pub fn posefuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posefuse"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn posefuse")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of every file below `dir`, keyed by relative path.
pub fn tree_digests(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).expect("read dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, sha256_hex(&std::fs::read(&path).expect("read file")));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Every subcommand with arguments that keep the run short. The flag says
/// whether standard output is data (timing tables are not).
pub const SUBCOMMAND_RUNS: &[(&[&str], bool)] = &[
    (&["match", "--config", "run.toml", "--groups", "groups.json"], true),
    (&["match", "--config", "run.toml"], true),
    (&["fuse", "--config", "run.toml", "--strategy", "weighted"], true),
    (
        &["fuse", "--config", "run.toml", "--strategy", "simple", "--output", "simple.json", "--summary", "simple_summary.json"],
        true,
    ),
    (
        &[
            "train-stack", "--config", "run.toml", "--learner", "ridge", "--augment-budget", "20", "--model", "ridge.bin",
            "--summary", "ridge_report.json",
        ],
        true,
    ),
    (
        &["train-stack", "--config", "run.toml", "--learner", "random_forest", "--trees", "8", "--model", "forest.bin"],
        true,
    ),
    (
        &["train-stack", "--config", "run.toml", "--learner", "mlp", "--epochs", "5", "--hidden", "16", "--model", "mlp.bin"],
        true,
    ),
    (
        &[
            "fuse", "--config", "run.toml", "--strategy", "stack", "--model", "mlp.bin", "--output", "stacked.json",
            "--summary", "stacked_summary.json",
        ],
        true,
    ),
    (&["augment", "--config", "run.toml", "--output", "augmented.json", "--budget", "10", "--clusters", "3"], true),
    (&["eval", "--config", "run.toml", "--results", "fused_results.json", "--distance-threshold", "8", "--json"], true),
    (&["bench", "--repeats", "3", "--resolutions", "320x240,640x480", "--output", "bench_poses.json"], false),
    (&["synth", "--out-dir", "synth_out", "--scenes", "4", "--seed", "5"], true),
    (
        &[
            "experiment", "--scenes", "10", "--strategy", "weighted", "--strategy", "stack:ridge", "--stack-train-scenes",
            "10", "--json",
        ],
        true,
    ),
];

/// Runs every subcommand in a fresh fixture copy; returns the file digests
/// and the data-bearing standard output of each run, or the first failure.
pub fn run_all_subcommands(extra: &[&str]) -> Result<(BTreeMap<String, String>, Vec<String>), String> {
    let dir = scratch_copy();
    let mut stdout = Vec::new();
    for (args, data_out) in SUBCOMMAND_RUNS {
        let mut full: Vec<&str> = extra.to_vec();
        full.extend_from_slice(args);
        let out = posefuse(dir.path(), &full);
        if !out.status.success() {
            return Err(format!(
                "`posefuse {}` exited with {:?}: {}",
                full.join(" "),
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        stdout.push(if *data_out { sha256_hex(&out.stdout) } else { String::new() });
    }
    Ok((tree_digests(dir.path()), stdout))
}
