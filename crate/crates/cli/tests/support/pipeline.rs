//! Runs the `ciret` binary over a private copy of the committed fixture.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

pub const STAGES: [&str; 7] =
    ["build-vocab", "fit-scorer", "build-trie", "assign-cis", "build-index", "warm-cache", "eval"];

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn golden_report() -> Vec<u8> {
    fs::read(fixture_dir().join("golden/report.json")).expect("golden report")
}

/// Copy fixture inputs and config into a fresh directory.
pub fn stage_fixture() -> TempDir {
    let dir = tempfile::tempdir().expect("tempdir");
    for entry in fs::read_dir(fixture_dir()).expect("fixture dir") {
        let path = entry.expect("dir entry").path();
        let keep = path.extension().is_some_and(|e| e == "jsonl" || e == "toml");
        if path.is_file() && keep {
            fs::copy(&path, dir.path().join(path.file_name().unwrap())).expect("copy fixture");
        }
    }
    dir
}

pub fn config(dir: &Path) -> PathBuf {
    dir.join("ciret.toml")
}

pub fn ciret(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ciret")).args(args).output().expect("spawn ciret")
}

pub fn ciret_with(dir: &Path, args: &[&str]) -> Output {
    let cfg = config(dir);
    let mut all = vec!["--config", cfg.to_str().unwrap()];
    all.extend_from_slice(args);
    ciret(&all)
}

/// Run every pipeline stage; the error names the failing stage.
pub fn run_pipeline(dir: &Path) -> Result<(), String> {
    for stage in STAGES {
        let out = ciret_with(dir, &[stage]);
        if !out.status.success() {
            return Err(format!("{stage} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

pub fn report(dir: &Path) -> Vec<u8> {
    fs::read(dir.join("out/report/report.json")).expect("report.json")
}
