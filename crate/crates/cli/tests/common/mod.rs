#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use refuter_cli::commands::{cmd_run, RunResult};
use refuter_cli::config::RunConfig;

pub fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

pub fn toy_config() -> RunConfig {
    RunConfig::load(&toy_dir().join("run.toml")).expect("toy config")
}

pub fn run_toy(cfg: &RunConfig, out: &Path) -> RunResult {
    cmd_run(cfg, &toy_dir(), out).expect("toy run")
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .expect("read dir")
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

/// Compares a run directory against the committed golden copy. With
/// `REFUTER_BLESS=1` the golden copy is rewritten instead.
pub fn check_golden(out: &Path) -> Result<usize, String> {
    let golden = toy_dir().join("golden");
    if std::env::var_os("REFUTER_BLESS").is_some() {
        let _ = fs::remove_dir_all(&golden);
        fs::create_dir_all(&golden).unwrap();
        for f in files(out) {
            fs::copy(out.join(&f), golden.join(&f)).unwrap();
        }
    }
    let (want, got) = (files(&golden), files(out));
    if want != got {
        return Err(format!("file sets differ: golden {want:?}, run {got:?}"));
    }
    for f in &want {
        let a = fs::read(golden.join(f)).unwrap();
        let b = fs::read(out.join(f)).unwrap();
        if a != b {
            return Err(format!("{f} differs from golden"));
        }
    }
    Ok(want.len())
}
