#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

use cdbuffer::config::ExperimentConfig;
use cdbuffer::run::{cached_source_model, SourceModel};

/// Adaptation step size used for the toy-scale runs. The published default
/// (1e-4) barely moves a 16x16 network within a few hundred steps.
pub const TOY_LR: f64 = 3e-3;

pub fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("source-cache")
}

/// Default configuration with the toy step size.
pub fn toy_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.hyper.lr = TOY_LR;
    c
}

/// Source model for `seed` under the default source settings, trained once
/// and cached on disk across test binaries.
pub fn source(seed: u64) -> SourceModel {
    static CELL: OnceLock<Mutex<HashMap<u64, SourceModel>>> = OnceLock::new();
    let mut m = CELL.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    m.entry(seed)
        .or_insert_with(|| cached_source_model(&ExperimentConfig::default(), seed, &cache_dir()).expect("source model"))
        .clone()
}

use std::path::Path;
use std::process::{Command, Output};

/// Small settings that keep every CLI verb under a second or two.
pub const QUICK: &[&str] =
    &["--train-size", "200", "--epochs", "1", "--eval-size", "64", "--steps", "6", "--eval-every", "2", "--lr", "0.003"];

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdbuffer")).env_remove("CDBUF_SEED").args(args).output().expect("binary runs")
}

pub fn cli_ok(args: &[&str]) -> Output {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn with_quick<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(QUICK);
    v
}

/// Runs every verb into `dir`; returns each produced file with its bytes
/// plus the concatenated stdout.
pub fn run_all_verbs(dir: &Path) -> (Vec<(String, Vec<u8>)>, Vec<u8>) {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let (m, st, a, ab, sw, ds, st2) =
        (p("m"), p("m/source.cdstats"), p("a"), p("ablate.csv"), p("sweep.csv"), p("target.cddata"), p("again.cdstats"));
    let model = p("m/model.cdckpt");
    let cache = p("cache");
    let runs: Vec<Vec<&str>> = vec![
        with_quick(&["train-source", "--out-dir", &m]),
        with_quick(&["precompute-stats", "--model", &model, "--out", &st2]),
        with_quick(&["adapt", "--model", &model, "--stats", &st, "--out-dir", &a, "--save-state"]),
        with_quick(&["ablate", "--model", &model, "--stats", &st, "--out", &ab]),
        with_quick(&["sweep", "--out", &sw, "--seeds", "2", "--severities", "0,0.5", "--cache-dir", &cache]),
        with_quick(&["dump-dataset", "--out", &ds, "--kind", "gaussian-noise", "--severity", "0.3"]),
    ];
    let mut stdout = Vec::new();
    for args in &runs {
        stdout.extend(cli_ok(args).stdout);
    }
    let files = ["m/model.cdckpt", "m/source.cdstats", "again.cdstats", "a/report.json", "a/steps.csv", "a/adapted.cdckpt", "ablate.csv", "sweep.csv", "target.cddata"];
    let files = files.iter().map(|f| (f.to_string(), std::fs::read(dir.join(f)).expect(f))).collect();
    // stdout names the output directory, which differs between runs
    let stdout = String::from_utf8(stdout).unwrap().replace(&dir.to_string_lossy().into_owned(), "<dir>").into_bytes();
    (files, stdout)
}
