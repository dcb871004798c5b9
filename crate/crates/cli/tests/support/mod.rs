//! Helpers for driving the `epiflow` binary from tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use epiflow_core::PandemicSeries;

pub fn epiflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epiflow"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

/// Runs the binary and panics with its stderr unless it exits with `code`.
pub fn expect_code(args: &[&str], code: i32) -> Output {
    let out = epiflow(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "epiflow {}\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn write_series(dir: &Path, name: &str, series: &PandemicSeries) -> PathBuf {
    let path = dir.join(name);
    series.export_csv(&path).unwrap();
    path
}

/// Header-keyed rows of a simple (unquoted) CSV file.
pub fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    lines
        .map(|l| {
            header
                .iter()
                .map(|h| h.to_string())
                .zip(l.split(',').map(str::to_string))
                .collect()
        })
        .collect()
}

/// Largest `|rel_error|` in an `errors.csv`, skipping undefined entries.
pub fn max_abs_error(path: &Path) -> (f64, usize) {
    let rows = read_csv(path);
    let n = rows.len();
    let worst = rows
        .iter()
        .filter(|r| !r["rel_error"].is_empty())
        .map(|r| r["rel_error"].parse::<f64>().unwrap().abs())
        .fold(0.0, f64::max);
    (worst, n)
}

/// Directory holding the gains `learn` cached (from its `learn.json`).
pub fn gains_dir(out: &Path) -> PathBuf {
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("learn.json")).unwrap()).unwrap();
    out.join(index["directory"].as_str().unwrap())
}

/// Every file under `dir` by relative path, except `provenance.json`
/// (which records the worker count).
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().unwrap() != "provenance.json" {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
