mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;
use dvorl_core::pipeline::{FILTERED_BUFFER, SOURCE_BUFFER, TIMING, VALUES};

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(&path, common::small_config().to_toml_string()).unwrap();
    path
}

fn dvorl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dvorl")).args(args).output().unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn missing_threshold_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config_path("cliff_walk.toml")).unwrap();
    let broken: String = text.lines().filter(|l| !l.starts_with("selection_threshold")).map(|l| format!("{l}\n")).collect();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, broken).unwrap();
    let out = dvorl(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("dve.selection_threshold"), "{stderr}");
}

#[test]
fn unknown_field_and_subcommand_fail() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config_path("cliff_walk.toml")).unwrap();
    let path = dir.path().join("typo.toml");
    std::fs::write(&path, text.replace("moving_average_window", "moving_avg_window")).unwrap();
    let out = dvorl(&["generate", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dve"), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dvorl(&["frobnicate", "--config", path.to_str().unwrap()]).status.success());
}

#[test]
fn missing_stage_input_is_stage_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dvorl(&["train-dve", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("empty").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage train-dve"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stages_compose_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let (whole, staged) = (dir.path().join("whole"), dir.path().join("staged"));
    assert!(dvorl(&["run", "--config", cfg, "--seed", "3", "--out", whole.to_str().unwrap()]).status.success());
    for stage in ["generate", "train-dve", "value", "filter", "train-rl", "evaluate"] {
        let out = dvorl(&[stage, "--config", cfg, "--seed", "3", "--out", staged.to_str().unwrap()]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
        if stage == "filter" {
            assert!(String::from_utf8_lossy(&out.stdout).starts_with("kept "));
        }
    }
    let skip = ["report.json", TIMING];
    let staged_files: Vec<PathBuf> = files(&staged);
    let whole_files: Vec<PathBuf> =
        files(&whole).into_iter().filter(|p| !skip.iter().any(|s| p.ends_with(s))).collect();
    assert_eq!(whole_files.len(), staged_files.len());
    for f in &whole_files {
        let rel = f.strip_prefix(&whole).unwrap();
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(staged.join(rel)).unwrap(), "{}", rel.display());
    }
}

#[test]
fn filter_accepts_explicit_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let run = dir.path().join("run");
    assert!(dvorl(&["run", "--config", cfg, "--out", run.to_str().unwrap()]).status.success());
    let output = dir.path().join("elsewhere/kept.dvrb");
    let out = dvorl(&[
        "filter",
        "--config",
        cfg,
        "--buffer",
        run.join(SOURCE_BUFFER).to_str().unwrap(),
        "--values",
        run.join(VALUES).to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(output).unwrap(), std::fs::read(run.join(FILTERED_BUFFER)).unwrap());
}

#[test]
fn benchmarks_emit_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let t = dir.path().join("t");
    assert!(dvorl(&["bench-transfer", "--config", cfg, "--out", t.to_str().unwrap()]).status.success());
    let table = std::fs::read_to_string(t.join("transfer.csv")).unwrap();
    // identical and target settings, each with a baseline and two feature modes.
    assert_eq!(table.lines().count(), 1 + 2 * 3);
    let r = dir.path().join("r");
    assert!(dvorl(&["bench-removal", "--config", cfg, "--out", r.to_str().unwrap()]).status.success());
    let curve = std::fs::read_to_string(r.join("removal_curve.csv")).unwrap();
    let rows: Vec<&str> = curve.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    let zero: Vec<&str> = rows.iter().filter(|l| l.starts_with("0.0,")).map(|l| l.split_once(',').unwrap().1.split_once(',').unwrap().1).collect();
    assert_eq!(zero.len(), 2);
    assert_eq!(zero[0], zero[1], "fraction 0 is the same run for both sides");
}
