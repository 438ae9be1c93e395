use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fairprice_core::data::RawTable;

const BIN: &str = env!("CARGO_BIN_EXE_fairprice");

fn run(workdir: &Path, args: &[&str]) -> Output {
    run_env(workdir, args, &[])
}

fn run_env(workdir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.arg("--workdir").arg(workdir).args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_code(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).expect("error JSON on stderr");
    v["error"]["code"].as_str().unwrap().to_string()
}

fn synth(dir: &Path, n: usize) {
    ok(&run(dir, &["synth", "--n", &n.to_string(), "--seed", "3", "--out", "data/s.csv"]));
}

/// Small, fast training settings shared by fit and sweep.
const FAST: [&str; 10] = [
    "--data",
    "data/s.csv",
    "--schema",
    "data/s.schema.json",
    "--epochs",
    "1",
    "--batch-size",
    "64",
    "--component-estimator",
    "rdc",
];

fn files_in(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p.file_name().unwrap().into(), bytes)
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn synth_writes_rows_schema_and_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 10_000);
    let first = files_in(&dir.path().join("data"));
    let names: Vec<_> = first.iter().map(|(p, _)| p.display().to_string()).collect();
    assert_eq!(names, ["s.csv", "s.manifest.json", "s.schema.json"]);
    let table = RawTable::read(&dir.path().join("data/s.csv")).unwrap();
    assert_eq!(table.rows.len(), 10_000);
    synth(dir.path(), 10_000);
    assert_eq!(files_in(&dir.path().join("data")), first);
}

#[test]
fn synth_below_generator_minimum_fails_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["synth", "--n", "50", "--out", "s.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_code(&out), "invalid_input");
    assert!(!dir.path().join("s.csv").exists());
}

#[test]
fn invalid_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 300);
    let mut args = vec!["fit", "--arch", "three-stage", "--out", "f"];
    args.extend(FAST);
    let out = run(dir.path(), &args);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_code(&out), "usage");

    let mut args = vec!["fit", "--arch", "autoencoder", "--penalty", "none", "--lambda", "1", "--out", "f"];
    args.extend(FAST);
    assert_eq!(run(dir.path(), &args).status.code(), Some(2));

    let out = run(dir.path(), &["hgr", "--data", "data/s.csv", "--cols", "age"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["fit", "--arch", "autoencoder", "--out", "f"];
    args.extend(FAST);
    let out = run(dir.path(), &args);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_code(&out), "io_error");
}

#[test]
fn fit_is_deterministic_and_reports_unfair_dependence() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 400);
    for arch in ["two-stage", "autoencoder"] {
        let mut args = vec!["fit", "--arch", arch, "--penalty", "none", "--lambda", "0", "--out"];
        args.push("a");
        args.extend(FAST);
        ok(&run(dir.path(), &args));
        let first = files_in(&dir.path().join("a"));
        let names: Vec<_> = first.iter().map(|(p, _)| p.display().to_string()).collect();
        assert_eq!(
            names,
            ["encoder.json", "manifest.json", "model.json", "report.csv", "report.json", "trace.csv"]
        );
        ok(&run(dir.path(), &args));
        assert_eq!(files_in(&dir.path().join("a")), first, "{arch}");

        let report: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("a/report.json")).unwrap()).unwrap();
        let hgr = report["body"]["fairness"]["hgr_nn"].as_f64().expect("hgr_nn present");
        assert!((0.0..=1.0).contains(&hgr));
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["body"]["outputs"].as_array().unwrap().len(), 5);
        assert_eq!(manifest["body"]["inputs"].as_object().unwrap().len(), 2);
        assert!(manifest["body"].get("wall_clock_seconds").is_none());
    }
}

#[test]
fn timings_flag_records_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(dir.path(), &["--timings", "synth", "--n", "100", "--out", "s.csv"]));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("s.manifest.json")).unwrap()).unwrap();
    assert!(manifest["body"]["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
}

fn sweep_rows(dir: &Path, out: &str) -> RawTable {
    RawTable::read(&dir.join(out).join("sweep.csv")).unwrap()
}

#[test]
fn sweep_covers_the_grid_and_matches_fit() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 300);
    let lambdas = "0,0.50,1,2e0,4";
    let mut args = vec!["sweep", "--lambdas", lambdas, "--seeds", "0,1,2,3,4", "--out", "sw"];
    args.extend(FAST);
    ok(&run_env(dir.path(), &args, &[("FAIRPRICE_THREADS", "1")]));
    let table = sweep_rows(dir.path(), "sw");
    assert_eq!(table.rows.len(), 50);
    let col = |name: &str| table.header.iter().position(|h| h == name).unwrap();
    assert!(table.rows.iter().all(|r| r[col("status")] == "ok"));
    let echoed: Vec<&str> = table.rows.iter().step_by(5).take(5).map(|r| r[col("lambda")].as_str()).collect();
    assert_eq!(echoed.join(","), lambdas);
    assert_eq!(table.numeric_column("accuracy").unwrap().len(), 50);

    // Cell-for-cell agreement of the λ = 0 rows with `fit`.
    for (arch, seed) in [("two-stage", "1"), ("autoencoder", "4")] {
        let mut fit = vec!["fit", "--arch", arch, "--penalty", "hgr", "--seed", seed, "--out", "f"];
        fit.extend(FAST);
        ok(&run(dir.path(), &fit));
        let report = RawTable::read(&dir.path().join("f/report.csv")).unwrap();
        let row = table
            .rows
            .iter()
            .find(|r| r[col("arch")] == arch && r[col("lambda")] == "0" && r[col("seed")] == seed)
            .unwrap();
        assert_eq!(report.header[..], table.header[5..]);
        assert_eq!(report.rows[0][..], row[5..], "{arch}");
    }

    ok(&run_env(dir.path(), &args, &[("FAIRPRICE_THREADS", "2")]));
    assert_eq!(fs::read(dir.path().join("sw/sweep.csv")).unwrap(), {
        ok(&run_env(dir.path(), &args, &[("FAIRPRICE_THREADS", "1")]));
        fs::read(dir.path().join("sw/sweep.csv")).unwrap()
    });
}

#[test]
fn sweep_records_cell_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 300);
    let mut args = vec!["sweep", "--arch", "autoencoder", "--lambdas=0,-1", "--seeds", "0", "--out", "sw"];
    args.extend(FAST);
    ok(&run(dir.path(), &args));
    let table = sweep_rows(dir.path(), "sw");
    let status: Vec<&str> = table.rows.iter().map(|r| r[3].as_str()).collect();
    assert_eq!(status, ["ok", "error"]);
    assert!(table.rows[1][4].contains("nonnegative"), "{}", table.rows[1][4]);
    assert!(table.rows[1][5..].iter().all(String::is_empty));
}

#[test]
fn bad_thread_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 300);
    let mut args = vec!["sweep", "--lambdas", "0", "--seeds", "0", "--out", "sw"];
    args.extend(FAST);
    let out = run_env(dir.path(), &args, &[("FAIRPRICE_THREADS", "zero")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn hgr_estimators_run_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2000);
    for est in ["nn", "witsenhausen", "rdc"] {
        let args = ["hgr", "--data", "data/s.csv", "--cols", "color,gender", "--estimator", est, "--out", "h.json"];
        ok(&run(dir.path(), &args));
        let first = fs::read(dir.path().join("h.json")).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
        let value = v["body"]["value"].as_f64().unwrap();
        assert!(value > 0.2 && value <= 1.0, "{est}: {value}");
        assert!(dir.path().join("h.manifest.json").exists());
        ok(&run(dir.path(), &args));
        assert_eq!(fs::read(dir.path().join("h.json")).unwrap(), first);
    }
    let out = run(dir.path(), &["hgr", "--data", "data/s.csv", "--cols", "age,nope"]);
    assert_eq!(error_code(&out), "unknown_column");
}
