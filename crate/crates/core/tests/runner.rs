use std::fs;
use std::path::Path;

use spikeforce::config::{DatasetSource, ExperimentConfig};
use spikeforce::eval::ModelSpec;
use spikeforce::report::{read_csv, report_tables, CurveRow, SummaryRow, CURVES_CSV, SUMMARY_CSV};
use spikeforce::runner::{run, RunOptions, Stages, MANIFEST};

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetSource { preset: Some("s2-flexion".parse().unwrap()), path: None };
    cfg.decoders = vec![ModelSpec::Baseline, ModelSpec::Li, ModelSpec::Lif, ModelSpec::EncodedLi];
    cfg.n_seeds = 2;
    cfg.eval.train.epochs = 3;
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn all() -> RunOptions {
    RunOptions { stages: Stages::all(), dry_run: false }
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let summary = run(&cfg, &all()).unwrap();
    let names: Vec<&str> = summary.artifacts.iter().map(|a| a.path.as_str()).collect();
    for expected in [
        "config.toml",
        "run.log",
        SUMMARY_CSV,
        CURVES_CSV,
        "robustness/deltas.csv",
        "footprint/footprint.csv",
        "stats/mann_whitney.csv",
        "metrics/task_metrics.csv",
    ] {
        assert!(names.contains(&expected), "missing {expected}: {names:?}");
    }
    assert!(names.iter().any(|n| n.starts_with("models/") && n.ends_with(".spkf")));
    assert!(names.iter().any(|n| n.starts_with("loss/")));
    assert!(dir.path().join(MANIFEST).is_file());

    let rows: Vec<SummaryRow> = read_csv(&dir.path().join(SUMMARY_CSV)).unwrap();
    assert_eq!(rows.len(), 4);
    let curves: Vec<CurveRow> = read_csv(&dir.path().join(CURVES_CSV)).unwrap();
    assert_eq!(curves.len(), 4 * 6);
    // Clean and rate-0 evaluations coincide.
    for r in &rows {
        let c = curves.iter().find(|c| c.model == r.model && c.omission_pct == 0.0).unwrap();
        assert_eq!(c.rmse_mean, r.rmse_mean);
        assert_eq!(c.mae_mean, r.mae_mean);
    }
    let text = report_tables(dir.path()).unwrap();
    assert!(text.contains("Decoder performance") && text.contains("Omission Level (%)"));
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = tiny(a.path());
    cfg.decoders = vec![ModelSpec::Baseline, ModelSpec::Li];
    let first = run(&cfg, &all()).unwrap();
    let manifest = fs::read(a.path().join(MANIFEST)).unwrap();
    fs::remove_dir_all(a.path()).unwrap();
    let second = run(&cfg, &all()).unwrap();
    assert_eq!(first.artifacts, second.artifacts);
    assert_eq!(manifest, fs::read(a.path().join(MANIFEST)).unwrap());

    // Only the recorded config mentions the output location.
    cfg.output_dir = b.path().to_path_buf();
    let moved = run(&cfg, &all()).unwrap();
    for (x, y) in first.artifacts.iter().zip(&moved.artifacts) {
        assert_eq!(x.path, y.path);
        if x.path != "config.toml" {
            assert_eq!(x.sha256, y.sha256, "{}", x.path);
        }
    }
}

#[test]
fn dry_run_writes_manifest_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny(&out);
    let s = run(&cfg, &RunOptions { stages: Stages::all(), dry_run: true }).unwrap();
    assert!(s.artifacts.is_empty());
    let entries: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec![std::ffi::OsString::from(MANIFEST)]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest["dry_run"], true);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn runtime_failure_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.dataset = DatasetSource { preset: None, path: Some(dir.path().join("nowhere")) };
    assert!(run(&cfg, &all()).is_err());
    let log = fs::read_to_string(dir.path().join("run.log")).unwrap();
    assert!(log.contains("error:"));
}

#[test]
fn generated_files_feed_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("gen");
    let mut cfg = tiny(&data);
    cfg.decoders = vec![ModelSpec::Baseline];
    run(&cfg, &RunOptions { stages: Stages { generate: true, ..Default::default() }, dry_run: false }).unwrap();
    let report = spikeforce::dataset::validate_dataset(&data.join("data")).unwrap();
    assert!(report.is_valid());
    assert_eq!(report.files.len(), 10);

    let from_preset = dir.path().join("a");
    let from_files = dir.path().join("b");
    let mut c1 = tiny(&from_preset);
    c1.decoders = vec![ModelSpec::Baseline];
    let mut c2 = c1.clone();
    c2.output_dir = from_files.clone();
    c2.dataset = DatasetSource { preset: None, path: Some(data.join("data")) };
    run(&c1, &all()).unwrap();
    run(&c2, &all()).unwrap();
    assert_eq!(
        fs::read(from_preset.join(SUMMARY_CSV)).unwrap(),
        fs::read(from_files.join(SUMMARY_CSV)).unwrap()
    );
}
