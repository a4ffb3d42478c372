use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spikeforce(args: &[&str], workers: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spikeforce"));
    cmd.args(args);
    match workers {
        Some(w) => cmd.env("SPIKEFORCE_WORKERS", w),
        None => cmd.env_remove("SPIKEFORCE_WORKERS"),
    };
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn quick(out: &Path) -> Vec<String> {
    ["--preset", "s2-flexion", "--n-seeds", "1", "--epochs", "3", "--out"]
        .iter()
        .map(|s| s.to_string())
        .chain([out.display().to_string()])
        .collect()
}

fn run_cmd(sub: &str, extra: &[&str], out: &Path, workers: Option<&str>) -> Output {
    let mut args = vec![sub.to_string()];
    args.extend(quick(out));
    args.extend(extra.iter().map(|s| s.to_string()));
    spikeforce(&args.iter().map(String::as_str).collect::<Vec<_>>(), workers)
}

#[test]
fn evaluate_emits_fold_averaged_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_cmd("run", &["--decoder", "li"], dir.path(), None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("metrics/summary.csv")).unwrap();
    assert!(summary.starts_with("profile,input,model,direction,n_tasks,n_seeds,rmse_mean"));
    assert!(summary.lines().nth(1).unwrap().starts_with("s2,motor-units,li,flexion,10,1,"));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("Decoder performance"));

    let r = spikeforce(&["report", &dir.path().display().to_string()], None);
    assert_eq!(code(&r), 0);
    assert!(String::from_utf8_lossy(&r.stdout).contains("Omission Level (%)"));
}

#[test]
fn artifacts_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run_cmd("evaluate", &["--decoder", "baseline,lif"], &a, Some("1"))), 0);
    assert_eq!(code(&run_cmd("evaluate", &["--decoder", "baseline,lif"], &b, Some("4"))), 0);
    for rel in ["metrics/summary.csv", "metrics/task_metrics.csv", "stats/mann_whitney.csv", "run.log"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    let o = run_cmd("evaluate", &[], &a, Some("zero"));
    assert_eq!(code(&o), 2);
}

#[test]
fn dry_run_writes_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dry");
    let o = run_cmd("run", &["--dry-run"], &out, None);
    assert_eq!(code(&o), 0);
    let names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("manifest.json")]);
}

#[test]
fn invalid_config_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 4\nn_seeds = 2\n\n[eval.train]\nepochs = 3\nlearning_rat = 0.1\n").unwrap();
    let o = spikeforce(&["train", "--config", &cfg.display().to_string()], None);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 6"), "{err}");

    assert_eq!(code(&spikeforce(&["run", "--decoder", "lstm"], None)), 2);
    assert_eq!(code(&spikeforce(&["run", "--preset", "s3"], None)), 2);
    assert_eq!(code(&spikeforce(&["frobnicate"], None)), 2);
}

#[test]
fn generate_then_validate() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_cmd("generate", &[], dir.path(), None);
    assert_eq!(code(&o), 0);
    let data = dir.path().join("data");
    let v = spikeforce(&["validate", &data.display().to_string()], None);
    assert_eq!(code(&v), 0);
    assert!(String::from_utf8_lossy(&v.stdout).contains("ok: 10 file(s) valid"));

    // Break one spike record.
    let file = data.join("s2_flexion_index_rep1.sfd");
    let text = fs::read_to_string(&file).unwrap();
    let broken = text.replacen("[spikes]\n", "[spikes]\n0 99999\n", 1);
    fs::write(&file, broken).unwrap();
    let v = spikeforce(&["validate", &file.display().to_string()], None);
    assert_eq!(code(&v), 1);
    assert!(String::from_utf8_lossy(&v.stdout).contains("record 0"));
}

#[test]
fn report_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = spikeforce(&["report", &dir.path().display().to_string()], None);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("metrics/summary.csv"));
}

#[test]
fn runtime_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let out = dir.path().join("out");
    fs::write(
        &cfg,
        format!("output_dir = {:?}\n[dataset]\npath = {:?}\n", out.display().to_string(), dir.path().join("none").display().to_string()),
    )
    .unwrap();
    let o = spikeforce(&["run", "--config", &cfg.display().to_string()], None);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("run.log").is_file());
}
