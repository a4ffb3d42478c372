//! `spikeforce` — generate synthetic data, train and evaluate decoders,
//! sweep spike omission, account footprints and render reports.
//!
//! Exit status: 0 success, 1 runtime failure or invalid dataset, 2 invalid
//! configuration or usage.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spikeforce::config::{DatasetSource, ExperimentConfig};
use spikeforce::dataset::validate_dataset;
use spikeforce::eval::ModelSpec;
use spikeforce::report::report_tables;
use spikeforce::runner::{run, RunOptions, Stages, MANIFEST, RUN_LOG};
use spikeforce::synthgen::PresetSelection;
use spikeforce::Error;

#[derive(Parser)]
#[command(name = "spikeforce", version, about = "Spiking decoders for multi-finger force estimation")]
#[command(after_help = "Set SPIKEFORCE_WORKERS to bound the worker pool.")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as container files under <out>/data.
    Generate(ExperimentArgs),
    /// Train every decoder on both folds and save models and loss curves.
    Train(ExperimentArgs),
    /// Train and cross-validate; writes metric and statistics CSVs.
    Evaluate(ExperimentArgs),
    /// Train on clean data and sweep spike-omission rates at inference.
    Robustness(ExperimentArgs),
    /// Static parameter, memory and latency accounting.
    Footprint(ExperimentArgs),
    /// All stages: train, evaluate, robustness and footprint.
    Run(ExperimentArgs),
    /// Render fixed-width tables from a run directory.
    Report {
        /// Run directory (defaults to --out).
        dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check dataset files (a file or a directory of .sfd files).
    Validate { path: PathBuf },
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// TOML experiment configuration; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Synthetic preset: s1, s2, or e.g. s1-flexion.
    #[arg(long)]
    preset: Option<String>,
    /// Decoders to run (repeat or comma-separate): baseline, li, lif, encoded-li.
    #[arg(long, value_delimiter = ',')]
    decoder: Vec<String>,
    /// Number of initialisation seeds per spiking decoder.
    #[arg(long)]
    n_seeds: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Validate the configuration and write the manifest only.
    #[arg(long)]
    dry_run: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn build_config(a: &ExperimentArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Failure::Usage(format!("cannot read {}: {io}", p.display())),
            other => other.into(),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    if let Some(p) = &a.preset {
        let sel: PresetSelection = p.parse()?;
        cfg.dataset = DatasetSource { preset: Some(sel), path: None };
    }
    if !a.decoder.is_empty() {
        cfg.decoders = a.decoder.iter().map(|d| d.parse::<ModelSpec>()).collect::<Result<_, _>>()?;
    }
    if let Some(n) = a.n_seeds {
        cfg.n_seeds = n;
    }
    if let Some(e) = a.epochs {
        cfg.eval.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn experiment(a: &ExperimentArgs, stages: Stages) -> Result<(), Failure> {
    let cfg = build_config(a)?;
    let summary = run(&cfg, &RunOptions { stages, dry_run: a.dry_run }).map_err(|e| match e {
        Error::Config(_) => Failure::from(e),
        other => Failure::Runtime(format!("{other} (log: {})", cfg.output_dir.join(RUN_LOG).display())),
    })?;
    if a.dry_run {
        emit(&format!("configuration valid; wrote {}", summary.out_dir.join(MANIFEST).display()));
        return Ok(());
    }
    emit(&format!("wrote {} artifacts to {}", summary.artifacts.len(), summary.out_dir.display()));
    if stages.evaluate || stages.robustness || stages.footprint {
        if let Ok(text) = report_tables(&summary.out_dir) {
            emit(&format!("\n{text}"));
        }
    }
    Ok(())
}

/// Prints a line, tolerating a closed pipe (e.g. `| head`).
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    let only = |f: fn(&mut Stages)| {
        let mut s = Stages::default();
        f(&mut s);
        s
    };
    match cmd {
        Command::Generate(a) => experiment(&a, only(|s| s.generate = true)),
        Command::Train(a) => experiment(&a, only(|s| s.train = true)),
        Command::Evaluate(a) => experiment(&a, only(|s| s.evaluate = true)),
        Command::Robustness(a) => experiment(&a, only(|s| s.robustness = true)),
        Command::Footprint(a) => experiment(&a, only(|s| s.footprint = true)),
        Command::Run(a) => experiment(&a, Stages::all()),
        Command::Report { dir, out } => {
            let dir = dir.or(out).ok_or_else(|| Failure::Usage("report needs a run directory".into()))?;
            emit(&report_tables(&dir).map_err(|e| Failure::Runtime(e.to_string()))?);
            Ok(())
        }
        Command::Validate { path } => {
            let report = validate_dataset(&path).map_err(|e| Failure::Runtime(e.to_string()))?;
            for f in &report.files {
                for v in &f.violations {
                    emit(&format!("{}: {v}", f.path.display()));
                }
            }
            if report.is_valid() {
                emit(&format!("ok: {} file(s) valid", report.files.len()));
                Ok(())
            } else {
                Err(Failure::Runtime(format!(
                    "{} violation(s) in {} file(s)",
                    report.n_violations(),
                    report.files.iter().filter(|f| !f.violations.is_empty()).count()
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
