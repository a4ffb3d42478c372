//! End-to-end experiment runs and their on-disk artifacts.
//!
//! Every artifact lands under the configured output directory and is
//! listed with its SHA-256 in `manifest.json`. Nothing time- or
//! host-dependent is written, so identical configs give identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::baseline::train_baseline;
use crate::config::ExperimentConfig;
use crate::dataset::{load_dataset, save_dataset};
use crate::decoders::{build_decoder, DecoderModel};
use crate::encoding::{encode, N_CHANNELS};
use crate::error::{Error, Result};
use crate::eval::crossval::{evaluate_folds, fit_folds, summarize, task_values, FoldRun, TrainedModel};
use crate::eval::footprint::{baseline_footprint, decoder_footprint, encoded_footprint};
use crate::eval::robustness::{omission_deltas, robustness_sweep, robustness_table};
use crate::eval::{mann_whitney_u, ModelSpec, TaskMetric};
use crate::report::{
    write_csv, write_text, CurveRow, DeltaRow, FootprintRow, StatsRow, SummaryRow, TaskRow, CURVES_CSV, DELTAS_CSV,
    FOOTPRINT_CSV, ROBUSTNESS_TASKS_CSV, SCHEMA_VERSION, STATS_CSV, SUMMARY_CSV, TASKS_CSV,
};
use crate::rng::{index_of, substream, Stream};
use crate::synthgen::{build_dataset, SyntheticDataset};

/// Environment variable bounding the worker pool.
pub const WORKERS_ENV: &str = "SPIKEFORCE_WORKERS";
pub const MANIFEST: &str = "manifest.json";
pub const RUN_LOG: &str = "run.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Stages {
    /// Write the trials as dataset files under `data/`.
    pub generate: bool,
    pub train: bool,
    pub evaluate: bool,
    pub robustness: bool,
    pub footprint: bool,
}

impl Stages {
    pub fn all() -> Self {
        Self { generate: false, train: true, evaluate: true, robustness: true, footprint: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub stages: Stages,
    /// Validate and write the manifest only.
    pub dry_run: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    schema_version: u32,
    dataset_format: String,
    model_format: u32,
    config_sha256: String,
    seed: u64,
    run_seeds: Vec<u64>,
    stages: Vec<&'static str>,
    dry_run: bool,
    config: &'a ExperimentConfig,
    artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Worker count from the environment, or `None` for the default.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Runs `f` on a pool bounded by the worker setting.
pub fn with_workers<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers_from_env()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<SyntheticDataset> {
    match (&cfg.dataset.preset, &cfg.dataset.path) {
        (Some(p), None) => build_dataset(p, &cfg.synth, cfg.seed),
        (None, Some(path)) => load_dataset(path),
        _ => Err(Error::Config("set exactly one of dataset.preset and dataset.path".into())),
    }
}

struct Ctx {
    out: PathBuf,
    written: Vec<PathBuf>,
    log: Vec<String>,
}

impl Ctx {
    fn note(&mut self, msg: String) {
        info!("{msg}");
        self.log.push(msg);
    }

    /// Registers an artifact and makes sure its directory exists.
    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.written.push(p.clone());
        Ok(p)
    }
}

/// Validates the config, runs the requested stages and writes artifacts.
/// On failure the run log records the error.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    let mut ctx = Ctx { out: out.clone(), written: Vec::new(), log: Vec::new() };
    let result = with_workers(|| run_stages(cfg, opts, &mut ctx)).and_then(|r| r);
    if let Err(e) = result {
        ctx.log.push(format!("error: {e}"));
        // Best effort: the original error matters more than a log failure.
        let _ = write_text(&out.join(RUN_LOG), &(ctx.log.join("\n") + "\n"));
        return Err(e);
    }
    if !opts.dry_run {
        let log_path = ctx.path(RUN_LOG)?;
        write_text(&log_path, &(ctx.log.join("\n") + "\n"))?;
    }
    let artifacts = write_manifest(cfg, opts, &ctx)?;
    Ok(RunSummary { out_dir: out, artifacts })
}

fn stage_names(s: &Stages) -> Vec<&'static str> {
    [(s.generate, "generate"), (s.train, "train"), (s.evaluate, "evaluate"), (s.robustness, "robustness"), (s.footprint, "footprint")]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect()
}

fn write_manifest(cfg: &ExperimentConfig, opts: &RunOptions, ctx: &Ctx) -> Result<Vec<Artifact>> {
    let mut artifacts = Vec::new();
    for p in &ctx.written {
        let bytes = fs::read(p)?;
        let rel = p.strip_prefix(&ctx.out).unwrap_or(p);
        artifacts.push(Artifact {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    artifacts.dedup();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        schema_version: SCHEMA_VERSION,
        dataset_format: format!("{} {}", crate::dataset::MAGIC, crate::dataset::VERSION),
        model_format: crate::decoders::MODEL_FORMAT_VERSION,
        config_sha256: sha256_hex(cfg.to_toml()?.as_bytes()),
        seed: cfg.seed,
        run_seeds: cfg.run_seeds(),
        stages: stage_names(&opts.stages),
        dry_run: opts.dry_run,
        config: cfg,
        artifacts: artifacts.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_text(&ctx.out.join(MANIFEST), &(json + "\n"))?;
    Ok(artifacts)
}

fn run_stages(cfg: &ExperimentConfig, opts: &RunOptions, ctx: &mut Ctx) -> Result<()> {
    if opts.dry_run {
        ctx.note("dry run: configuration valid".into());
        return Ok(());
    }
    let config_path = ctx.path("config.toml")?;
    write_text(&config_path, &cfg.to_toml()?)?;
    let s = opts.stages;
    let ds = load_or_generate(cfg)?;
    ctx.note(format!("dataset: {} trials, groups {:?}", ds.trials.len(), ds.groups()));
    if s.generate {
        let dir = ctx.out.join("data");
        for p in save_dataset(&ds, &dir)? {
            ctx.written.push(p);
        }
        ctx.note(format!("wrote {} dataset files to data/", ds.trials.len()));
    }
    let needs_runs = s.train || s.evaluate || s.robustness;
    let runs = if needs_runs {
        let runs = fit_folds(&ds, &cfg.decoders, &cfg.eval, &cfg.run_seeds())?;
        ctx.note(format!("trained {} fold runs", runs.len()));
        write_runs(&runs, ctx)?;
        Some(runs)
    } else {
        None
    };
    if s.evaluate {
        let runs = runs.as_ref().expect("trained");
        let records = evaluate_folds(runs, &ds, &cfg.eval, None)?;
        write_evaluation(&records, ctx)?;
    }
    if s.robustness && !cfg.omission_rates.is_empty() {
        let runs = runs.as_ref().expect("trained");
        let records = robustness_sweep(runs, &ds, &cfg.eval, &cfg.omission_rates, cfg.seed)?;
        let rows = robustness_table(&records);
        let deltas = omission_deltas(&rows);
        write_csv(&ctx.path(ROBUSTNESS_TASKS_CSV)?, &records.iter().map(TaskRow::from).collect::<Vec<_>>())?;
        write_csv(&ctx.path(CURVES_CSV)?, &rows.iter().map(CurveRow::from).collect::<Vec<_>>())?;
        write_csv(&ctx.path(DELTAS_CSV)?, &deltas.iter().map(DeltaRow::from).collect::<Vec<_>>())?;
        for d in &deltas {
            ctx.note(format!(
                "robustness {} {}: rmse {:.4} -> {:.4} ({:+.4})",
                d.profile, d.model, d.rmse_from, d.rmse_to, d.delta_rmse
            ));
        }
    }
    if s.footprint {
        let rows = footprints(cfg, &ds, runs.as_deref())?;
        write_csv(&ctx.path(FOOTPRINT_CSV)?, &rows)?;
        ctx.note(format!("footprint rows: {}", rows.len()));
    }
    Ok(())
}

fn write_runs(runs: &[FoldRun], ctx: &mut Ctx) -> Result<()> {
    for r in runs {
        match &r.model {
            TrainedModel::Snn(m) => m.save(&ctx.path(&format!("models/{}.spkf", r.stem()))?)?,
            TrainedModel::Linear(m) => {
                let value = serde_json::json!({
                    "window": m.window,
                    "scale": m.scale,
                    "coefficients": (0..m.fit.coefficients.rows())
                        .map(|i| m.fit.coefficients.row(i).to_vec())
                        .collect::<Vec<_>>(),
                    "intercept": m.fit.intercept,
                });
                let text = serde_json::to_string_pretty(&value).map_err(|e| Error::Format(e.to_string()))?;
                write_text(&ctx.path(&format!("models/{}.json", r.stem()))?, &(text + "\n"))?;
            }
        }
        if !r.loss_curve.is_empty() {
            #[derive(Serialize)]
            struct LossRow {
                epoch: usize,
                mean_loss: f64,
            }
            let rows: Vec<LossRow> =
                r.loss_curve.iter().enumerate().map(|(k, &l)| LossRow { epoch: k + 1, mean_loss: l }).collect();
            write_csv(&ctx.path(&format!("loss/{}.csv", r.stem()))?, &rows)?;
        }
    }
    Ok(())
}

fn write_evaluation(records: &[TaskMetric], ctx: &mut Ctx) -> Result<()> {
    let summaries = summarize(records);
    write_csv(&ctx.path(TASKS_CSV)?, &records.iter().map(TaskRow::from).collect::<Vec<_>>())?;
    write_csv(&ctx.path(SUMMARY_CSV)?, &summaries.iter().map(SummaryRow::from).collect::<Vec<_>>())?;
    for s in &summaries {
        ctx.note(format!(
            "cv {} {} {}: rmse {:.4} mae {:.4} r2 {}",
            s.profile,
            s.model,
            crate::report::direction_label(s.direction),
            s.rmse_mean,
            s.mae_mean,
            s.r2_mean.map_or_else(|| "n/a".into(), |r| format!("{r:.4}"))
        ));
    }
    write_csv(&ctx.path(STATS_CSV)?, &pairwise_stats(records)?)?;
    Ok(())
}

/// Mann–Whitney comparison of seed-averaged per-task RMSE, pooled over
/// directions, for every pair of models of a profile.
pub fn pairwise_stats(records: &[TaskMetric]) -> Result<Vec<StatsRow>> {
    let mut profiles: Vec<_> = records.iter().map(|m| m.profile).collect();
    profiles.sort();
    profiles.dedup();
    let mut rows = Vec::new();
    for p in profiles {
        let mut models: Vec<ModelSpec> = records.iter().filter(|m| m.profile == p).map(|m| m.model).collect();
        models.sort();
        models.dedup();
        let values = |model: ModelSpec| -> Vec<f64> {
            let sub: Vec<&TaskMetric> = records.iter().filter(|m| m.profile == p && m.model == model).collect();
            task_values(&sub).into_iter().map(|t| t.1).collect()
        };
        for (i, &a) in models.iter().enumerate() {
            for &b in &models[i + 1..] {
                let (va, vb) = (values(a), values(b));
                let t = mann_whitney_u(&va, &vb)?;
                rows.push(StatsRow {
                    profile: p.to_string(),
                    model_a: a.to_string(),
                    model_b: b.to_string(),
                    n_a: va.len(),
                    n_b: vb.len(),
                    u: t.u,
                    p_value: t.p_value,
                    exact: t.exact,
                });
            }
        }
    }
    Ok(rows)
}

/// Footprint of each (group, model): trained fold-1 parameters when
/// available, otherwise freshly initialised decoders and a fitted
/// baseline.
pub fn footprints(cfg: &ExperimentConfig, ds: &SyntheticDataset, runs: Option<&[FoldRun]>) -> Result<Vec<FootprintRow>> {
    let mut rows = Vec::new();
    for (profile, direction) in ds.groups() {
        let trials = ds.trials_for(profile, direction, 1);
        for &spec in &cfg.decoders {
            let trained = runs.and_then(|rs| {
                rs.iter().find(|r| r.spec == spec && r.profile == profile && r.direction == direction && r.train_rep == 1)
            });
            let report = match (spec, trained.map(|r| &r.model)) {
                (ModelSpec::Baseline, Some(TrainedModel::Linear(m))) => baseline_footprint(m, N_CHANNELS),
                (ModelSpec::Baseline, _) => {
                    let pairs: Vec<_> = trials.iter().map(|t| (&t.spikes, &t.force)).collect();
                    baseline_footprint(&train_baseline(&pairs, &cfg.eval.window, cfg.eval.intercept)?, N_CHANNELS)
                }
                (_, Some(TrainedModel::Snn(m))) => snn_footprint(cfg, spec, profile, m),
                (_, _) => {
                    let first = trials.first().ok_or_else(|| Error::Dataset("group without repetition 1".into()))?;
                    let n_in = if spec.uses_emg() {
                        let emg = first.emg.as_ref().ok_or_else(|| Error::Dataset("no EMG for encoded path".into()))?;
                        encode(emg, &cfg.eval.encoder_for(profile))?.n_units()
                    } else {
                        first.n_units()
                    };
                    let mut rng = substream(cfg.seed, Stream::Init, index_of(&[u64::MAX, spec as u64]));
                    let kind = spec.decoder_kind().expect("spiking spec");
                    let m = build_decoder(kind, n_in, &cfg.eval.decoder, &mut rng)?;
                    snn_footprint(cfg, spec, profile, &m)
                }
            };
            rows.push(FootprintRow::new(profile, direction, spec.input_name(), &report, trained.is_some()));
        }
    }
    Ok(rows)
}

fn snn_footprint(
    cfg: &ExperimentConfig,
    spec: ModelSpec,
    profile: crate::synthgen::Profile,
    m: &DecoderModel,
) -> crate::eval::FootprintReport {
    if spec.uses_emg() {
        encoded_footprint(&cfg.eval.encoder_for(profile), m)
    } else {
        decoder_footprint(m, N_CHANNELS, true)
    }
}

/// Writes the dataset of a config as container files under `dir`.
pub fn generate(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let ds = load_or_generate(cfg)?;
    save_dataset(&ds, dir)
}
