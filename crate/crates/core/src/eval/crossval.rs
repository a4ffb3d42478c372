//! Two-fold cross-validation over repetitions, repeated over seeds.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{metrics, MetricReport};
use super::robustness::omit_spikes;
use super::ModelSpec;
use crate::baseline::{predict_linear, train_baseline, LinearModel, WindowSpec};
use crate::decoders::{build_decoder, DecoderConfig, DecoderModel};
use crate::encoding::{encode, mean_sd, EncoderConfig};
use crate::error::{Error, Result};
use crate::rng::{index_of, substream, Stream};
use crate::signals::{Direction, Finger, ForceTrajectory, SpikeTrainSet};
use crate::synthgen::{Profile, SyntheticDataset};
use crate::training::{infer, segment_windows, task_order, train, window_steps, TrainConfig};

/// Everything that shapes fitting and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub window: WindowSpec,
    /// Fit a baseline intercept (adds five parameters).
    pub intercept: bool,
    /// Inference streams the test trial in pieces of this length with
    /// state carried across them.
    pub inference_segment_s: f64,
    /// Overrides the profile's encoder thresholds for the EMG path.
    pub encoder: Option<EncoderConfig>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            window: WindowSpec::default(),
            intercept: false,
            inference_segment_s: 10.0,
            encoder: None,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.window.validate()?;
        if let Some(e) = &self.encoder {
            e.validate()?;
        }
        if !(self.inference_segment_s > 0.0) {
            return Err(Error::Config("inference_segment_s must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_for(&self, profile: Profile) -> EncoderConfig {
        self.encoder.clone().unwrap_or_else(|| profile.preset().encoder)
    }

    fn segment_steps(&self, dt_ms: f64) -> usize {
        ((self.inference_segment_s * 1000.0 / dt_ms).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Linear(LinearModel),
    Snn(DecoderModel),
}

/// One trained fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldRun {
    pub spec: ModelSpec,
    pub profile: Profile,
    pub direction: Direction,
    pub train_rep: usize,
    pub test_rep: usize,
    /// `None` for the deterministic baseline.
    pub seed: Option<u64>,
    pub model: TrainedModel,
    pub loss_curve: Vec<f64>,
}

impl FoldRun {
    /// Stable file stem, e.g. `s1_flexion_li_train1_seed3`.
    pub fn stem(&self) -> String {
        let seed = self.seed.map_or_else(String::new, |s| format!("_seed{s}"));
        format!("{}_{}_{}_train{}{seed}", self.profile, self.direction, self.spec, self.train_rep)
    }
}

/// Held-out metrics of one task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskMetric {
    pub model: ModelSpec,
    pub profile: Profile,
    pub direction: Direction,
    pub finger: Finger,
    pub train_rep: usize,
    pub test_rep: usize,
    pub seed: Option<u64>,
    pub omission_rate: f64,
    pub report: MetricReport,
}

type InputKey = (Profile, usize, usize, usize, bool);

/// Decoder inputs per trial: motor-unit spikes or encoded EMG events.
pub(crate) struct Inputs {
    map: BTreeMap<InputKey, (SpikeTrainSet, ForceTrajectory)>,
}

impl Inputs {
    pub(crate) fn prepare(ds: &SyntheticDataset, specs: &[ModelSpec], settings: &EvalSettings) -> Result<Self> {
        let need_emg = specs.iter().any(|s| s.uses_emg());
        let need_mu = specs.iter().any(|s| !s.uses_emg());
        let mut map = BTreeMap::new();
        for t in &ds.trials {
            let key = |emg| (t.profile, t.direction.index(), t.finger.index(), t.repetition, emg);
            if need_mu {
                map.insert(key(false), (t.spikes.clone(), t.force.clone()));
            }
            if need_emg {
                let emg = t.emg.as_ref().ok_or_else(|| {
                    Error::Dataset(format!("{} has no EMG for the encoded path", t.file_name()))
                })?;
                let events = encode(emg, &settings.encoder_for(t.profile))?;
                map.insert(key(true), (events, t.force.clone()));
            }
        }
        Ok(Self { map })
    }

    fn get(&self, spec: ModelSpec, p: Profile, d: Direction, f: usize, rep: usize) -> Result<&(SpikeTrainSet, ForceTrajectory)> {
        self.map
            .get(&(p, d.index(), f, rep, spec.uses_emg()))
            .ok_or_else(|| Error::Dataset(format!("missing {p} {d} finger {f} repetition {rep}")))
    }

    fn fold(&self, spec: ModelSpec, p: Profile, d: Direction, rep: usize) -> Result<Vec<&(SpikeTrainSet, ForceTrajectory)>> {
        (0..Finger::ALL.len()).map(|f| self.get(spec, p, d, f, rep)).collect()
    }
}

/// Every (profile, direction) group must hold repetitions 1 and 2 of
/// every finger, and nothing else.
pub fn check_two_repetitions(ds: &SyntheticDataset) -> Result<()> {
    if ds.trials.is_empty() {
        return Err(Error::Dataset("dataset has no trials".into()));
    }
    for (p, d) in ds.groups() {
        for f in Finger::ALL {
            let mut reps: Vec<usize> = ds
                .trials
                .iter()
                .filter(|t| t.profile == p && t.direction == d && t.finger == f)
                .map(|t| t.repetition)
                .collect();
            reps.sort_unstable();
            if reps != [1, 2] {
                return Err(Error::Dataset(format!(
                    "{p} {d} {f}: expected repetitions [1, 2], found {reps:?}"
                )));
            }
        }
    }
    Ok(())
}

fn profile_code(p: Profile) -> u64 {
    match p {
        Profile::S1 => 1,
        Profile::S2 => 2,
    }
}

struct Job {
    spec: ModelSpec,
    profile: Profile,
    direction: Direction,
    train_rep: usize,
    seed: Option<u64>,
}

fn fit_one(job: &Job, inputs: &Inputs, settings: &EvalSettings) -> Result<FoldRun> {
    let train_set = inputs.fold(job.spec, job.profile, job.direction, job.train_rep)?;
    let pairs: Vec<(&SpikeTrainSet, &ForceTrajectory)> = train_set.iter().map(|(s, f)| (s, f)).collect();
    let (model, loss_curve) = match (job.spec.decoder_kind(), job.seed) {
        (None, _) => (TrainedModel::Linear(train_baseline(&pairs, &settings.window, settings.intercept)?), Vec::new()),
        (Some(kind), Some(seed)) => {
            let key = index_of(&[
                profile_code(job.profile),
                job.direction.index() as u64,
                job.train_rep as u64,
                job.spec.code(),
            ]);
            let mut init = substream(seed, Stream::Init, key);
            let mut tr = substream(seed, Stream::Training, key);
            let dt = pairs[0].0.grid().dt_ms;
            if (dt - settings.decoder.dt_ms).abs() > 1e-12 {
                return Err(Error::Sequencing(format!(
                    "data grid is {dt} ms but the decoder steps {} ms",
                    settings.decoder.dt_ms
                )));
            }
            let order = task_order(pairs.len(), settings.train.shuffle_tasks, &mut tr);
            let (w, h) = window_steps(&settings.train, dt)?;
            let windows = segment_windows(&pairs, &order, w, h)?;
            let model = build_decoder(kind, pairs[0].0.n_units(), &settings.decoder, &mut init)?;
            let out = train(&model, &windows, &settings.train, &mut tr)?;
            (TrainedModel::Snn(out.model), out.loss_curve)
        }
        (Some(_), None) => unreachable!("spiking jobs always carry a seed"),
    };
    Ok(FoldRun {
        spec: job.spec,
        profile: job.profile,
        direction: job.direction,
        train_rep: job.train_rep,
        test_rep: 3 - job.train_rep,
        seed: job.seed,
        model,
        loss_curve,
    })
}

/// Trains every (group, model, fold, seed) job. Jobs run in parallel and
/// come back in a fixed order.
pub fn fit_folds(
    ds: &SyntheticDataset,
    specs: &[ModelSpec],
    settings: &EvalSettings,
    seeds: &[u64],
) -> Result<Vec<FoldRun>> {
    settings.validate()?;
    check_two_repetitions(ds)?;
    if seeds.is_empty() && specs.iter().any(|s| s.decoder_kind().is_some()) {
        return Err(Error::Config("spiking decoders need at least one seed".into()));
    }
    let inputs = Inputs::prepare(ds, specs, settings)?;
    let mut jobs = Vec::new();
    for (profile, direction) in ds.groups() {
        for &spec in specs {
            for train_rep in [1, 2] {
                let seed_list: Vec<Option<u64>> = if spec.decoder_kind().is_some() {
                    seeds.iter().copied().map(Some).collect()
                } else {
                    vec![None]
                };
                for seed in seed_list {
                    jobs.push(Job { spec, profile, direction, train_rep, seed });
                }
            }
        }
    }
    jobs.par_iter().map(|j| fit_one(j, &inputs, settings)).collect()
}

/// Perturbation applied to test inputs before inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Omission {
    pub rate: f64,
    pub seed: u64,
}

pub(crate) fn predict(run: &FoldRun, spikes: &SpikeTrainSet, settings: &EvalSettings) -> Result<ForceTrajectory> {
    match &run.model {
        TrainedModel::Linear(m) => predict_linear(m, spikes),
        TrainedModel::Snn(m) => Ok(infer(m, spikes, settings.segment_steps(m.dt_ms), None)?.0),
    }
}

fn evaluate_run(run: &FoldRun, inputs: &Inputs, settings: &EvalSettings, omission: Option<Omission>) -> Result<Vec<TaskMetric>> {
    let mut out = Vec::new();
    for finger in Finger::ALL {
        let (spikes, force) = inputs.get(run.spec, run.profile, run.direction, finger.index(), run.test_rep)?;
        let rate = omission.map_or(0.0, |o| o.rate);
        let pred = match omission {
            None => predict(run, spikes, settings)?,
            Some(o) => {
                // Same deletions for every model and seed at a given rate.
                let key = index_of(&[
                    (o.rate * 1000.0).round() as u64,
                    profile_code(run.profile),
                    run.direction.index() as u64,
                    finger.index() as u64,
                    run.test_rep as u64,
                    u64::from(run.spec.uses_emg()),
                ]);
                let mut rng = substream(o.seed, Stream::Omission, key);
                predict(run, &omit_spikes(spikes, o.rate, &mut rng)?, settings)?
            }
        };
        out.push(TaskMetric {
            model: run.spec,
            profile: run.profile,
            direction: run.direction,
            finger,
            train_rep: run.train_rep,
            test_rep: run.test_rep,
            seed: run.seed,
            omission_rate: rate,
            report: metrics(&pred, force)?,
        });
    }
    Ok(out)
}

/// Held-out metrics of each run on the other repetition's five tasks.
pub fn evaluate_folds(
    runs: &[FoldRun],
    ds: &SyntheticDataset,
    settings: &EvalSettings,
    omission: Option<Omission>,
) -> Result<Vec<TaskMetric>> {
    let specs: Vec<ModelSpec> = runs.iter().map(|r| r.spec).collect();
    let inputs = Inputs::prepare(ds, &specs, settings)?;
    evaluate_prepared(runs, &inputs, settings, omission)
}

pub(crate) fn evaluate_prepared(
    runs: &[FoldRun],
    inputs: &Inputs,
    settings: &EvalSettings,
    omission: Option<Omission>,
) -> Result<Vec<TaskMetric>> {
    let per_run: Vec<Vec<TaskMetric>> =
        runs.par_iter().map(|r| evaluate_run(r, inputs, settings, omission)).collect::<Result<_>>()?;
    Ok(per_run.into_iter().flatten().collect())
}

/// Aggregate of one (model, profile, direction, omission rate) cell.
/// Per-task values are first averaged over seeds; `*_sd_tasks` spread
/// over tasks, `rmse_sd_seeds` over per-seed task means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvSummary {
    pub model: ModelSpec,
    pub profile: Profile,
    /// `None` pools both directions.
    pub direction: Option<Direction>,
    pub omission_rate: f64,
    pub n_tasks: usize,
    pub n_seeds: usize,
    pub rmse_mean: f64,
    pub rmse_sd_tasks: f64,
    pub rmse_sd_seeds: f64,
    pub mae_mean: f64,
    pub mae_sd_tasks: f64,
    pub r2_mean: Option<f64>,
    pub r2_sd_tasks: Option<f64>,
    /// Tasks with an undefined R² for at least one finger.
    pub r2_flagged: usize,
}

type TaskKey = (usize, usize, usize);

fn task_key(m: &TaskMetric) -> TaskKey {
    (m.direction.index(), m.finger.index(), m.test_rep)
}

/// Seed-averaged `(rmse, mae, r2)` per task, in task order.
pub fn task_values(records: &[&TaskMetric]) -> Vec<(TaskKey, f64, f64, Option<f64>)> {
    let mut by_task: BTreeMap<TaskKey, Vec<&TaskMetric>> = BTreeMap::new();
    for m in records {
        by_task.entry(task_key(m)).or_default().push(m);
    }
    by_task
        .into_iter()
        .map(|(k, ms)| {
            let n = ms.len() as f64;
            let r2s: Vec<f64> = ms.iter().filter_map(|m| m.report.r2).collect();
            (
                k,
                ms.iter().map(|m| m.report.rmse).sum::<f64>() / n,
                ms.iter().map(|m| m.report.mae).sum::<f64>() / n,
                (!r2s.is_empty()).then(|| r2s.iter().sum::<f64>() / r2s.len() as f64),
            )
        })
        .collect()
}

pub(crate) fn aggregate(records: &[&TaskMetric]) -> Option<CvSummary> {
    let first = records.first()?;
    let tasks = task_values(records);
    let rmse: Vec<f64> = tasks.iter().map(|t| t.1).collect();
    let mae: Vec<f64> = tasks.iter().map(|t| t.2).collect();
    let r2: Vec<f64> = tasks.iter().filter_map(|t| t.3).collect();
    let mut by_seed: BTreeMap<Option<u64>, Vec<f64>> = BTreeMap::new();
    for m in records {
        by_seed.entry(m.seed).or_default().push(m.report.rmse);
    }
    let seed_means: Vec<f64> = by_seed.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let directions: Vec<Direction> = {
        let mut d: Vec<Direction> = records.iter().map(|m| m.direction).collect();
        d.sort_by_key(|d| d.index());
        d.dedup();
        d
    };
    let (rmse_mean, rmse_sd_tasks) = mean_sd(&rmse);
    let (mae_mean, mae_sd_tasks) = mean_sd(&mae);
    let r2_stats = (!r2.is_empty()).then(|| mean_sd(&r2));
    let mut flagged: Vec<TaskKey> = records.iter().filter(|m| m.report.r2_undefined).map(|m| task_key(m)).collect();
    flagged.sort_unstable();
    flagged.dedup();
    Some(CvSummary {
        model: first.model,
        profile: first.profile,
        direction: (directions.len() == 1).then(|| directions[0]),
        omission_rate: first.omission_rate,
        n_tasks: tasks.len(),
        n_seeds: by_seed.len(),
        rmse_mean,
        rmse_sd_tasks,
        rmse_sd_seeds: mean_sd(&seed_means).1,
        mae_mean,
        mae_sd_tasks,
        r2_mean: r2_stats.map(|s| s.0),
        r2_sd_tasks: r2_stats.map(|s| s.1),
        r2_flagged: flagged.len(),
    })
}

/// Per-direction summaries followed by a pooled row per (model, profile,
/// rate) whenever both directions are present.
pub fn summarize(records: &[TaskMetric]) -> Vec<CvSummary> {
    type CellKey = (ModelSpec, Profile, u64);
    let mut cells: BTreeMap<CellKey, Vec<&TaskMetric>> = BTreeMap::new();
    for m in records {
        cells.entry((m.model, m.profile, m.omission_rate.to_bits())).or_default().push(m);
    }
    let mut out = Vec::new();
    for ms in cells.values() {
        for d in Direction::ALL {
            let sub: Vec<&TaskMetric> = ms.iter().copied().filter(|m| m.direction == d).collect();
            out.extend(aggregate(&sub));
        }
        if ms.iter().any(|m| m.direction != ms[0].direction) {
            out.extend(aggregate(ms));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub runs: Vec<FoldRun>,
    pub records: Vec<TaskMetric>,
    pub summaries: Vec<CvSummary>,
}

/// Fits both folds of every model and evaluates them on clean inputs.
pub fn cross_validate(
    ds: &SyntheticDataset,
    specs: &[ModelSpec],
    settings: &EvalSettings,
    seeds: &[u64],
) -> Result<CvOutcome> {
    let runs = fit_folds(ds, specs, settings, seeds)?;
    let records = evaluate_folds(&runs, ds, settings, None)?;
    let summaries = summarize(&records);
    Ok(CvOutcome { runs, records, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{build_dataset, SynthConfig};

    fn small_settings() -> EvalSettings {
        let mut s = EvalSettings::default();
        s.train.epochs = 3;
        s
    }

    fn dataset(emg: bool) -> SyntheticDataset {
        let cfg = SynthConfig { emg, ..Default::default() };
        build_dataset(&"s2-flexion".parse().unwrap(), &cfg, 5).unwrap()
    }

    #[test]
    fn folds_cover_both_repetitions_and_seeds() {
        let ds = dataset(false);
        let out = cross_validate(&ds, &[ModelSpec::Baseline, ModelSpec::Li], &small_settings(), &[1, 2]).unwrap();
        // Baseline: 2 folds; LI: 2 folds × 2 seeds.
        assert_eq!(out.runs.len(), 6);
        assert_eq!(out.records.len(), 30);
        let li = out.summaries.iter().find(|s| s.model == ModelSpec::Li).unwrap();
        assert_eq!((li.n_tasks, li.n_seeds), (10, 2));
        assert_eq!(out.summaries.iter().find(|s| s.model == ModelSpec::Baseline).unwrap().n_seeds, 1);
    }

    #[test]
    fn seed_sd_matches_per_seed_table() {
        let ds = dataset(false);
        let out = cross_validate(&ds, &[ModelSpec::Li], &small_settings(), &[1, 2, 3]).unwrap();
        let per_seed: Vec<f64> = [1, 2, 3]
            .iter()
            .map(|&s| {
                let v: Vec<f64> =
                    out.records.iter().filter(|m| m.seed == Some(s)).map(|m| m.report.rmse).collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect();
        let mean = per_seed.iter().sum::<f64>() / 3.0;
        let sd = (per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        let s = &out.summaries[0];
        assert!((s.rmse_sd_seeds - sd).abs() < 1e-12);
        assert!((s.rmse_mean - mean).abs() < 1e-12);
    }

    #[test]
    fn degenerate_copy_matches_training_metrics() {
        let mut ds = dataset(false);
        let rep1: Vec<_> = ds.trials.iter().filter(|t| t.repetition == 1).cloned().collect();
        ds.trials = rep1
            .iter()
            .cloned()
            .chain(rep1.iter().cloned().map(|mut t| {
                t.repetition = 2;
                t
            }))
            .collect();
        let settings = small_settings();
        let out = cross_validate(&ds, &[ModelSpec::Baseline], &settings, &[]).unwrap();
        let run = out.runs.iter().find(|r| r.train_rep == 1).unwrap();
        for t in &rep1 {
            let train_metric = metrics(&predict(run, &t.spikes, &settings).unwrap(), &t.force).unwrap();
            let cv = out.records.iter().find(|m| m.train_rep == 1 && m.finger == t.finger).unwrap();
            assert_eq!(cv.report, train_metric);
        }
    }

    #[test]
    fn missing_repetition_is_a_dataset_error() {
        let mut ds = dataset(false);
        ds.trials.retain(|t| !(t.repetition == 2 && t.finger == Finger::Ring));
        let err = cross_validate(&ds, &[ModelSpec::Baseline], &small_settings(), &[]).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)), "{err}");
    }

    #[test]
    fn encoded_path_needs_emg() {
        let ds = dataset(false);
        let err = fit_folds(&ds, &[ModelSpec::EncodedLi], &small_settings(), &[1]).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
        let ds = dataset(true);
        let runs = fit_folds(&ds, &[ModelSpec::EncodedLi], &small_settings(), &[1]).unwrap();
        let TrainedModel::Snn(m) = &runs[0].model else { panic!() };
        assert_eq!(m.input_dim, 120);
    }

    #[test]
    fn twenty_tasks_across_directions() {
        let cfg = SynthConfig { emg: false, ..Default::default() };
        let ds = build_dataset(&"s2".parse().unwrap(), &cfg, 5).unwrap();
        let out = cross_validate(&ds, &[ModelSpec::Baseline], &small_settings(), &[]).unwrap();
        let pooled: Vec<&TaskMetric> = out.records.iter().collect();
        assert_eq!(task_values(&pooled).len(), 20);
        assert!(out.summaries.iter().any(|s| s.direction.is_none() && s.n_tasks == 20));
    }
}
