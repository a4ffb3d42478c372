//! Inference-time spike omission.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use super::crossval::{aggregate, evaluate_prepared, EvalSettings, FoldRun, Inputs, Omission, TaskMetric};
use super::ModelSpec;
use crate::error::{Error, Result};
use crate::signals::SpikeTrainSet;
use crate::synthgen::{Profile, SyntheticDataset};

/// Omission levels 0 %, 10 %, …, 50 %.
pub const DEFAULT_RATES: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Deletes each spike independently with probability `rate`. One uniform
/// draw per spike, unit by unit in time order; a spike survives when its
/// draw is at least `rate`.
pub fn omit_spikes<R: Rng + ?Sized>(spikes: &SpikeTrainSet, rate: f64, rng: &mut R) -> Result<SpikeTrainSet> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Parameter(format!("omission rate {rate} outside [0, 1]")));
    }
    let trains = spikes
        .trains()
        .iter()
        .map(|tr| tr.iter().copied().filter(|_| rng.random::<f64>() >= rate).collect())
        .collect();
    SpikeTrainSet::new(spikes.grid(), trains)
}

/// Evaluates clean-trained runs with test inputs thinned at each rate.
pub fn robustness_sweep(
    runs: &[FoldRun],
    ds: &SyntheticDataset,
    settings: &EvalSettings,
    rates: &[f64],
    seed: u64,
) -> Result<Vec<TaskMetric>> {
    let specs: Vec<ModelSpec> = runs.iter().map(|r| r.spec).collect();
    let inputs = Inputs::prepare(ds, &specs, settings)?;
    let mut out = Vec::new();
    for &rate in rates {
        out.extend(evaluate_prepared(runs, &inputs, settings, Some(Omission { rate, seed }))?);
    }
    Ok(out)
}

/// One degradation-curve point; spreads are over finger × direction ×
/// repetition tasks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub model: ModelSpec,
    pub profile: Profile,
    pub omission_rate: f64,
    pub n_tasks: usize,
    pub rmse_mean: f64,
    pub rmse_sd: f64,
    pub mae_mean: f64,
    pub mae_sd: f64,
    pub r2_mean: Option<f64>,
    pub r2_sd: Option<f64>,
}

/// Degradation curves pooled over directions, ordered by model, profile
/// and rate.
pub fn robustness_table(records: &[TaskMetric]) -> Vec<RobustnessRow> {
    let mut cells: BTreeMap<(ModelSpec, Profile, u64), Vec<&TaskMetric>> = BTreeMap::new();
    for m in records {
        cells.entry((m.model, m.profile, m.omission_rate.to_bits())).or_default().push(m);
    }
    // Non-negative f64 bit patterns sort like the values.
    cells
        .values()
        .filter_map(|ms| aggregate(ms))
        .map(|s| RobustnessRow {
            model: s.model,
            profile: s.profile,
            omission_rate: s.omission_rate,
            n_tasks: s.n_tasks,
            rmse_mean: s.rmse_mean,
            rmse_sd: s.rmse_sd_tasks,
            mae_mean: s.mae_mean,
            mae_sd: s.mae_sd_tasks,
            r2_mean: s.r2_mean,
            r2_sd: s.r2_sd_tasks,
        })
        .collect()
}

/// RMSE change from the lowest to the highest rate of each curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmissionDelta {
    pub model: ModelSpec,
    pub profile: Profile,
    pub from_rate: f64,
    pub to_rate: f64,
    pub rmse_from: f64,
    pub rmse_to: f64,
    pub delta_rmse: f64,
    pub relative_increase: f64,
}

pub fn omission_deltas(rows: &[RobustnessRow]) -> Vec<OmissionDelta> {
    let mut curves: BTreeMap<(ModelSpec, Profile), Vec<&RobustnessRow>> = BTreeMap::new();
    for r in rows {
        curves.entry((r.model, r.profile)).or_default().push(r);
    }
    curves
        .into_iter()
        .filter_map(|((model, profile), c)| {
            let lo = c.iter().min_by(|a, b| a.omission_rate.total_cmp(&b.omission_rate))?;
            let hi = c.iter().max_by(|a, b| a.omission_rate.total_cmp(&b.omission_rate))?;
            Some(OmissionDelta {
                model,
                profile,
                from_rate: lo.omission_rate,
                to_rate: hi.omission_rate,
                rmse_from: lo.rmse_mean,
                rmse_to: hi.rmse_mean,
                delta_rmse: hi.rmse_mean - lo.rmse_mean,
                relative_increase: (hi.rmse_mean - lo.rmse_mean) / lo.rmse_mean,
            })
        })
        .collect()
}

/// Adjacent rate pairs whose mean RMSE drops by more than `tolerance`.
pub fn monotonicity_violations(rows: &[RobustnessRow], tolerance: f64) -> Vec<(ModelSpec, Profile, f64, f64)> {
    let mut out = Vec::new();
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.model == b.model && a.profile == b.profile && b.rmse_mean < a.rmse_mean - tolerance {
            out.push((a.model, a.profile, a.omission_rate, b.omission_rate));
        }
    }
    out
}
