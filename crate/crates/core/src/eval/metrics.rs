//! Per-trial force-decoding metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::signals::{ForceTrajectory, N_FINGERS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FingerMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// Undefined for a constant target.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    /// Means over the five fingers.
    pub rmse: f64,
    pub mae: f64,
    /// Mean over fingers whose target varies; `None` if none does.
    pub r2: Option<f64>,
    /// Set when at least one finger's R² was undefined.
    pub r2_undefined: bool,
    pub per_finger: [FingerMetrics; N_FINGERS],
}

fn finger_metrics(pred: &[f64], target: &[f64]) -> FingerMetrics {
    let n = target.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, y) in pred.iter().zip(target) {
        se += (p - y) * (p - y);
        ae += (p - y).abs();
    }
    let mean = target.iter().sum::<f64>() / n;
    let ss_tot: f64 = target.iter().map(|y| (y - mean) * (y - mean)).sum();
    FingerMetrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        r2: (ss_tot > 0.0).then(|| 1.0 - se / ss_tot),
    }
}

/// RMSE, MAE and R² per finger and averaged over fingers.
pub fn metrics(pred: &ForceTrajectory, target: &ForceTrajectory) -> Result<MetricReport> {
    if !pred.grid().same_step(&target.grid()) {
        return Err(Error::Sequencing("prediction and target on different grids".into()));
    }
    if pred.len() != target.len() || target.is_empty() {
        return Err(Error::Shape(format!(
            "prediction has {} steps, target {}",
            pred.len(),
            target.len()
        )));
    }
    let per_finger: [FingerMetrics; N_FINGERS] =
        std::array::from_fn(|f| finger_metrics(&pred.column(f), &target.column(f)));
    let defined: Vec<f64> = per_finger.iter().filter_map(|m| m.r2).collect();
    Ok(MetricReport {
        rmse: per_finger.iter().map(|m| m.rmse).sum::<f64>() / N_FINGERS as f64,
        mae: per_finger.iter().map(|m| m.mae).sum::<f64>() / N_FINGERS as f64,
        r2: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        r2_undefined: defined.len() < N_FINGERS,
        per_finger,
    })
}
