//! Windowed spike-count features and multi-output linear regression.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_solve, Matrix};
use crate::signals::{ForceTrajectory, SpikeTrainSet, N_FINGERS};

pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub length_ms: f64,
    pub overlap_fraction: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { length_ms: 80.0, overlap_fraction: 0.5 }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.length_ms > 0.0) || !self.length_ms.is_finite() {
            return Err(Error::Parameter(format!("window length {} ms must be positive", self.length_ms)));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::Parameter(format!(
                "window overlap {} must lie in [0, 1)",
                self.overlap_fraction
            )));
        }
        Ok(())
    }

    pub fn hop_ms(&self) -> f64 {
        self.length_ms * (1.0 - self.overlap_fraction)
    }

    /// Window length and (possibly fractional) hop in grid steps.
    pub fn in_steps(&self, grid: &TimeGrid) -> Result<(usize, f64)> {
        self.validate()?;
        let len = grid.steps_for_ms(self.length_ms)?;
        if len == 0 {
            return Err(Error::Parameter("window shorter than one grid step".into()));
        }
        Ok((len, len as f64 * (1.0 - self.overlap_fraction)))
    }
}

/// First step of window `k` for a hop of `hop` steps. Fractional hops
/// round the start up, so a window fits exactly when `k·hop + len ≤ n`.
fn window_start(k: usize, hop: f64) -> usize {
    (k as f64 * hop - 1e-9).ceil() as usize
}

pub fn n_windows(n_steps: usize, len: usize, hop: f64) -> usize {
    if n_steps < len {
        return 0;
    }
    ((n_steps - len) as f64 / hop + 1e-9).floor() as usize + 1
}

/// `(start, end)` step ranges of all windows over `n_steps`.
pub fn window_bounds(n_steps: usize, len: usize, hop: f64) -> Vec<(usize, usize)> {
    (0..n_windows(n_steps, len, hop))
        .map(|k| {
            let s = window_start(k, hop);
            (s, s + len)
        })
        .collect()
}

/// Spike counts per window and unit, `[n_windows × m]`.
pub fn bin_counts(spikes: &SpikeTrainSet, window: &WindowSpec) -> Result<Matrix> {
    let (len, hop) = window.in_steps(&spikes.grid())?;
    let bounds = window_bounds(spikes.n_steps(), len, hop);
    if bounds.is_empty() {
        return Err(Error::EmptyFeatures(format!(
            "{} steps cannot hold a {len}-step window",
            spikes.n_steps()
        )));
    }
    let m = spikes.n_units();
    let mut x = Matrix::zeros(bounds.len(), m);
    for u in 0..m {
        let train = spikes.train(u);
        for (k, &(s, e)) in bounds.iter().enumerate() {
            let lo = train.partition_point(|&t| (t as usize) < s);
            let hi = train.partition_point(|&t| (t as usize) < e);
            x.set(k, u, (hi - lo) as f64);
        }
    }
    Ok(x)
}

/// Per-feature range learned on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn minmax_fit(features: &Matrix) -> MinMax {
    let m = features.cols();
    let mut min = vec![f64::INFINITY; m];
    let mut max = vec![f64::NEG_INFINITY; m];
    for r in 0..features.rows() {
        for (c, &v) in features.row(r).iter().enumerate() {
            min[c] = min[c].min(v);
            max[c] = max[c].max(v);
        }
    }
    if features.rows() == 0 {
        min.fill(0.0);
        max.fill(0.0);
    }
    MinMax { min, max }
}

/// Scales into `[0, 1]` with the stored range, clipping values outside
/// it; constant features map to 0.
pub fn minmax_apply(features: &Matrix, scale: &MinMax) -> Result<Matrix> {
    if features.cols() != scale.min.len() {
        return Err(Error::Shape(format!(
            "{} features, scaler fitted on {}",
            features.cols(),
            scale.min.len()
        )));
    }
    Ok(Matrix::from_fn(features.rows(), features.cols(), |r, c| {
        let span = scale.max[c] - scale.min[c];
        if span > 0.0 {
            ((features.get(r, c) - scale.min[c]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }))
}

/// Least-squares coefficients `[outputs × features]` and optional
/// intercept, from damped normal equations.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coefficients: Matrix,
    pub intercept: Option<Vec<f64>>,
}

impl LinearFit {
    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.coefficients.cols() {
            return Err(Error::Shape(format!(
                "{} features for a model over {}",
                features.cols(),
                self.coefficients.cols()
            )));
        }
        let mut y = features.matmul(&self.coefficients.transpose())?;
        if let Some(b) = &self.intercept {
            for r in 0..y.rows() {
                for (v, bi) in y.row_mut(r).iter_mut().zip(b) {
                    *v += bi;
                }
            }
        }
        Ok(y)
    }
}

pub fn fit_linear(features: &Matrix, targets: &Matrix, intercept: bool, ridge: f64) -> Result<LinearFit> {
    if features.rows() != targets.rows() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} target rows",
            features.rows(),
            targets.rows()
        )));
    }
    if features.rows() == 0 {
        return Err(Error::EmptyFeatures("no rows to fit".into()));
    }
    if !features.is_finite() || !targets.is_finite() {
        return Err(Error::Data("non-finite regression inputs".into()));
    }
    let m = features.cols();
    let design = if intercept {
        Matrix::from_fn(features.rows(), m + 1, |r, c| if c < m { features.get(r, c) } else { 1.0 })
    } else {
        features.clone()
    };
    let mut gram = design.gram();
    for d in 0..gram.rows() {
        gram.set(d, d, gram.get(d, d) + ridge);
    }
    let rhs = design.transpose().matmul(targets)?;
    let beta = cholesky_solve(&gram, &rhs)?;
    let outputs = targets.cols();
    Ok(LinearFit {
        coefficients: Matrix::from_fn(outputs, m, |o, c| beta.get(c, o)),
        intercept: intercept.then(|| (0..outputs).map(|o| beta.get(m, o)).collect()),
    })
}

/// A fitted five-finger spike-count regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub window: WindowSpec,
    pub scale: MinMax,
    pub fit: LinearFit,
}

impl LinearModel {
    pub fn n_units(&self) -> usize {
        self.scale.min.len()
    }

    /// Coefficients plus intercept when present.
    pub fn parameter_count(&self) -> usize {
        self.fit.coefficients.rows() * self.fit.coefficients.cols()
            + self.fit.intercept.as_ref().map_or(0, Vec::len)
    }

    pub fn latency_ms(&self) -> f64 {
        self.window.hop_ms()
    }
}

/// Closed-form parameter count of the regressor over `m` units.
pub fn parameter_formula(m: usize, intercept: bool) -> usize {
    N_FINGERS * m + if intercept { N_FINGERS } else { 0 }
}

/// Force at the last step of each window, `[n_windows × 5]`.
pub fn window_targets(force: &ForceTrajectory, window: &WindowSpec) -> Result<Matrix> {
    let (len, hop) = window.in_steps(&force.grid())?;
    let bounds = window_bounds(force.len(), len, hop);
    let mut y = Matrix::zeros(bounds.len(), N_FINGERS);
    for (k, &(_, e)) in bounds.iter().enumerate() {
        y.row_mut(k).copy_from_slice(&force.rows()[e - 1]);
    }
    Ok(y)
}

/// Fits scaler and regression on the given training trials. Windows never
/// straddle trial boundaries.
pub fn train_baseline(
    trials: &[(&SpikeTrainSet, &ForceTrajectory)],
    window: &WindowSpec,
    intercept: bool,
) -> Result<LinearModel> {
    let first = trials.first().ok_or_else(|| Error::EmptyFeatures("no training trials".into()))?;
    let m = first.0.n_units();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (spikes, force) in trials {
        if spikes.n_units() != m {
            return Err(Error::Shape("training trials differ in unit count".into()));
        }
        if spikes.n_steps() != force.len() {
            return Err(Error::Shape("spikes and force differ in length".into()));
        }
        xs.push(bin_counts(spikes, window)?);
        ys.push(window_targets(force, window)?);
    }
    let x = stack_rows(&xs, m);
    let y = stack_rows(&ys, N_FINGERS);
    let scale = minmax_fit(&x);
    let fit = fit_linear(&minmax_apply(&x, &scale)?, &y, intercept, DEFAULT_RIDGE)?;
    Ok(LinearModel { window: *window, scale, fit })
}

fn stack_rows(parts: &[Matrix], cols: usize) -> Matrix {
    let rows = parts.iter().map(Matrix::rows).sum();
    let data = parts.iter().flat_map(|p| p.as_slice().iter().copied()).collect();
    Matrix::from_vec(rows, cols, data).expect("consistent widths")
}

/// One prediction per window, `[n_windows × 5]`.
pub fn predict_windows(model: &LinearModel, spikes: &SpikeTrainSet) -> Result<Matrix> {
    let x = bin_counts(spikes, &model.window)?;
    model.fit.predict(&minmax_apply(&x, &model.scale)?)
}

/// Window-rate predictions held on the grid from each window's last step;
/// steps before the first window completes read zero.
pub fn predict_linear(model: &LinearModel, spikes: &SpikeTrainSet) -> Result<ForceTrajectory> {
    let y = predict_windows(model, spikes)?;
    let (len, hop) = model.window.in_steps(&spikes.grid())?;
    let bounds = window_bounds(spikes.n_steps(), len, hop);
    let mut values = vec![[0.0; N_FINGERS]; spikes.n_steps()];
    for (k, &(_, e)) in bounds.iter().enumerate() {
        let until = bounds.get(k + 1).map_or(spikes.n_steps(), |b| b.1 - 1);
        for row in &mut values[e - 1..until] {
            row.copy_from_slice(y.row(k));
        }
    }
    ForceTrajectory::new(spikes.grid(), values)
}

/// Writes a feature matrix as CSV with a header naming the units.
pub fn write_features_csv<W: Write>(features: &Matrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record((0..features.cols()).map(|u| format!("unit_{u}")))?;
    for r in 0..features.rows() {
        w.write_record(features.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(10.0, n).unwrap()
    }

    #[test]
    fn saturated_unit_counts_window_length() {
        let spikes = SpikeTrainSet::new(grid(40), vec![(0..40).collect(), vec![]]).unwrap();
        let x = bin_counts(&spikes, &WindowSpec::default()).unwrap();
        assert_eq!(x.rows(), 9);
        for r in 0..x.rows() {
            assert_eq!(x.row(r), &[8.0, 0.0]);
        }
    }

    #[test]
    fn too_short_is_empty_features() {
        let spikes = SpikeTrainSet::silent(grid(7), 3);
        assert!(matches!(bin_counts(&spikes, &WindowSpec::default()), Err(Error::EmptyFeatures(_))));
    }

    #[test]
    fn window_length_must_fit_grid() {
        let w = WindowSpec { length_ms: 85.0, overlap_fraction: 0.5 };
        assert!(bin_counts(&SpikeTrainSet::silent(grid(40), 1), &w).is_err());
    }

    #[test]
    fn window_count_matches_enumeration_sweep() {
        for len_ms in (50..=200).step_by(10) {
            let w = WindowSpec { length_ms: len_ms as f64, overlap_fraction: 0.5 };
            let (len, hop) = w.in_steps(&grid(1)).unwrap();
            for n in 0..120 {
                // Brute force over continuous-time windows [k·hop, k·hop + len).
                let mut count = 0;
                let mut k = 0;
                loop {
                    if k as f64 * hop + len as f64 > n as f64 {
                        break;
                    }
                    count += 1;
                    k += 1;
                }
                assert_eq!(n_windows(n, len, hop), count, "len {len} n {n}");
                for (s, e) in window_bounds(n, len, hop) {
                    assert!(e <= n && e - s == len);
                }
            }
        }
    }

    #[test]
    fn minmax_examples() {
        let x = Matrix::from_vec(3, 2, vec![2.0, 3.0, 4.0, 3.0, 6.0, 3.0]).unwrap();
        let s = minmax_fit(&x);
        let z = minmax_apply(&x, &s).unwrap();
        assert_eq!(z.as_slice(), &[0.0, 0.0, 0.5, 0.0, 1.0, 0.0]);
        let test = Matrix::from_vec(2, 2, vec![9.0, 3.0, 1.0, 5.0]).unwrap();
        let zt = minmax_apply(&test, &s).unwrap();
        // (9-2)/4 = 1.75 → 1; (1-2)/4 → 0; constant column stays 0.
        assert_eq!(zt.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(minmax_fit(&x), s, "applying must not touch the fitted range");
    }

    #[test]
    fn exact_linear_recovery() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::from_fn(40, 4, |_, _| r.random_range(0.0..1.0));
        let true_w = Matrix::from_fn(5, 4, |o, c| (o as f64 + 1.0) * 0.3 - c as f64 * 0.2);
        let y = x.matmul(&true_w.transpose()).unwrap();
        let fit = fit_linear(&x, &y, false, DEFAULT_RIDGE).unwrap();
        for (a, b) in fit.coefficients.as_slice().iter().zip(true_w.as_slice()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        let back = fit.predict(&x).unwrap();
        for (a, b) in back.as_slice().iter().zip(y.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_targets_go_to_intercept() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::from_fn(30, 3, |_, _| r.random_range(0.0..1.0));
        let y = Matrix::from_fn(30, 5, |_, _| 7.5);
        let fit = fit_linear(&x, &y, true, DEFAULT_RIDGE).unwrap();
        for b in fit.intercept.unwrap() {
            assert!((b - 7.5).abs() < 1e-6);
        }
        assert!(fit.coefficients.as_slice().iter().all(|c| c.abs() < 1e-6));
    }

    #[test]
    fn non_finite_rejected() {
        let x = Matrix::from_vec(2, 1, vec![1.0, f64::NAN]).unwrap();
        let y = Matrix::zeros(2, 5);
        assert!(matches!(fit_linear(&x, &y, false, DEFAULT_RIDGE), Err(Error::Data(_))));
    }

    #[test]
    fn single_window_single_row_and_hold() {
        let spikes = SpikeTrainSet::new(grid(8), vec![vec![0, 3, 5]]).unwrap();
        let force = ForceTrajectory::new(grid(8), vec![[3.0; 5]; 8]).unwrap();
        let model = train_baseline(&[(&spikes, &force)], &WindowSpec::default(), true).unwrap();
        assert_eq!(predict_windows(&model, &spikes).unwrap().rows(), 1);
        let traj = predict_linear(&model, &spikes).unwrap();
        assert_eq!(traj.rows()[6], [0.0; 5]);
        assert!((traj.rows()[7][0] - 3.0).abs() < 1e-6);
        assert_eq!(model.latency_ms(), 40.0);
    }

    #[test]
    fn zero_order_hold_follows_window_ends() {
        let spikes = SpikeTrainSet::new(grid(20), vec![(0..20).step_by(3).collect()]).unwrap();
        let force = ForceTrajectory::new(grid(20), (0..20).map(|t| [t as f64; 5]).collect()).unwrap();
        let model = train_baseline(&[(&spikes, &force)], &WindowSpec::default(), true).unwrap();
        let y = predict_windows(&model, &spikes).unwrap();
        let traj = predict_linear(&model, &spikes).unwrap();
        // Windows end at steps 7, 11, 15, 19.
        assert_eq!(traj.rows()[7][0], y.get(0, 0));
        assert_eq!(traj.rows()[10][0], y.get(0, 0));
        assert_eq!(traj.rows()[11][0], y.get(1, 0));
        assert_eq!(traj.rows()[19][0], y.get(3, 0));
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(parameter_formula(121, false), 605);
        assert_eq!(parameter_formula(121, true), 610);
    }

    #[test]
    fn features_csv_has_unit_header() {
        let x = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        write_features_csv(&x, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "unit_0,unit_1\n1,0\n");
    }

    proptest! {
        #[test]
        fn counts_match_brute_force(seed in 0u64..500, n in 8usize..200) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let trains: Vec<Vec<u32>> = (0..3)
                .map(|_| (0..n as u32).filter(|_| r.random_bool(0.3)).collect())
                .collect();
            let spikes = SpikeTrainSet::new(grid(n), trains.clone()).unwrap();
            let x = bin_counts(&spikes, &WindowSpec::default()).unwrap();
            for k in 0..x.rows() {
                let s = 4 * k;
                for (u, tr) in trains.iter().enumerate() {
                    let c = tr.iter().filter(|&&t| (t as usize) >= s && (t as usize) < s + 8).count();
                    prop_assert_eq!(x.get(k, u), c as f64);
                }
            }
        }

        #[test]
        fn normalised_training_features_in_unit_interval(seed in 0u64..200) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::from_fn(20, 4, |_, _| r.random_range(-5.0..5.0));
            let z = minmax_apply(&x, &minmax_fit(&x)).unwrap();
            prop_assert!(z.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
