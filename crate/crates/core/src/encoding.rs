//! Spike encoding of 120-channel iEMG: one LIF neuron per channel driven by
//! the rectified signal, with one threshold per electrode array.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Layer, LayerInput, LayerState, NeuronParams, ResetMode, SynapseParams, TimeGrid};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::signals::SpikeTrainSet;

pub const N_CHANNELS: usize = 120;
pub const N_ELECTRODES: usize = 3;
pub const CHANNELS_PER_ELECTRODE: usize = N_CHANNELS / N_ELECTRODES;

/// Electrode (1-based) that records channel `c`.
pub fn electrode_of_channel(c: usize) -> usize {
    c / CHANNELS_PER_ELECTRODE + 1
}

pub fn channels_of_electrode(e: usize) -> std::ops::Range<usize> {
    let start = (e - 1) * CHANNELS_PER_ELECTRODE;
    start..start + CHANNELS_PER_ELECTRODE
}

/// Filtered iEMG on the decoder grid, `[n_steps × 120]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmgBlock {
    grid: TimeGrid,
    samples: Matrix,
}

impl EmgBlock {
    pub fn new(grid: TimeGrid, samples: Matrix) -> Result<Self> {
        if samples.cols() != N_CHANNELS {
            return Err(Error::Shape(format!("EMG has {} channels, expected {N_CHANNELS}", samples.cols())));
        }
        if samples.rows() != grid.n_steps {
            return Err(Error::Shape(format!("{} EMG rows for {} steps", samples.rows(), grid.n_steps)));
        }
        if !samples.is_finite() {
            return Err(Error::Data("EMG contains non-finite samples".into()));
        }
        Ok(Self { grid, samples })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self { grid, samples: Matrix::zeros(grid.n_steps, N_CHANNELS) }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut s = self.samples.clone();
        s.as_mut_slice().iter_mut().for_each(|v| *v *= k);
        Self { grid: self.grid, samples: s }
    }

    pub fn concat(parts: &[&EmgBlock]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let n: usize = parts.iter().map(|p| p.n_steps()).sum();
        let data = parts.iter().flat_map(|p| p.samples.as_slice().iter().copied()).collect();
        Self::new(first.grid.with_steps(n), Matrix::from_vec(n, N_CHANNELS, data)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub tau_m_ms: f64,
    /// One threshold per electrode array.
    pub thresholds: [f64; N_ELECTRODES],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::subject1()
    }
}

impl EncoderConfig {
    pub fn subject1() -> Self {
        Self { tau_m_ms: 20.0, thresholds: [0.1, 0.4, 0.2] }
    }

    pub fn subject2() -> Self {
        Self { tau_m_ms: 20.0, thresholds: [0.06; N_ELECTRODES] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m_ms > 0.0) {
            return Err(Error::Parameter("encoder time constant must be positive".into()));
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::Parameter("encoder thresholds must be positive".into()));
        }
        Ok(())
    }

    fn channel_thresholds(&self) -> Vec<f64> {
        (0..N_CHANNELS).map(|c| self.thresholds[electrode_of_channel(c) - 1]).collect()
    }
}

/// One-to-one LIF population with instantaneous unit-gain synapses.
fn encoder_layer(tau_m_ms: f64, thresholds: Vec<f64>, dt_ms: f64) -> Result<Layer> {
    let n = thresholds.len();
    Layer::new(
        SynapseParams::one_to_one(vec![1.0; n]),
        NeuronParams::spiking(vec![tau_m_ms; n], thresholds, ResetMode::ToZero),
        dt_ms,
    )
}

/// Encodes the given channels with one threshold each; returns a spike
/// train per listed channel.
fn encode_channels(emg: &EmgBlock, channels: &[usize], thresholds: Vec<f64>, tau_m_ms: f64) -> Result<Vec<Vec<u32>>> {
    let layer = encoder_layer(tau_m_ms, thresholds, emg.grid.dt_ms)?;
    let mut state = LayerState::zeros(channels.len());
    let mut trains = vec![Vec::new(); channels.len()];
    let mut current = vec![0.0; channels.len()];
    for t in 0..emg.n_steps() {
        let row = emg.samples.row(t);
        for (x, &c) in current.iter_mut().zip(channels) {
            *x = row[c].abs();
        }
        let frame = layer.lif_step(&mut state, LayerInput::Currents(&current), t)?;
        for k in frame.active() {
            trains[k].push(t as u32);
        }
    }
    Ok(trains)
}

/// Full-wave rectified iEMG injected as current into one LIF neuron per
/// channel; reset to zero on each spike.
pub fn encode(emg: &EmgBlock, cfg: &EncoderConfig) -> Result<SpikeTrainSet> {
    cfg.validate()?;
    let channels: Vec<usize> = (0..N_CHANNELS).collect();
    let trains = encode_channels(emg, &channels, cfg.channel_thresholds(), cfg.tau_m_ms)?;
    SpikeTrainSet::new(emg.grid, trains)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateSummary {
    pub per_unit_hz: Vec<f64>,
    pub mean_hz: f64,
    pub sd_hz: f64,
}

/// Per-unit event rates over `duration_s`, with mean and sample sd.
pub fn event_rate(spikes: &SpikeTrainSet, duration_s: f64) -> Result<RateSummary> {
    if !(duration_s > 0.0) {
        return Err(Error::Parameter("rate duration must be positive".into()));
    }
    let per_unit_hz: Vec<f64> = spikes.trains().iter().map(|t| t.len() as f64 / duration_s).collect();
    let (mean_hz, sd_hz) = mean_sd(&per_unit_hz);
    Ok(RateSummary { per_unit_hz, mean_hz, sd_hz })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Thresholds found for each electrode and the bisection trace that led
/// there, as `(threshold, mean group rate in Hz)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub config: EncoderConfig,
    pub traces: Vec<Vec<(f64, f64)>>,
    pub achieved_hz: [f64; N_ELECTRODES],
}

const MAX_BISECTIONS: usize = 200;

/// Bisects each electrode's threshold until its mean channel rate is
/// within `tolerance_hz` of `target_hz`.
pub fn calibrate_thresholds(
    emg: &EmgBlock,
    target_hz: f64,
    tolerance_hz: f64,
    tau_m_ms: f64,
) -> Result<Calibration> {
    if !(target_hz > 0.0) || !(tolerance_hz > 0.0) {
        return Err(Error::Parameter("calibration target and tolerance must be positive".into()));
    }
    let beta = crate::dynamics::decay_factor(tau_m_ms, emg.grid.dt_ms)?;
    let duration_s = emg.grid.duration_s();
    let mut thresholds = [0.0; N_ELECTRODES];
    let mut achieved_hz = [0.0; N_ELECTRODES];
    let mut traces = Vec::with_capacity(N_ELECTRODES);

    for e in 1..=N_ELECTRODES {
        let channels: Vec<usize> = channels_of_electrode(e).collect();
        let group_rate = |thr: f64| -> Result<f64> {
            let trains = encode_channels(emg, &channels, vec![thr; channels.len()], tau_m_ms)?;
            let total: usize = trains.iter().map(Vec::len).sum();
            Ok(total as f64 / channels.len() as f64 / duration_s)
        };
        // No membrane can exceed peak |s| / (1 − β), so nothing fires above it.
        let peak = channels
            .iter()
            .flat_map(|&c| (0..emg.n_steps()).map(move |t| (t, c)))
            .map(|(t, c)| emg.samples.get(t, c).abs())
            .fold(0.0, f64::max);
        let mut hi = peak / (1.0 - beta) * 1.01;
        let mut lo = hi * 1e-9;
        let mut trace = Vec::new();
        if peak == 0.0 {
            return Err(Error::Calibration(format!("electrode {e} carries no signal")));
        }
        let r_lo = group_rate(lo)?;
        trace.push((lo, r_lo));
        if r_lo < target_hz - tolerance_hz {
            return Err(Error::Calibration(format!(
                "electrode {e}: at most {r_lo:.3} Hz reachable, target {target_hz} Hz"
            )));
        }
        let mut found = None;
        if (r_lo - target_hz).abs() <= tolerance_hz {
            found = Some((lo, r_lo));
        }
        for _ in 0..MAX_BISECTIONS {
            if found.is_some() {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let r = group_rate(mid)?;
            trace.push((mid, r));
            if (r - target_hz).abs() <= tolerance_hz {
                found = Some((mid, r));
            } else if r > target_hz {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        check_monotone(&trace, e)?;
        let (thr, rate) = found.ok_or_else(|| {
            Error::Calibration(format!("electrode {e}: no threshold within {tolerance_hz} Hz of {target_hz} Hz"))
        })?;
        thresholds[e - 1] = thr;
        achieved_hz[e - 1] = rate;
        traces.push(trace);
    }
    Ok(Calibration { config: EncoderConfig { tau_m_ms, thresholds }, traces, achieved_hz })
}

/// Rates along a bisection trace must not increase with threshold.
pub fn check_monotone(trace: &[(f64, f64)], electrode: usize) -> Result<()> {
    let mut sorted = trace.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if sorted.windows(2).any(|w| w[1].1 > w[0].1) {
        return Err(Error::Calibration(format!(
            "electrode {electrode}: event rate rose with threshold during bisection"
        )));
    }
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

    fn noise_emg(seed: u64, n: usize, amp: [f64; 3]) -> EmgBlock {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::from_fn(n, N_CHANNELS, |_, c| amp[electrode_of_channel(c) - 1] * r.random_range(-1.0..1.0));
        EmgBlock::new(grid(n), m).unwrap()
    }

    #[test]
    fn electrode_groups() {
        assert_eq!(electrode_of_channel(0), 1);
        assert_eq!(electrode_of_channel(39), 1);
        assert_eq!(electrode_of_channel(40), 2);
        assert_eq!(electrode_of_channel(119), 3);
        assert_eq!(channels_of_electrode(3), 80..120);
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        assert!(matches!(EmgBlock::new(grid(3), Matrix::zeros(3, 100)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_signal_zero_spikes() {
        let s = encode(&EmgBlock::zeros(grid(500)), &EncoderConfig::subject1()).unwrap();
        assert_eq!(s.total_spikes(), 0);
        assert_eq!(s.n_units(), 120);
    }

    #[test]
    fn subthreshold_constant_input_never_fires() {
        // Equilibrium s / (1 − β) just below 0.1 for electrode 1.
        let beta = (-0.5f64).exp();
        let s = 0.099 * (1.0 - beta);
        let emg = EmgBlock::new(grid(2000), Matrix::from_fn(2000, N_CHANNELS, |_, _| s)).unwrap();
        let cfg = EncoderConfig { tau_m_ms: 20.0, thresholds: [0.1; 3] };
        assert_eq!(encode(&emg, &cfg).unwrap().total_spikes(), 0);
    }

    #[test]
    fn negative_samples_are_rectified() {
        let emg = EmgBlock::new(grid(10), Matrix::from_fn(10, N_CHANNELS, |_, _| -1.0)).unwrap();
        let s = encode(&emg, &EncoderConfig::subject2()).unwrap();
        assert_eq!(s.train(0).len(), 10);
    }

    #[test]
    fn scalar_oracle_single_channel() {
        let emg = noise_emg(3, 800, [0.05, 0.2, 0.1]);
        let cfg = EncoderConfig::subject1();
        let s = encode(&emg, &cfg).unwrap();
        let beta = (-0.5f64).exp();
        for c in [0usize, 57, 101] {
            let thr = cfg.thresholds[electrode_of_channel(c) - 1];
            let mut u = 0.0;
            let mut expect = Vec::new();
            for t in 0..800 {
                u = beta * u + emg.samples().get(t, c).abs();
                if u >= thr {
                    expect.push(t as u32);
                    u = 0.0;
                }
            }
            assert_eq!(s.train(c), &expect[..]);
        }
    }

    #[test]
    fn event_rate_examples() {
        let g = TimeGrid::new(10.0, 3000).unwrap();
        let s = SpikeTrainSet::new(g, vec![(0..30).map(|k| k * 100).collect(), vec![]]).unwrap();
        let r = event_rate(&s, 30.0).unwrap();
        assert_eq!(r.per_unit_hz, vec![1.0, 0.0]);
        assert_eq!(r.mean_hz, 0.5);
        assert!(event_rate(&s, 0.0).is_err());
    }

    #[test]
    fn calibration_hits_target_and_rescales() {
        let emg = noise_emg(5, 3000, [0.02, 0.08, 0.04]);
        let cal = calibrate_thresholds(&emg, 5.0, 0.5, 20.0).unwrap();
        let enc = encode(&emg, &cal.config).unwrap();
        for e in 1..=3 {
            let n: usize = channels_of_electrode(e).map(|c| enc.train(c).len()).sum();
            let rate = n as f64 / 40.0 / 30.0;
            assert!((rate - 5.0).abs() <= 0.5, "electrode {e}: {rate}");
            assert_eq!(rate, cal.achieved_hz[e - 1]);
        }
        let doubled = calibrate_thresholds(&emg.scaled(2.0), 5.0, 0.5, 20.0).unwrap();
        assert!(doubled.achieved_hz.iter().all(|r| (r - 5.0).abs() <= 0.5));
    }

    #[test]
    fn zero_signal_cannot_be_calibrated() {
        let r = calibrate_thresholds(&EmgBlock::zeros(grid(100)), 5.0, 0.5, 20.0);
        assert!(matches!(r, Err(Error::Calibration(_))));
    }

    #[test]
    fn non_monotone_trace_is_rejected() {
        assert!(check_monotone(&[(0.1, 5.0), (0.2, 6.0)], 1).is_err());
        assert!(check_monotone(&[(0.2, 4.0), (0.1, 5.0)], 1).is_ok());
    }

    proptest! {
        #[test]
        fn raising_a_threshold_never_adds_spikes(seed in 0u64..100, t1 in 0.01f64..0.5, dt in 0.0f64..0.5) {
            let emg = noise_emg(seed, 300, [0.05, 0.05, 0.05]);
            let lo = encode(&emg, &EncoderConfig { tau_m_ms: 20.0, thresholds: [t1; 3] }).unwrap();
            let hi = encode(&emg, &EncoderConfig { tau_m_ms: 20.0, thresholds: [t1 + dt; 3] }).unwrap();
            prop_assert!(hi.total_spikes() <= lo.total_spikes());
        }

        #[test]
        fn channels_are_independent(seed in 0u64..100, c in 0usize..120) {
            let emg = noise_emg(seed, 200, [0.05, 0.1, 0.08]);
            let mut other = emg.samples().clone();
            for t in 0..200 {
                for k in 0..N_CHANNELS {
                    if k != c {
                        other.set(t, k, other.get(t, k) * 3.0 + 0.01);
                    }
                }
            }
            let a = encode(&emg, &EncoderConfig::subject1()).unwrap();
            let b = encode(&EmgBlock::new(grid(200), other).unwrap(), &EncoderConfig::subject1()).unwrap();
            prop_assert_eq!(a.train(c), b.train(c));
        }
    }
}
