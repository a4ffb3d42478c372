//! Synthetic datasets: trapezoidal force targets, motor-unit spike trains
//! drawn from a rate-coded renewal process, and envelope-level surrogate
//! 120-channel iEMG.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{decay_factor, TimeGrid, DEFAULT_DT_MS};
use crate::encoding::{channels_of_electrode, EmgBlock, EncoderConfig, N_CHANNELS, N_ELECTRODES};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{index_of, substream, Stream};
use crate::signals::{Direction, Finger, ForceTrajectory, SpikeTrainSet, N_FINGERS};

pub const MIN_RATE_PPS: f64 = 4.0;
pub const MAX_RATE_PPS: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForceProfileSpec {
    pub ramp_up_s: f64,
    pub hold_s: f64,
    pub ramp_down_s: f64,
    /// Hold level in %MVC.
    pub level: f64,
    pub rest_before_s: f64,
    pub rest_after_s: f64,
    /// Standard deviation of the |noise| added to non-target fingers.
    pub noise_floor: f64,
}

impl Default for ForceProfileSpec {
    fn default() -> Self {
        Self {
            ramp_up_s: 3.0,
            hold_s: 20.0,
            ramp_down_s: 3.0,
            level: 15.0,
            rest_before_s: 2.0,
            rest_after_s: 2.0,
            noise_floor: 0.0,
        }
    }
}

impl ForceProfileSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.ramp_up_s, self.hold_s, self.ramp_down_s, self.rest_before_s, self.rest_after_s];
        if parts.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Parameter("profile durations must be non-negative".into()));
        }
        if !(0.0..=100.0).contains(&self.level) {
            return Err(Error::Parameter(format!("profile level {} outside [0, 100] %MVC", self.level)));
        }
        if !(self.noise_floor >= 0.0) {
            return Err(Error::Parameter("noise floor must be non-negative".into()));
        }
        Ok(())
    }

    pub fn profile_s(&self) -> f64 {
        self.ramp_up_s + self.hold_s + self.ramp_down_s
    }

    pub fn trial_s(&self) -> f64 {
        self.rest_before_s + self.profile_s() + self.rest_after_s
    }

    pub fn trial_steps(&self, dt_ms: f64) -> usize {
        (self.trial_s() * 1000.0 / dt_ms).round() as usize
    }

    /// Target force `t_s` seconds after the ramp-up begins.
    pub fn value_at(&self, t_s: f64) -> f64 {
        let (up, hold, down) = (self.ramp_up_s, self.hold_s, self.ramp_down_s);
        if t_s <= 0.0 {
            0.0
        } else if t_s < up {
            self.level * t_s / up
        } else if t_s <= up + hold {
            self.level
        } else if t_s < up + hold + down {
            self.level * (up + hold + down - t_s) / down
        } else {
            0.0
        }
    }

    /// Whether `t_s` (relative to ramp onset) lies on the hold plateau.
    pub fn in_hold(&self, t_s: f64) -> bool {
        t_s >= self.ramp_up_s && t_s <= self.ramp_up_s + self.hold_s
    }
}

/// Time (s) since ramp onset of grid step `t`.
fn profile_time(spec: &ForceProfileSpec, grid: &TimeGrid, t: usize) -> f64 {
    t as f64 * grid.dt_ms / 1000.0 - spec.rest_before_s
}

/// Trapezoid on `finger`; other fingers read zero plus an optional noise
/// floor drawn from `rng`.
pub fn trapezoid<R: Rng + ?Sized>(
    spec: &ForceProfileSpec,
    grid: TimeGrid,
    finger: Finger,
    rng: &mut R,
) -> Result<ForceTrajectory> {
    spec.validate()?;
    let values = (0..grid.n_steps)
        .map(|t| {
            let mut row = [0.0; N_FINGERS];
            for (f, v) in row.iter_mut().enumerate() {
                if f == finger.index() {
                    *v = spec.value_at(profile_time(spec, &grid, t));
                } else if spec.noise_floor > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = (z * spec.noise_floor).abs();
                }
            }
            row
        })
        .collect();
    ForceTrajectory::new(grid, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotorUnitModel {
    /// Finger whose force drives the unit.
    pub finger: usize,
    pub recruitment_threshold: f64,
    pub min_rate: f64,
    pub rate_gain: f64,
    pub isi_cov: f64,
    pub max_rate: f64,
}

impl MotorUnitModel {
    /// Discharge rate (pps) at force `f`, or `None` below recruitment.
    pub fn rate_at(&self, f: f64) -> Option<f64> {
        (f >= self.recruitment_threshold).then(|| {
            (self.min_rate + self.rate_gain * (f - self.recruitment_threshold)).clamp(MIN_RATE_PPS, self.max_rate)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub recruitment_min: f64,
    pub recruitment_max: f64,
    pub isi_cov: f64,
    /// Fraction of the hold rate a unit discharges at on recruitment.
    pub onset_fraction: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { recruitment_min: 0.5, recruitment_max: 10.0, isi_cov: 0.2, onset_fraction: 0.6 }
    }
}

/// Draws `m` units; unit `i` follows finger `i mod 5` and reaches a hold
/// rate drawn from `N(rate_mean, rate_sd)` (clamped) at `level` %MVC.
pub fn sample_pool<R: Rng + ?Sized>(
    m: usize,
    rate_mean: f64,
    rate_sd: f64,
    level: f64,
    cfg: &PoolConfig,
    rng: &mut R,
) -> Result<Vec<MotorUnitModel>> {
    if m == 0 {
        return Err(Error::Parameter("a motor-unit pool needs at least one unit".into()));
    }
    if !(cfg.recruitment_min < cfg.recruitment_max) || !(cfg.isi_cov >= 0.0) {
        return Err(Error::Parameter("invalid motor-unit pool configuration".into()));
    }
    let normal = Normal::new(rate_mean, rate_sd).map_err(|e| Error::Parameter(format!("rate distribution: {e}")))?;
    Ok((0..m)
        .map(|i| {
            let thr = rng.random_range(cfg.recruitment_min..cfg.recruitment_max);
            let hold = normal.sample(rng).clamp(MIN_RATE_PPS, MAX_RATE_PPS);
            let min_rate = (hold * cfg.onset_fraction).max(MIN_RATE_PPS).min(hold);
            let span = level - thr;
            let rate_gain = if span > 0.0 { (hold - min_rate) / span } else { 0.0 };
            MotorUnitModel {
                finger: i % N_FINGERS,
                recruitment_threshold: thr,
                min_rate,
                rate_gain,
                isi_cov: cfg.isi_cov,
                max_rate: MAX_RATE_PPS,
            }
        })
        .collect())
}

/// Renewal spike trains: each unit accumulates `rate·dt` of phase and
/// fires when it passes a Gamma-distributed mark of unit mean and CoV
/// `isi_cov`. At most one spike per step. Phase restarts at a random
/// point on each recruitment.
pub fn sample_mu_spikes<R: Rng + ?Sized>(
    pool: &[MotorUnitModel],
    force: &ForceTrajectory,
    rng: &mut R,
) -> Result<SpikeTrainSet> {
    if pool.is_empty() {
        return Err(Error::Parameter("empty motor-unit pool".into()));
    }
    let dt_s = force.grid().dt_ms / 1000.0;
    let mut trains = Vec::with_capacity(pool.len());
    for unit in pool {
        let gamma = if unit.isi_cov > 0.0 {
            let k = 1.0 / (unit.isi_cov * unit.isi_cov);
            Some(Gamma::new(k, 1.0 / k).map_err(|e| Error::Parameter(format!("ISI distribution: {e}")))?)
        } else {
            None
        };
        let draw_mark = |rng: &mut R| gamma.as_ref().map_or(1.0, |g| g.sample(rng));
        let mut train = Vec::new();
        let mut phase = 0.0;
        let mut mark = 1.0;
        let mut active = false;
        for (t, row) in force.rows().iter().enumerate() {
            match unit.rate_at(row[unit.finger]) {
                Some(rate) => {
                    if !active {
                        active = true;
                        mark = draw_mark(rng);
                        phase = rng.random_range(0.0..1.0) * mark;
                    }
                    phase += rate * dt_s;
                    if phase >= mark {
                        train.push(t as u32);
                        // Excess beyond one mark is dropped: one spike per step.
                        phase = (phase - mark).min(0.999);
                        mark = draw_mark(rng);
                    }
                }
                None => active = false,
            }
        }
        trains.push(train);
    }
    SpikeTrainSet::new(force.grid(), trains)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmgSynthConfig {
    /// Width (channels) of each unit's Gaussian projection.
    pub bump_width: f64,
    /// Envelope smoothing of each unit's spikes.
    pub envelope_tau_ms: f64,
    /// Noise standard deviation before electrode gain.
    pub noise_sd: f64,
    /// Per-electrode amplitude scaling.
    pub electrode_gain: [f64; N_ELECTRODES],
}

impl Default for EmgSynthConfig {
    fn default() -> Self {
        Self { bump_width: 3.0, envelope_tau_ms: 20.0, noise_sd: 0.002, electrode_gain: [1.0; N_ELECTRODES] }
    }
}

/// Spatial footprint of one unit on the array.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitProjection {
    pub electrode: usize,
    /// Nonnegative weight per channel (zero off the electrode).
    pub weights: Vec<f64>,
}

/// Each unit lands on one random electrode with a Gaussian bump around a
/// random centre channel; larger-threshold units get larger amplitudes.
pub fn sample_projections<R: Rng + ?Sized>(
    pool: &[MotorUnitModel],
    cfg: &EmgSynthConfig,
    rng: &mut R,
) -> Vec<UnitProjection> {
    pool.iter()
        .map(|u| {
            let electrode = rng.random_range(1..=N_ELECTRODES);
            let chans = channels_of_electrode(electrode);
            let centre = rng.random_range(chans.start as f64..chans.end as f64);
            let amp = rng.random_range(0.5..1.0) * (0.5 + u.recruitment_threshold / 10.0);
            let mut weights = vec![0.0; N_CHANNELS];
            for c in chans {
                let d = (c as f64 - centre) / cfg.bump_width;
                weights[c] = amp * (-0.5 * d * d).exp();
            }
            UnitProjection { electrode, weights }
        })
        .collect()
}

/// Surrogate iEMG: each channel sums its units' smoothed spike envelopes
/// through their projections, scaled per electrode, plus Gaussian noise.
pub fn synth_iemg<R: Rng + ?Sized>(
    spikes: &SpikeTrainSet,
    projections: &[UnitProjection],
    cfg: &EmgSynthConfig,
    rng: &mut R,
) -> Result<EmgBlock> {
    if projections.len() != spikes.n_units() {
        return Err(Error::Shape(format!(
            "{} projections for {} units",
            projections.len(),
            spikes.n_units()
        )));
    }
    let grid = spikes.grid();
    let decay = decay_factor(cfg.envelope_tau_ms, grid.dt_ms)?;
    let n = grid.n_steps;
    let mut samples = Matrix::zeros(n, N_CHANNELS);
    let mut envelope = vec![0.0; spikes.n_units()];
    let steps = spikes.step_lists();
    let gain_of = |c: usize| cfg.electrode_gain[crate::encoding::electrode_of_channel(c) - 1];
    for (t, active) in steps.iter().enumerate() {
        envelope.iter_mut().for_each(|e| *e *= decay);
        for &u in active {
            envelope[u as usize] += 1.0;
        }
        let row = samples.row_mut(t);
        for (u, p) in projections.iter().enumerate() {
            if envelope[u] == 0.0 {
                continue;
            }
            for c in channels_of_electrode(p.electrode) {
                row[c] += p.weights[c] * envelope[u];
            }
        }
        for (c, v) in row.iter_mut().enumerate() {
            let noise = if cfg.noise_sd > 0.0 { rng.sample::<f64, _>(StandardNormal) * cfg.noise_sd } else { 0.0 };
            *v = (*v + noise) * gain_of(c);
        }
    }
    EmgBlock::new(grid, samples)
}

/// Named subject profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    S1,
    S2,
}

impl Profile {
    pub const ALL: [Profile; 2] = [Profile::S1, Profile::S2];

    pub fn name(self) -> &'static str {
        match self {
            Profile::S1 => "s1",
            Profile::S2 => "s2",
        }
    }

    pub fn preset(self) -> Preset {
        match self {
            Profile::S1 => Preset {
                profile: self,
                flexion: PoolPreset { units: 121, rate_mean: 11.90, rate_sd: 3.70 },
                extension: PoolPreset { units: 196, rate_mean: 13.00, rate_sd: 4.72 },
                encoder: EncoderConfig::subject1(),
                electrode_gain: [0.0515, 0.206, 0.103],
            },
            Profile::S2 => Preset {
                profile: self,
                flexion: PoolPreset { units: 51, rate_mean: 10.78, rate_sd: 3.05 },
                extension: PoolPreset { units: 93, rate_mean: 12.66, rate_sd: 4.38 },
                encoder: EncoderConfig::subject2(),
                electrode_gain: [0.078, 0.078, 0.078],
            },
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Profile::S1),
            "s2" => Ok(Profile::S2),
            other => Err(Error::Parse(format!("unknown profile '{other}' (expected s1 or s2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolPreset {
    pub units: usize,
    pub rate_mean: f64,
    pub rate_sd: f64,
}

/// Calibration constants of one subject profile.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub profile: Profile,
    pub flexion: PoolPreset,
    pub extension: PoolPreset,
    pub encoder: EncoderConfig,
    pub electrode_gain: [f64; N_ELECTRODES],
}

impl Preset {
    pub fn pool(&self, d: Direction) -> PoolPreset {
        match d {
            Direction::Flexion => self.flexion,
            Direction::Extension => self.extension,
        }
    }
}

/// A profile restricted to some directions, e.g. `s1`, `s1-flexion`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PresetSelection {
    pub profile: Profile,
    pub directions: Vec<Direction>,
}

impl FromStr for PresetSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (p, d) = match s.split_once('-') {
            Some((p, d)) => (p, Some(d)),
            None => (s, None),
        };
        let profile = p.parse()?;
        let directions = match d {
            Some(d) => vec![d.parse()?],
            None => Direction::ALL.to_vec(),
        };
        Ok(Self { profile, directions })
    }
}

impl TryFrom<String> for PresetSelection {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PresetSelection> for String {
    fn from(p: PresetSelection) -> String {
        p.to_string()
    }
}

impl fmt::Display for PresetSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.directions.len() == 1 {
            write!(f, "{}-{}", self.profile, self.directions[0])
        } else {
            write!(f, "{}", self.profile)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dt_ms: f64,
    pub repetitions: usize,
    pub force: ForceProfileSpec,
    pub pool: PoolConfig,
    pub emg: bool,
    pub bump_width: f64,
    pub envelope_tau_ms: f64,
    pub noise_sd: f64,
    /// Overrides the profile's per-electrode gains when set.
    pub electrode_gain: Option<[f64; N_ELECTRODES]>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let emg = EmgSynthConfig::default();
        Self {
            dt_ms: DEFAULT_DT_MS,
            repetitions: 2,
            force: ForceProfileSpec::default(),
            pool: PoolConfig::default(),
            emg: true,
            bump_width: emg.bump_width,
            envelope_tau_ms: emg.envelope_tau_ms,
            noise_sd: emg.noise_sd,
            electrode_gain: None,
        }
    }
}

impl SynthConfig {
    pub fn emg_config(&self, preset: &Preset) -> EmgSynthConfig {
        EmgSynthConfig {
            bump_width: self.bump_width,
            envelope_tau_ms: self.envelope_tau_ms,
            noise_sd: self.noise_sd,
            electrode_gain: self.electrode_gain.unwrap_or(preset.electrode_gain),
        }
    }
}

/// One recorded task repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub profile: Profile,
    pub direction: Direction,
    pub finger: Finger,
    /// 1-based repetition number.
    pub repetition: usize,
    pub seed: u64,
    pub spikes: SpikeTrainSet,
    pub force: ForceTrajectory,
    pub emg: Option<EmgBlock>,
}

impl Trial {
    pub fn n_units(&self) -> usize {
        self.spikes.n_units()
    }

    pub fn file_name(&self) -> String {
        format!("{}_{}_{}_rep{}.sfd", self.profile, self.direction, self.finger, self.repetition)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyntheticDataset {
    pub trials: Vec<Trial>,
}

impl SyntheticDataset {
    pub fn trials_for(&self, profile: Profile, direction: Direction, repetition: usize) -> Vec<&Trial> {
        let mut v: Vec<&Trial> = self
            .trials
            .iter()
            .filter(|t| t.profile == profile && t.direction == direction && t.repetition == repetition)
            .collect();
        v.sort_by_key(|t| t.finger.index());
        v
    }

    pub fn groups(&self) -> Vec<(Profile, Direction)> {
        let mut g: Vec<(Profile, Direction)> = self.trials.iter().map(|t| (t.profile, t.direction)).collect();
        g.sort_by_key(|(p, d)| (*p, d.index()));
        g.dedup();
        g
    }

    pub fn repetitions(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.trials.iter().map(|t| t.repetition).collect();
        r.sort_unstable();
        r.dedup();
        r
    }
}

fn dir_code(d: Direction) -> u64 {
    d.index() as u64
}

fn profile_code(p: Profile) -> u64 {
    match p {
        Profile::S1 => 1,
        Profile::S2 => 2,
    }
}

/// The unit pool and projections of one (profile, direction); shared by
/// every repetition of its tasks.
pub fn direction_pool(
    profile: Profile,
    direction: Direction,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(Vec<MotorUnitModel>, Vec<UnitProjection>)> {
    let preset = profile.preset();
    let pp = preset.pool(direction);
    let key = [profile_code(profile), dir_code(direction)];
    let mut rng = substream(seed, Stream::Datagen, index_of(&[key[0], key[1], 0]));
    let pool = sample_pool(pp.units, pp.rate_mean, pp.rate_sd, cfg.force.level, &cfg.pool, &mut rng)?;
    let mut rng = substream(seed, Stream::Datagen, index_of(&[key[0], key[1], 1]));
    let proj = sample_projections(&pool, &cfg.emg_config(&preset), &mut rng);
    Ok((pool, proj))
}

/// Generates every (direction, finger, repetition) trial of the selection.
pub fn build_dataset(selection: &PresetSelection, cfg: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.force.validate()?;
    if cfg.repetitions == 0 {
        return Err(Error::Config("at least one repetition is required".into()));
    }
    let profile = selection.profile;
    let preset = profile.preset();
    let emg_cfg = cfg.emg_config(&preset);
    let grid = TimeGrid::new(cfg.dt_ms, cfg.force.trial_steps(cfg.dt_ms))?;
    let mut trials = Vec::new();
    for &direction in &selection.directions {
        let (pool, proj) = direction_pool(profile, direction, cfg, seed)?;
        for finger in Finger::ALL {
            for repetition in 1..=cfg.repetitions {
                let idx = |k: u64| {
                    index_of(&[
                        profile_code(profile),
                        dir_code(direction),
                        2 + k,
                        finger.index() as u64,
                        repetition as u64,
                    ])
                };
                let mut r_force = substream(seed, Stream::Datagen, idx(0));
                let force = trapezoid(&cfg.force, grid, finger, &mut r_force)?;
                let mut r_spk = substream(seed, Stream::Datagen, idx(1));
                let spikes = sample_mu_spikes(&pool, &force, &mut r_spk)?;
                let emg = if cfg.emg {
                    let mut r_emg = substream(seed, Stream::Datagen, idx(2));
                    Some(synth_iemg(&spikes, &proj, &emg_cfg, &mut r_emg)?)
                } else {
                    None
                };
                trials.push(Trial { profile, direction, finger, repetition, seed, spikes, force, emg });
            }
        }
    }
    Ok(SyntheticDataset { trials })
}

/// Mean per-unit discharge rate (pps) over the hold plateau, counting
/// only units that fired there.
pub fn hold_discharge_rates(trial: &Trial, spec: &ForceProfileSpec) -> Vec<f64> {
    let grid = trial.spikes.grid();
    let hold: Vec<usize> =
        (0..grid.n_steps).filter(|&t| spec.in_hold(profile_time(spec, &grid, t))).collect();
    let (Some(&s), Some(&e)) = (hold.first(), hold.last()) else {
        return Vec::new();
    };
    let dur = (e + 1 - s) as f64 * grid.dt_ms / 1000.0;
    trial
        .spikes
        .trains()
        .iter()
        .map(|tr| tr.iter().filter(|&&t| (t as usize) >= s && (t as usize) <= e).count())
        .filter(|&n| n > 0)
        .map(|n| n as f64 / dur)
        .collect()
}
