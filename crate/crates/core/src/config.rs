//! Experiment configuration (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::crossval::EvalSettings;
use crate::eval::robustness::DEFAULT_RATES;
use crate::eval::ModelSpec;
use crate::rng::index_of;
use crate::synthgen::{PresetSelection, SynthConfig};

/// Where trials come from: a synthetic preset or a directory (or single
/// file) of dataset containers. Exactly one must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<PresetSelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self { preset: Some("s1".parse().expect("valid preset")), path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Top-level seed; every random stream derives from it.
    pub seed: u64,
    /// Initialisation repeats of each spiking decoder.
    pub n_seeds: usize,
    pub decoders: Vec<ModelSpec>,
    /// Spike-omission levels; empty disables the sweep.
    pub omission_rates: Vec<f64>,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub synth: SynthConfig,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_seeds: 10,
            decoders: vec![ModelSpec::Baseline, ModelSpec::Li, ModelSpec::Lif],
            omission_rates: DEFAULT_RATES.to_vec(),
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSource::default(),
            synth: SynthConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Seeds of the spiking-decoder repeats, derived from the top-level
    /// seed.
    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|k| index_of(&[self.seed, k])).collect()
    }

    /// Semantic checks; failures name the offending key.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.decoders.is_empty() {
            return Err(("decoders", "at least one decoder is required".into()));
        }
        let mut d = self.decoders.clone();
        d.sort();
        d.dedup();
        if d.len() != self.decoders.len() {
            return Err(("decoders", "decoders listed twice".into()));
        }
        if self.n_seeds == 0 && self.decoders.iter().any(|m| m.decoder_kind().is_some()) {
            return Err(("n_seeds", "spiking decoders need n_seeds ≥ 1".into()));
        }
        if let Some(r) = self.omission_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(("omission_rates", format!("rate {r} outside [0, 1]")));
        }
        if self.omission_rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(("omission_rates", "rates must be strictly increasing".into()));
        }
        match (&self.dataset.preset, &self.dataset.path) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(("dataset", "set exactly one of dataset.preset and dataset.path".into())),
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(("output_dir", "output directory must be set".into()));
        }
        if (self.synth.dt_ms - self.eval.decoder.dt_ms).abs() > 1e-12 {
            return Err(("dt_ms", "synth.dt_ms and eval.decoder.dt_ms differ".into()));
        }
        if self.synth.repetitions != 2 {
            return Err(("repetitions", "cross-validation needs exactly 2 repetitions".into()));
        }
        if self.decoders.contains(&ModelSpec::EncodedLi) && self.dataset.preset.is_some() && !self.synth.emg {
            return Err(("emg", "encoded-li needs synth.emg = true".into()));
        }
        self.synth.force.validate().map_err(|e| ("force", e.to_string()))?;
        self.eval.train.validate().map_err(|e| ("train", e.to_string()))?;
        self.eval.validate().map_err(|e| ("eval", e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(key, msg)| Error::Config(format!("{key}: {msg}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses and validates, reporting the line of the offending entry.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            Error::Config(with_line(line, e.message()))
        })?;
        cfg.check().map_err(|(key, msg)| Error::Config(with_line(line_of_key(text, key), &format!("{key}: {msg}"))))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn with_line(line: Option<usize>, msg: &str) -> String {
    match line {
        Some(l) => format!("line {l}: {msg}"),
        None => msg.to_string(),
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// First line assigning `key` or opening a table named `key`.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim();
        let assigned = l.split_once('=').map(|(k, _)| k.trim().rsplit('.').next().unwrap_or("").trim());
        assigned == Some(key)
            || l.strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .is_some_and(|t| t.rsplit('.').next() == Some(key))
    })
    .map(|i| i + 1)
}
