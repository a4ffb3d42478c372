//! Evaluation: metrics, cross-validation, spike-omission sweeps, static
//! footprints and rank-sum statistics.

pub mod crossval;
pub mod footprint;
pub mod metrics;
pub mod robustness;
pub mod stats;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoders::DecoderKind;
use crate::error::Error;

pub use crossval::{cross_validate, evaluate_folds, fit_folds, summarize, CvSummary, EvalSettings, FoldRun, TaskMetric};
pub use footprint::{baseline_footprint, decoder_footprint, encoded_footprint, FootprintReport};
pub use metrics::{metrics, MetricReport};
pub use robustness::{omit_spikes, robustness_sweep, robustness_table, RobustnessRow};
pub use stats::{mann_whitney_u, MannWhitney};

/// A decoder together with its input representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelSpec {
    Baseline,
    Li,
    Lif,
    /// LI decoder over spike-encoded EMG channels.
    EncodedLi,
}

impl ModelSpec {
    pub const ALL: [ModelSpec; 4] = [ModelSpec::Baseline, ModelSpec::Li, ModelSpec::Lif, ModelSpec::EncodedLi];

    pub fn name(self) -> &'static str {
        match self {
            ModelSpec::Baseline => "baseline",
            ModelSpec::Li => "li",
            ModelSpec::Lif => "lif",
            ModelSpec::EncodedLi => "encoded-li",
        }
    }

    pub fn decoder_kind(self) -> Option<DecoderKind> {
        match self {
            ModelSpec::Baseline => None,
            ModelSpec::Li | ModelSpec::EncodedLi => Some(DecoderKind::Li),
            ModelSpec::Lif => Some(DecoderKind::Lif),
        }
    }

    pub fn uses_emg(self) -> bool {
        self == ModelSpec::EncodedLi
    }

    /// Input-type label used in tables.
    pub fn input_name(self) -> &'static str {
        if self.uses_emg() {
            "iemg"
        } else {
            "motor-units"
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        ModelSpec::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown decoder {s:?}; expected baseline, li, lif or encoded-li")))
    }
}

impl TryFrom<String> for ModelSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<ModelSpec> for String {
    fn from(m: ModelSpec) -> String {
        m.name().to_string()
    }
}
