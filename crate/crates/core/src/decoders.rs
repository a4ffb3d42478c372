//! The two spiking decoder topologies and streamed force prediction.
//!
//! * `li`: dense exponential synapses into five leaky-integrator readouts.
//! * `lif`: dense exponential synapses into five LIF readouts, whose spikes
//!   pass one-to-one through an instantaneous-synapse LI conversion stage
//!   (τ = 50 ms) and a second LI smoothing stage (τ = 80 ms).
//!
//! Both end in a unit-gain first-order low-pass on the final membrane
//! trace, emitted every grid step.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    decay_factor, Layer, LayerInput, LayerState, NeuronParams, ResetMode, SpikeFrame, SynapseParams,
    TimeGrid, Weights, DEFAULT_DT_MS,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::signals::{ForceTrajectory, SpikeTrainSet, N_FINGERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Li,
    Lif,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Li => "li",
            DecoderKind::Lif => "lif",
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "li" => Ok(DecoderKind::Li),
            "lif" => Ok(DecoderKind::Lif),
            other => Err(Error::Config(format!("unknown decoder kind '{other}' (expected li or lif)"))),
        }
    }
}

/// Architecture constants and initialisation ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub dt_ms: f64,
    pub tau_syn_ms: f64,
    /// Fixed readout membrane constant of the LI configuration. The
    /// hyper-parameter table lists 30 ms; 80 ms is the default.
    pub li_readout_tau_ms: f64,
    pub lif_readout_tau_mean_ms: f64,
    pub lif_readout_tau_sd_ms: f64,
    pub threshold: f64,
    pub reset: ResetMode,
    pub conv_tau_ms: f64,
    pub smooth_tau_ms: f64,
    pub output_tau_ms: f64,
    pub li_init_range: f64,
    pub lif_init_range: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dt_ms: DEFAULT_DT_MS,
            tau_syn_ms: 10.0,
            li_readout_tau_ms: 80.0,
            lif_readout_tau_mean_ms: 30.0,
            lif_readout_tau_sd_ms: 1.5,
            threshold: 0.045,
            reset: ResetMode::ToZero,
            conv_tau_ms: 50.0,
            smooth_tau_ms: 80.0,
            output_tau_ms: 80.0,
            li_init_range: 0.1,
            lif_init_range: 0.01,
        }
    }
}

/// A fixed one-to-one LI stage of the LIF cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct OneToOneStage {
    pub synapse: SynapseParams,
    pub neurons: NeuronParams,
}

impl OneToOneStage {
    fn leaky(n: usize, tau_ms: f64) -> Self {
        Self { synapse: SynapseParams::one_to_one(vec![1.0; n]), neurons: NeuronParams::leaky(vec![tau_ms; n]) }
    }

    fn gains(&self) -> &[f64] {
        match &self.synapse.weights {
            Weights::Diagonal(d) => d,
            Weights::Dense(_) => unreachable!("one-to-one stages are diagonal"),
        }
    }
}

/// Per-parameter trainability of the parameter groups that can learn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableMask {
    pub dense_weights: Vec<bool>,
    pub dense_bias: Vec<bool>,
    pub readout_tau: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub kind: DecoderKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub dt_ms: f64,
    pub dense: SynapseParams,
    pub readout: NeuronParams,
    pub conv: Option<OneToOneStage>,
    pub smooth: Option<OneToOneStage>,
    pub output_tau_ms: f64,
    pub trainable: TrainableMask,
}

/// Builds a freshly initialised five-output decoder over `input_dim` inputs.
pub fn build_decoder<R: Rng + ?Sized>(
    kind: DecoderKind,
    input_dim: usize,
    cfg: &DecoderConfig,
    rng: &mut R,
) -> Result<DecoderModel> {
    if input_dim == 0 {
        return Err(Error::Parameter("a decoder needs at least one input".into()));
    }
    let out = N_FINGERS;
    let range = match kind {
        DecoderKind::Li => cfg.li_init_range,
        DecoderKind::Lif => cfg.lif_init_range,
    };
    let weights = Matrix::from_fn(out, input_dim, |_, _| rng.random_range(-range..range));
    let dense = SynapseParams::exponential(cfg.tau_syn_ms, weights, vec![0.0; out]);
    let model = match kind {
        DecoderKind::Li => DecoderModel {
            kind,
            input_dim,
            output_dim: out,
            dt_ms: cfg.dt_ms,
            dense,
            readout: NeuronParams::leaky(vec![cfg.li_readout_tau_ms; out]),
            conv: None,
            smooth: None,
            output_tau_ms: cfg.output_tau_ms,
            trainable: TrainableMask {
                dense_weights: vec![true; out * input_dim],
                dense_bias: vec![true; out],
                readout_tau: vec![false; out],
            },
        },
        DecoderKind::Lif => {
            let normal = Normal::new(cfg.lif_readout_tau_mean_ms, cfg.lif_readout_tau_sd_ms)
                .map_err(|e| Error::Config(format!("readout time-constant distribution: {e}")))?;
            let tau: Vec<f64> = (0..out)
                .map(|_| normal.sample(rng).max(cfg.dt_ms * 0.1))
                .collect();
            DecoderModel {
                kind,
                input_dim,
                output_dim: out,
                dt_ms: cfg.dt_ms,
                dense,
                readout: NeuronParams::spiking(tau, vec![cfg.threshold; out], cfg.reset),
                conv: Some(OneToOneStage::leaky(out, cfg.conv_tau_ms)),
                smooth: Some(OneToOneStage::leaky(out, cfg.smooth_tau_ms)),
                output_tau_ms: cfg.output_tau_ms,
                trainable: TrainableMask {
                    dense_weights: vec![true; out * input_dim],
                    dense_bias: vec![true; out],
                    readout_tau: vec![true; out],
                },
            }
        }
    };
    model.validate()?;
    Ok(model)
}

/// Closed-form trainable count: dense weights and biases, plus the
/// readout time constants of the spiking configuration.
pub fn trainable_parameter_formula(kind: DecoderKind, input_dim: usize) -> usize {
    let base = N_FINGERS * input_dim + N_FINGERS;
    match kind {
        DecoderKind::Li => base,
        DecoderKind::Lif => base + N_FINGERS,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParameterCount {
    pub total: usize,
    pub trainable: usize,
}

/// One stored parameter group and how it enters the static accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamGroup {
    pub name: &'static str,
    /// Entries counted toward the total parameter count.
    pub counted: usize,
    pub trainable: usize,
    /// Entries that must actually be stored for inference: nonzero values,
    /// diagonal only for one-to-one blocks.
    pub stored_nonzero: usize,
}

impl DecoderModel {
    pub fn validate(&self) -> Result<()> {
        self.dense.validate()?;
        self.readout.validate()?;
        if self.dense.weights.n_in() != self.input_dim || self.dense.weights.n_out() != self.output_dim {
            return Err(Error::Shape("dense weights disagree with decoder dimensions".into()));
        }
        if !matches!(self.dense.weights, Weights::Dense(_)) {
            return Err(Error::Shape("decoder input synapses must be dense".into()));
        }
        if self.readout.len() != self.output_dim {
            return Err(Error::Shape("readout size disagrees with output dimension".into()));
        }
        match self.kind {
            DecoderKind::Li => {
                if self.conv.is_some() || self.smooth.is_some() || self.readout.threshold.is_some() {
                    return Err(Error::Config("li decoders have no spiking or conversion stages".into()));
                }
            }
            DecoderKind::Lif => {
                let (Some(conv), Some(smooth)) = (&self.conv, &self.smooth) else {
                    return Err(Error::Config("lif decoders need conversion and smoothing stages".into()));
                };
                if self.readout.threshold.is_none() {
                    return Err(Error::Config("lif readout needs a threshold".into()));
                }
                for stage in [conv, smooth] {
                    stage.synapse.validate()?;
                    stage.neurons.validate()?;
                    if !matches!(stage.synapse.weights, Weights::Diagonal(_))
                        || stage.neurons.len() != self.output_dim
                    {
                        return Err(Error::Shape("cascade stages must be one-to-one".into()));
                    }
                }
            }
        }
        let m = &self.trainable;
        if m.dense_weights.len() != self.input_dim * self.output_dim
            || m.dense_bias.len() != self.output_dim
            || m.readout_tau.len() != self.output_dim
        {
            return Err(Error::Shape("trainability mask does not match parameters".into()));
        }
        if !(self.output_tau_ms > 0.0) || !(self.dt_ms > 0.0) {
            return Err(Error::Parameter("time constants must be positive".into()));
        }
        Ok(())
    }

    pub fn dense_weights(&self) -> &Matrix {
        match &self.dense.weights {
            Weights::Dense(m) => m,
            Weights::Diagonal(_) => unreachable!("validated as dense"),
        }
    }

    pub fn dense_weights_mut(&mut self) -> &mut Matrix {
        match &mut self.dense.weights {
            Weights::Dense(m) => m,
            Weights::Diagonal(_) => unreachable!("validated as dense"),
        }
    }

    pub fn grid(&self, n_steps: usize) -> TimeGrid {
        TimeGrid { dt_ms: self.dt_ms, n_steps }
    }

    /// Static parameter accounting.
    ///
    /// The spiking configuration's fixed groups are a shared readout
    /// threshold, the conversion stage stored as a full `5×5` block with a
    /// bias vector, the per-neuron conversion and smoothing time constants,
    /// and a single shared smoothing gain.
    pub fn parameter_groups(&self) -> Vec<ParamGroup> {
        let nz = |v: &[f64]| v.iter().filter(|x| **x != 0.0).count();
        let count_true = |v: &[bool]| v.iter().filter(|b| **b).count();
        let out = self.output_dim;
        let mut groups = vec![
            ParamGroup {
                name: "dense.weights",
                counted: out * self.input_dim,
                trainable: count_true(&self.trainable.dense_weights),
                stored_nonzero: nz(self.dense_weights().as_slice()),
            },
            ParamGroup {
                name: "dense.bias",
                counted: out,
                trainable: count_true(&self.trainable.dense_bias),
                stored_nonzero: nz(&self.dense.bias),
            },
            ParamGroup {
                name: "readout.tau_m",
                counted: out,
                trainable: count_true(&self.trainable.readout_tau),
                stored_nonzero: nz(&self.readout.tau_m_ms),
            },
        ];
        if let (Some(conv), Some(smooth)) = (&self.conv, &self.smooth) {
            let shared_threshold = self
                .readout
                .threshold
                .as_ref()
                .is_some_and(|t| t.windows(2).all(|w| w[0] == w[1]));
            let thr_count = if shared_threshold { 1 } else { out };
            groups.push(ParamGroup {
                name: "readout.threshold",
                counted: thr_count,
                trainable: 0,
                stored_nonzero: thr_count,
            });
            groups.push(ParamGroup {
                name: "conv.weights",
                counted: out * out,
                trainable: 0,
                stored_nonzero: nz(conv.gains()),
            });
            groups.push(ParamGroup {
                name: "conv.bias",
                counted: out,
                trainable: 0,
                stored_nonzero: nz(&conv.synapse.bias),
            });
            groups.push(ParamGroup {
                name: "conv.tau_m",
                counted: out,
                trainable: 0,
                stored_nonzero: nz(&conv.neurons.tau_m_ms),
            });
            let shared_gain = smooth.gains().windows(2).all(|w| w[0] == w[1]);
            let gain_count = if shared_gain { 1 } else { out };
            groups.push(ParamGroup {
                name: "smooth.weights",
                counted: gain_count,
                trainable: 0,
                stored_nonzero: if shared_gain { usize::from(smooth.gains()[0] != 0.0) } else { nz(smooth.gains()) },
            });
            groups.push(ParamGroup {
                name: "smooth.tau_m",
                counted: out,
                trainable: 0,
                stored_nonzero: nz(&smooth.neurons.tau_m_ms),
            });
        }
        groups
    }

    pub fn count_parameters(&self) -> ParameterCount {
        let groups = self.parameter_groups();
        ParameterCount {
            total: groups.iter().map(|g| g.counted).sum(),
            trainable: groups.iter().map(|g| g.trainable).sum(),
        }
    }

    pub fn stored_nonzero_parameters(&self) -> usize {
        self.parameter_groups().iter().map(|g| g.stored_nonzero).sum()
    }

    /// Fresh all-zero runtime state.
    pub fn initial_state(&self) -> DecoderState {
        DecoderState {
            dense: LayerState::zeros(self.output_dim),
            conv: self.conv.as_ref().map(|_| LayerState::zeros(self.output_dim)),
            smooth: self.smooth.as_ref().map(|_| LayerState::zeros(self.output_dim)),
            output: vec![0.0; self.output_dim],
        }
    }
}

/// Everything a decoder carries between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub dense: LayerState,
    pub conv: Option<LayerState>,
    pub smooth: Option<LayerState>,
    /// Low-pass filtered force estimate of the last step.
    pub output: Vec<f64>,
}

/// A decoder with decay factors resolved, ready to step.
#[derive(Debug, Clone)]
pub struct Decoder {
    dense: Layer,
    conv: Option<Layer>,
    smooth: Option<Layer>,
    gamma: f64,
    input_dim: usize,
    output_dim: usize,
    dt_ms: f64,
}

impl Decoder {
    pub fn new(model: &DecoderModel) -> Result<Self> {
        model.validate()?;
        let dense = Layer::new(model.dense.clone(), model.readout.clone(), model.dt_ms)?;
        let stage = |s: &Option<OneToOneStage>| -> Result<Option<Layer>> {
            s.as_ref()
                .map(|s| Layer::new(s.synapse.clone(), s.neurons.clone(), model.dt_ms))
                .transpose()
        };
        Ok(Self {
            dense,
            conv: stage(&model.conv)?,
            smooth: stage(&model.smooth)?,
            gamma: decay_factor(model.output_tau_ms, model.dt_ms)?,
            input_dim: model.input_dim,
            output_dim: model.output_dim,
            dt_ms: model.dt_ms,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Advances one grid step given the inputs that fired (ascending).
    pub fn step(&self, state: &mut DecoderState, active: &[u32], t_index: usize) -> Result<()> {
        let membrane: Vec<f64> = match (&self.conv, &self.smooth) {
            (Some(conv), Some(smooth)) => {
                let spikes = self.dense.lif_step(&mut state.dense, LayerInput::Active(active), t_index)?;
                let conv_state = state.conv.as_mut().ok_or_else(|| missing_state("conversion"))?;
                let u_conv = conv.li_step(conv_state, LayerInput::Spikes(&spikes))?;
                let smooth_state = state.smooth.as_mut().ok_or_else(|| missing_state("smoothing"))?;
                smooth.li_step(smooth_state, LayerInput::Currents(&u_conv))?
            }
            _ => self.dense.li_step(&mut state.dense, LayerInput::Active(active))?,
        };
        let g = self.gamma;
        for (y, z) in state.output.iter_mut().zip(&membrane) {
            *y = g * *y + (1.0 - g) * z;
        }
        Ok(())
    }

    /// Runs over a spike set, one output row per grid step.
    pub fn run(&self, spikes: &SpikeTrainSet, state: &mut DecoderState) -> Result<Vec<Vec<f64>>> {
        if spikes.grid().dt_ms != self.dt_ms {
            return Err(Error::Sequencing(format!(
                "spikes on a {} ms grid, decoder runs at {} ms",
                spikes.grid().dt_ms,
                self.dt_ms
            )));
        }
        if spikes.n_units() != self.input_dim {
            return Err(Error::Shape(format!(
                "{} input units for a decoder over {}",
                spikes.n_units(),
                self.input_dim
            )));
        }
        let steps = spikes.step_lists();
        let mut out = Vec::with_capacity(steps.len());
        for (t, active) in steps.iter().enumerate() {
            self.step(state, active, t)?;
            out.push(state.output.clone());
        }
        Ok(out)
    }
}

fn missing_state(stage: &str) -> Error {
    Error::Shape(format!("decoder state lacks the {stage} stage"))
}

/// Streams `spikes` through the decoder, continuing from `carry` when given.
/// Emits one five-finger estimate per grid step.
pub fn predict_stream(
    model: &DecoderModel,
    spikes: &SpikeTrainSet,
    carry: Option<DecoderState>,
) -> Result<(ForceTrajectory, DecoderState)> {
    if model.output_dim != N_FINGERS {
        return Err(Error::Shape(format!(
            "force trajectories have {N_FINGERS} fingers, decoder emits {}",
            model.output_dim
        )));
    }
    let decoder = Decoder::new(model)?;
    let mut state = carry.unwrap_or_else(|| model.initial_state());
    let rows = decoder.run(spikes, &mut state)?;
    let values = rows
        .into_iter()
        .map(|r| {
            let mut a = [0.0; N_FINGERS];
            a.copy_from_slice(&r);
            a
        })
        .collect();
    Ok((ForceTrajectory::new(spikes.grid(), values)?, state))
}

/// Prediction latency of the streamed decoders: one grid step.
pub fn latency_ms(model: &DecoderModel) -> f64 {
    model.dt_ms
}

/// Combines two direction-specific decoders into one block-diagonal
/// decoder: inputs are `a`'s units then `b`'s, outputs `a`'s then `b`'s,
/// and all cross weights are zero.
pub fn merge_directions(a: &DecoderModel, b: &DecoderModel) -> Result<DecoderModel> {
    if a.kind != b.kind || a.dt_ms != b.dt_ms || a.output_tau_ms != b.output_tau_ms {
        return Err(Error::Config("only decoders of the same configuration can be merged".into()));
    }
    if a.dense.tau_syn_ms != b.dense.tau_syn_ms || a.readout.reset != b.readout.reset {
        return Err(Error::Config("merged decoders must share synaptic constants".into()));
    }
    let (ma, mb) = (a.input_dim, b.input_dim);
    let (oa, ob) = (a.output_dim, b.output_dim);
    let weights = Matrix::from_fn(oa + ob, ma + mb, |r, c| match (r < oa, c < ma) {
        (true, true) => a.dense_weights().get(r, c),
        (false, false) => b.dense_weights().get(r - oa, c - ma),
        _ => 0.0,
    });
    let cat = |x: &[f64], y: &[f64]| [x, y].concat();
    let dense = SynapseParams {
        tau_syn_ms: a.dense.tau_syn_ms,
        weights: Weights::Dense(weights),
        bias: cat(&a.dense.bias, &b.dense.bias),
    };
    let readout = NeuronParams {
        tau_m_ms: cat(&a.readout.tau_m_ms, &b.readout.tau_m_ms),
        threshold: match (&a.readout.threshold, &b.readout.threshold) {
            (Some(x), Some(y)) => Some(cat(x, y)),
            _ => None,
        },
        reset: a.readout.reset,
    };
    let stage = |x: &Option<OneToOneStage>, y: &Option<OneToOneStage>| {
        match (x, y) {
            (Some(x), Some(y)) => Some(OneToOneStage {
                synapse: SynapseParams {
                    tau_syn_ms: x.synapse.tau_syn_ms,
                    weights: Weights::Diagonal(cat(x.gains(), y.gains())),
                    bias: cat(&x.synapse.bias, &y.synapse.bias),
                },
                neurons: NeuronParams::leaky(cat(&x.neurons.tau_m_ms, &y.neurons.tau_m_ms)),
            }),
            _ => None,
        }
    };
    let mut dense_mask = Vec::with_capacity((oa + ob) * (ma + mb));
    for r in 0..oa + ob {
        for c in 0..ma + mb {
            dense_mask.push(match (r < oa, c < ma) {
                (true, true) => a.trainable.dense_weights[r * ma + c],
                (false, false) => b.trainable.dense_weights[(r - oa) * mb + (c - ma)],
                _ => false,
            });
        }
    }
    let merged = DecoderModel {
        kind: a.kind,
        input_dim: ma + mb,
        output_dim: oa + ob,
        dt_ms: a.dt_ms,
        dense,
        readout,
        conv: stage(&a.conv, &b.conv),
        smooth: stage(&a.smooth, &b.smooth),
        output_tau_ms: a.output_tau_ms,
        trainable: TrainableMask {
            dense_weights: dense_mask,
            dense_bias: [a.trainable.dense_bias.clone(), b.trainable.dense_bias.clone()].concat(),
            readout_tau: [a.trainable.readout_tau.clone(), b.trainable.readout_tau.clone()].concat(),
        },
    };
    merged.validate()?;
    Ok(merged)
}

// ---------------------------------------------------------------------------
// Binary model file. Layout (all integers and floats little-endian):
//
//   magic        8 bytes  "SPKFDEC\0"
//   version      u32      = 1
//   kind         u8       0 = li, 1 = lif
//   reset        u8       0 = to-zero, 1 = subtract
//   reserved     u16      = 0
//   input_dim    u32
//   output_dim   u32
//   dt_ms        f64
//   output_tau   f64
//   n_arrays     u32
//   n_arrays × { name_len u16, name utf-8, len u32, has_mask u8,
//                len × f64, [len × u8 mask if has_mask] }
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"SPKFDEC\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

struct NamedArray {
    name: String,
    values: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl DecoderModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = vec![
            NamedArray {
                name: "dense.weights".into(),
                values: self.dense_weights().as_slice().to_vec(),
                mask: Some(self.trainable.dense_weights.clone()),
            },
            NamedArray {
                name: "dense.bias".into(),
                values: self.dense.bias.clone(),
                mask: Some(self.trainable.dense_bias.clone()),
            },
            NamedArray {
                name: "dense.tau_syn".into(),
                values: self.dense.tau_syn_ms.into_iter().collect(),
                mask: None,
            },
            NamedArray {
                name: "readout.tau_m".into(),
                values: self.readout.tau_m_ms.clone(),
                mask: Some(self.trainable.readout_tau.clone()),
            },
        ];
        if let Some(th) = &self.readout.threshold {
            arrays.push(NamedArray { name: "readout.threshold".into(), values: th.clone(), mask: None });
        }
        for (prefix, stage) in [("conv", &self.conv), ("smooth", &self.smooth)] {
            if let Some(s) = stage {
                arrays.push(NamedArray { name: format!("{prefix}.weights"), values: s.gains().to_vec(), mask: None });
                arrays.push(NamedArray { name: format!("{prefix}.bias"), values: s.synapse.bias.clone(), mask: None });
                arrays.push(NamedArray {
                    name: format!("{prefix}.tau_m"),
                    values: s.neurons.tau_m_ms.clone(),
                    mask: None,
                });
            }
        }

        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        buf.push(match self.kind {
            DecoderKind::Li => 0,
            DecoderKind::Lif => 1,
        });
        buf.push(match self.readout.reset {
            ResetMode::ToZero => 0,
            ResetMode::Subtract => 1,
        });
        buf.extend_from_slice(&0u16.to_le_bytes());
        buf.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.output_dim as u32).to_le_bytes());
        buf.extend_from_slice(&self.dt_ms.to_le_bytes());
        buf.extend_from_slice(&self.output_tau_ms.to_le_bytes());
        buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for a in &arrays {
            buf.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(a.name.as_bytes());
            buf.extend_from_slice(&(a.values.len() as u32).to_le_bytes());
            buf.push(u8::from(a.mask.is_some()));
            for v in &a.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(mask) = &a.mask {
                buf.extend(mask.iter().map(|&b| u8::from(b)));
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a decoder model file".into()));
        }
        let version = r.u32()?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model file version {version}")));
        }
        let kind = match r.u8()? {
            0 => DecoderKind::Li,
            1 => DecoderKind::Lif,
            k => return Err(Error::Format(format!("unknown decoder kind tag {k}"))),
        };
        let reset = match r.u8()? {
            0 => ResetMode::ToZero,
            1 => ResetMode::Subtract,
            k => return Err(Error::Format(format!("unknown reset tag {k}"))),
        };
        r.take(2)?;
        let input_dim = r.u32()? as usize;
        let output_dim = r.u32()? as usize;
        let dt_ms = r.f64()?;
        let output_tau_ms = r.f64()?;
        let n_arrays = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("array name is not utf-8".into()))?;
            let len = r.u32()? as usize;
            let has_mask = r.u8()? != 0;
            let values = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let mask = if has_mask {
                Some(r.take(len)?.iter().map(|&b| b != 0).collect())
            } else {
                None
            };
            arrays.push(NamedArray { name, values, mask });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after model arrays".into()));
        }
        let find = |name: &str| -> Result<&NamedArray> {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::Format(format!("model file lacks array '{name}'")))
        };
        let masked = |name: &str| -> Result<(Vec<f64>, Vec<bool>)> {
            let a = find(name)?;
            let mask = a.mask.clone().ok_or_else(|| Error::Format(format!("array '{name}' lacks a mask")))?;
            Ok((a.values.clone(), mask))
        };
        let (w, w_mask) = masked("dense.weights")?;
        let (bias, b_mask) = masked("dense.bias")?;
        let (tau, tau_mask) = masked("readout.tau_m")?;
        let tau_syn = find("dense.tau_syn")?.values.first().copied();
        let threshold = arrays.iter().find(|a| a.name == "readout.threshold").map(|a| a.values.clone());
        let stage = |prefix: &str| -> Result<Option<OneToOneStage>> {
            if !arrays.iter().any(|a| a.name == format!("{prefix}.weights")) {
                return Ok(None);
            }
            Ok(Some(OneToOneStage {
                synapse: SynapseParams {
                    tau_syn_ms: None,
                    weights: Weights::Diagonal(find(&format!("{prefix}.weights"))?.values.clone()),
                    bias: find(&format!("{prefix}.bias"))?.values.clone(),
                },
                neurons: NeuronParams::leaky(find(&format!("{prefix}.tau_m"))?.values.clone()),
            }))
        };
        let model = DecoderModel {
            kind,
            input_dim,
            output_dim,
            dt_ms,
            dense: SynapseParams {
                tau_syn_ms: tau_syn,
                weights: Weights::Dense(Matrix::from_vec(output_dim, input_dim, w)?),
                bias,
            },
            readout: NeuronParams { tau_m_ms: tau, threshold, reset },
            conv: stage("conv")?,
            smooth: stage("smooth")?,
            output_tau_ms,
            trainable: TrainableMask { dense_weights: w_mask, dense_bias: b_mask, readout_tau: tau_mask },
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("model file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Convenience for tests and diagnostics: frames of a spike set as the
/// decoder sees them.
pub fn frames_of(spikes: &SpikeTrainSet) -> Vec<SpikeFrame> {
    spikes.frames()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_spikes(seed: u64, n_units: usize, n_steps: usize, p: f64) -> SpikeTrainSet {
        let mut r = rng(seed);
        let trains = (0..n_units)
            .map(|_| (0..n_steps as u32).filter(|_| r.random_bool(p)).collect())
            .collect();
        SpikeTrainSet::new(TimeGrid::new(10.0, n_steps).unwrap(), trains).unwrap()
    }

    #[test]
    fn li_parameter_counts() {
        let m = build_decoder(DecoderKind::Li, 121, &DecoderConfig::default(), &mut rng(1)).unwrap();
        assert_eq!(m.count_parameters(), ParameterCount { total: 615, trainable: 610 });
        assert_eq!((m.dense_weights().rows(), m.dense_weights().cols()), (5, 121));
        assert_eq!(m.dense.bias.len(), 5);
    }

    #[test]
    fn lif_parameter_counts() {
        let m = build_decoder(DecoderKind::Lif, 121, &DecoderConfig::default(), &mut rng(1)).unwrap();
        assert_eq!(m.count_parameters(), ParameterCount { total: 657, trainable: 615 });
        let m = build_decoder(DecoderKind::Lif, 196, &DecoderConfig::default(), &mut rng(1)).unwrap();
        assert_eq!(m.count_parameters().trainable, 990);
        assert_eq!(m.count_parameters().total, 1032);
    }

    #[test]
    fn formula_edge_case() {
        assert_eq!(trainable_parameter_formula(DecoderKind::Li, 0), 5);
        assert!(build_decoder(DecoderKind::Li, 0, &DecoderConfig::default(), &mut rng(0)).is_err());
    }

    #[test]
    fn unknown_kind_is_config_error() {
        assert!(matches!("gru".parse::<DecoderKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn init_ranges_and_time_constants() {
        let cfg = DecoderConfig::default();
        let li = build_decoder(DecoderKind::Li, 200, &cfg, &mut rng(3)).unwrap();
        assert!(li.dense_weights().as_slice().iter().all(|w| w.abs() < 0.1));
        assert!(li.dense_weights().as_slice().iter().any(|w| w.abs() > 0.09));
        assert_eq!(li.readout.tau_m_ms, vec![80.0; 5]);
        let lif = build_decoder(DecoderKind::Lif, 200, &cfg, &mut rng(3)).unwrap();
        assert!(lif.dense_weights().as_slice().iter().all(|w| w.abs() < 0.01));
        assert!(lif.readout.tau_m_ms.iter().all(|t| (t - 30.0).abs() < 10.0));
        assert_eq!(lif.readout.threshold, Some(vec![0.045; 5]));
        assert_eq!(lif.conv.as_ref().unwrap().neurons.tau_m_ms, vec![50.0; 5]);
        assert_eq!(lif.smooth.as_ref().unwrap().neurons.tau_m_ms, vec![80.0; 5]);
        let alt = DecoderConfig { li_readout_tau_ms: 30.0, ..cfg };
        let li30 = build_decoder(DecoderKind::Li, 10, &alt, &mut rng(3)).unwrap();
        assert_eq!(li30.readout.tau_m_ms, vec![30.0; 5]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        for kind in [DecoderKind::Li, DecoderKind::Lif] {
            let m = build_decoder(kind, 8, &DecoderConfig::default(), &mut rng(4)).unwrap();
            let spikes = SpikeTrainSet::silent(TimeGrid::new(10.0, 300).unwrap(), 8);
            let (traj, _) = predict_stream(&m, &spikes, None).unwrap();
            assert!(traj.rows().iter().flatten().all(|v| *v == 0.0));
            assert_eq!(traj.len(), 300);
        }
    }

    #[test]
    fn single_weight_matches_scalar_filter_cascade() {
        let mut m = build_decoder(DecoderKind::Li, 3, &DecoderConfig::default(), &mut rng(5)).unwrap();
        m.dense_weights_mut().as_mut_slice().fill(0.0);
        m.dense_weights_mut().set(2, 1, 0.8);
        let spikes = random_spikes(6, 3, 400, 0.15);
        let (traj, _) = predict_stream(&m, &spikes, None).unwrap();

        let (a, b, g) = ((-1.0f64).exp(), (-10.0f64 / 80.0).exp(), (-10.0f64 / 80.0).exp());
        let (mut i, mut u, mut y) = (0.0, 0.0, 0.0);
        let train = spikes.train(1);
        for t in 0..400u32 {
            let x = if train.binary_search(&t).is_ok() { 0.8 } else { 0.0 };
            i = a * i + x;
            u = b * u + i;
            y = g * y + (1.0 - g) * u;
            let row = traj.rows()[t as usize];
            assert!((row[2] - y).abs() < 1e-12);
            assert_eq!(row[0], 0.0);
        }
    }

    #[test]
    fn lif_cascade_matches_scalar_recursion() {
        let mut m = build_decoder(DecoderKind::Lif, 2, &DecoderConfig::default(), &mut rng(7)).unwrap();
        m.dense_weights_mut().as_mut_slice().fill(0.0);
        m.dense_weights_mut().set(0, 0, 0.03);
        let spikes = random_spikes(8, 2, 500, 0.3);
        let (traj, _) = predict_stream(&m, &spikes, None).unwrap();

        let a = (-1.0f64).exp();
        let b = (-10.0 / m.readout.tau_m_ms[0]).exp();
        let bc = (-10.0f64 / 50.0).exp();
        let bs = (-10.0f64 / 80.0).exp();
        let g = bs;
        let (mut i, mut u, mut uc, mut us, mut y) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut n_spikes = 0;
        for t in 0..500u32 {
            let x = if spikes.train(0).binary_search(&t).is_ok() { 0.03 } else { 0.0 };
            i = a * i + x;
            u = b * u + i;
            let s = if u >= 0.045 {
                u = 0.0;
                n_spikes += 1;
                1.0
            } else {
                0.0
            };
            uc = bc * uc + s;
            us = bs * us + uc;
            y = g * y + (1.0 - g) * us;
            assert!((traj.rows()[t as usize][0] - y).abs() < 1e-12);
        }
        assert!(n_spikes > 0);
    }

    #[test]
    fn segmented_prediction_equals_whole() {
        for kind in [DecoderKind::Li, DecoderKind::Lif] {
            let m = build_decoder(kind, 12, &DecoderConfig::default(), &mut rng(9)).unwrap();
            let spikes = random_spikes(10, 12, 3000, 0.12);
            let (whole, end_whole) = predict_stream(&m, &spikes, None).unwrap();
            let mut carry = None;
            let mut parts = Vec::new();
            for k in 0..3 {
                let seg = spikes.slice(k * 1000, (k + 1) * 1000).unwrap();
                let (p, st) = predict_stream(&m, &seg, carry).unwrap();
                parts.push(p);
                carry = Some(st);
            }
            let joined = ForceTrajectory::concat(&parts.iter().collect::<Vec<_>>()).unwrap();
            assert_eq!(joined, whole);
            assert_eq!(carry.unwrap(), end_whole);
        }
    }

    #[test]
    fn grid_and_shape_mismatch() {
        let m = build_decoder(DecoderKind::Li, 4, &DecoderConfig::default(), &mut rng(1)).unwrap();
        let wrong_dt = SpikeTrainSet::silent(TimeGrid::new(5.0, 10).unwrap(), 4);
        assert!(matches!(predict_stream(&m, &wrong_dt, None), Err(Error::Sequencing(_))));
        let wrong_units = SpikeTrainSet::silent(TimeGrid::new(10.0, 10).unwrap(), 5);
        assert!(matches!(predict_stream(&m, &wrong_units, None), Err(Error::Shape(_))));
    }

    #[test]
    fn block_diagonal_merge_preserves_each_direction() {
        for kind in [DecoderKind::Li, DecoderKind::Lif] {
            let mut fa = build_decoder(kind, 7, &DecoderConfig::default(), &mut rng(11)).unwrap();
            let fb = build_decoder(kind, 4, &DecoderConfig::default(), &mut rng(12)).unwrap();
            fa.dense.bias = vec![0.001, -0.002, 0.0, 0.003, 0.0];
            let merged = merge_directions(&fa, &fb).unwrap();
            assert_eq!(merged.output_dim, 10);
            let sa = random_spikes(13, 7, 800, 0.2);
            let sb = random_spikes(14, 4, 800, 0.2);
            let both = sa.stack_units(&sb).unwrap();
            let dec = |m: &DecoderModel, s: &SpikeTrainSet| {
                Decoder::new(m).unwrap().run(s, &mut m.initial_state()).unwrap()
            };
            let ya = dec(&fa, &sa);
            let yb = dec(&fb, &sb);
            let ym = dec(&merged, &both);
            for t in 0..800 {
                assert_eq!(ym[t][..5], ya[t][..]);
                assert_eq!(ym[t][5..], yb[t][..]);
            }
        }
    }

    #[test]
    fn model_file_rejects_garbage() {
        assert!(DecoderModel::from_bytes(b"nope").is_err());
        let m = build_decoder(DecoderKind::Li, 3, &DecoderConfig::default(), &mut rng(1)).unwrap();
        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(matches!(DecoderModel::from_bytes(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn model_file_round_trip(seed in 0u64..200, m in 1usize..40, lif in any::<bool>()) {
            let kind = if lif { DecoderKind::Lif } else { DecoderKind::Li };
            let mut model = build_decoder(kind, m, &DecoderConfig::default(), &mut rng(seed)).unwrap();
            model.trainable.dense_weights[0] = false;
            model.dense.bias[1] = -0.25;
            let back = DecoderModel::from_bytes(&model.to_bytes()).unwrap();
            prop_assert_eq!(back, model);
        }
    }
}
