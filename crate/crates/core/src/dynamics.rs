//! Discrete-time leaky-integrator (LI) and leaky-integrate-and-fire (LIF)
//! dynamics with exponential-kernel synapses.
//!
//! One step of a layer with `n_out` neurons:
//!
//! ```text
//! i_syn[t+1] = α · i_syn[t] + W · x[t+1] + b
//! u[t+1]     = β · u[t]     + i_syn[t+1]
//! ```
//!
//! with `α = exp(-dt/τ_syn)` and `β = exp(-dt/τ_m)`. An instantaneous
//! synapse has no kernel (`α = 0`). LIF neurons threshold the integrated
//! membrane and reset where they fire.
//!
//! State is carried explicitly in [`LayerState`], so a long sequence can be
//! streamed in segments with results identical to a single pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DEFAULT_DT_MS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt_ms: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt_ms: f64, n_steps: usize) -> Result<Self> {
        if !(dt_ms > 0.0) || !dt_ms.is_finite() {
            return Err(Error::Parameter(format!("time step must be positive, got {dt_ms}")));
        }
        Ok(Self { dt_ms, n_steps })
    }

    pub fn duration_s(&self) -> f64 {
        self.dt_ms * self.n_steps as f64 / 1000.0
    }

    pub fn with_steps(&self, n_steps: usize) -> Self {
        Self { dt_ms: self.dt_ms, n_steps }
    }

    /// Number of grid steps spanned by `ms`, which must be a whole multiple
    /// of the step.
    pub fn steps_for_ms(&self, ms: f64) -> Result<usize> {
        let steps = ms / self.dt_ms;
        if (steps - steps.round()).abs() > 1e-9 || steps < 0.0 {
            return Err(Error::Parameter(format!(
                "{ms} ms is not a whole number of {} ms steps",
                self.dt_ms
            )));
        }
        Ok(steps.round() as usize)
    }

    pub fn same_step(&self, other: &TimeGrid) -> bool {
        self.dt_ms == other.dt_ms
    }
}

/// `exp(-dt/tau)`, the per-step retention of a first-order decay.
pub fn decay_factor(tau_ms: f64, dt_ms: f64) -> Result<f64> {
    if !(tau_ms > 0.0) || !(dt_ms > 0.0) {
        return Err(Error::Parameter(format!(
            "time constants must be positive (tau={tau_ms} ms, dt={dt_ms} ms)"
        )));
    }
    Ok((-dt_ms / tau_ms).exp())
}

/// Inverse of [`decay_factor`] for a fixed step.
pub fn tau_from_decay(beta: f64, dt_ms: f64) -> f64 {
    -dt_ms / beta.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResetMode {
    #[default]
    ToZero,
    Subtract,
}

/// Connection pattern of a synapse population.
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    /// Full `[n_out × n_in]` matrix.
    Dense(Matrix),
    /// One-to-one connections, `n_out == n_in`.
    Diagonal(Vec<f64>),
}

impl Weights {
    pub fn n_out(&self) -> usize {
        match self {
            Weights::Dense(m) => m.rows(),
            Weights::Diagonal(d) => d.len(),
        }
    }

    pub fn n_in(&self) -> usize {
        match self {
            Weights::Dense(m) => m.cols(),
            Weights::Diagonal(d) => d.len(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Weights::Dense(m) => m.is_finite(),
            Weights::Diagonal(d) => d.iter().all(|v| v.is_finite()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynapseParams {
    /// `None` for an instantaneous synapse.
    pub tau_syn_ms: Option<f64>,
    pub weights: Weights,
    pub bias: Vec<f64>,
}

impl SynapseParams {
    pub fn exponential(tau_syn_ms: f64, weights: Matrix, bias: Vec<f64>) -> Self {
        Self { tau_syn_ms: Some(tau_syn_ms), weights: Weights::Dense(weights), bias }
    }

    pub fn one_to_one(gains: Vec<f64>) -> Self {
        let n = gains.len();
        Self { tau_syn_ms: None, weights: Weights::Diagonal(gains), bias: vec![0.0; n] }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(tau) = self.tau_syn_ms {
            if !(tau > 0.0) {
                return Err(Error::Parameter(format!("tau_syn must be positive, got {tau}")));
            }
        }
        if !self.weights.is_finite() || self.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Parameter("synaptic weights must be finite".into()));
        }
        if self.bias.len() != self.weights.n_out() {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} output neurons",
                self.bias.len(),
                self.weights.n_out()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronParams {
    pub tau_m_ms: Vec<f64>,
    /// Absent for pure leaky integrators.
    pub threshold: Option<Vec<f64>>,
    pub reset: ResetMode,
}

impl NeuronParams {
    pub fn leaky(tau_m_ms: Vec<f64>) -> Self {
        Self { tau_m_ms, threshold: None, reset: ResetMode::ToZero }
    }

    pub fn spiking(tau_m_ms: Vec<f64>, threshold: Vec<f64>, reset: ResetMode) -> Self {
        Self { tau_m_ms, threshold: Some(threshold), reset }
    }

    pub fn len(&self) -> usize {
        self.tau_m_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau_m_ms.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.tau_m_ms.iter().find(|t| !(**t > 0.0)) {
            return Err(Error::Parameter(format!("tau_m must be positive, got {bad}")));
        }
        if let Some(th) = &self.threshold {
            if th.len() != self.tau_m_ms.len() {
                return Err(Error::Shape(format!(
                    "{} thresholds for {} neurons",
                    th.len(),
                    self.tau_m_ms.len()
                )));
            }
            if let Some(bad) = th.iter().find(|t| !(**t > 0.0)) {
                return Err(Error::Parameter(format!("threshold must be positive, got {bad}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub i_syn: Vec<f64>,
    pub u_mem: Vec<f64>,
}

impl LayerState {
    pub fn zeros(n: usize) -> Self {
        Self { i_syn: vec![0.0; n], u_mem: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.u_mem.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_mem.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.i_syn.iter().chain(&self.u_mem).all(|v| v.is_finite())
    }
}

/// Binary spike indicators for one grid step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeFrame {
    pub t_index: usize,
    pub fired: Vec<bool>,
}

impl SpikeFrame {
    pub fn silent(t_index: usize, n: usize) -> Self {
        Self { t_index, fired: vec![false; n] }
    }

    pub fn from_active(t_index: usize, n: usize, active: &[u32]) -> Self {
        let mut fired = vec![false; n];
        for &a in active {
            fired[a as usize] = true;
        }
        Self { t_index, fired }
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.fired.iter().enumerate().filter_map(|(i, &f)| f.then_some(i))
    }

    pub fn count(&self) -> usize {
        self.fired.iter().filter(|&&f| f).count()
    }
}

/// What drives a layer for one step.
#[derive(Debug, Clone, Copy)]
pub enum LayerInput<'a> {
    /// Spike indicators, summed through the weights.
    Spikes(&'a SpikeFrame),
    /// Indices of the inputs that fired, ascending.
    Active(&'a [u32]),
    /// A continuous-valued input vector.
    Currents(&'a [f64]),
}

impl LayerInput<'_> {
    fn len_hint(&self) -> Option<usize> {
        match self {
            LayerInput::Spikes(f) => Some(f.fired.len()),
            LayerInput::Active(_) => None,
            LayerInput::Currents(c) => Some(c.len()),
        }
    }
}

/// A synapse population and its postsynaptic neurons with decay factors
/// resolved for a fixed time step.
#[derive(Debug, Clone)]
pub struct Layer {
    syn: SynapseParams,
    neu: NeuronParams,
    alpha: f64,
    beta: Vec<f64>,
}

impl Layer {
    pub fn new(syn: SynapseParams, neu: NeuronParams, dt_ms: f64) -> Result<Self> {
        syn.validate()?;
        neu.validate()?;
        if syn.weights.n_out() != neu.len() {
            return Err(Error::Shape(format!(
                "synapses drive {} neurons but {} are defined",
                syn.weights.n_out(),
                neu.len()
            )));
        }
        let alpha = match syn.tau_syn_ms {
            Some(tau) => decay_factor(tau, dt_ms)?,
            None => 0.0,
        };
        let beta = neu
            .tau_m_ms
            .iter()
            .map(|&tau| decay_factor(tau, dt_ms))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { syn, neu, alpha, beta })
    }

    pub fn n_in(&self) -> usize {
        self.syn.weights.n_in()
    }

    pub fn n_out(&self) -> usize {
        self.neu.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn synapses(&self) -> &SynapseParams {
        &self.syn
    }

    pub fn neurons(&self) -> &NeuronParams {
        &self.neu
    }

    pub fn is_spiking(&self) -> bool {
        self.neu.threshold.is_some()
    }

    fn check(&self, state: &LayerState, input: &LayerInput<'_>) -> Result<()> {
        if state.i_syn.len() != self.n_out() || state.u_mem.len() != self.n_out() {
            return Err(Error::Shape(format!(
                "state holds {} neurons, layer has {}",
                state.len(),
                self.n_out()
            )));
        }
        if let Some(n) = input.len_hint() {
            if n != self.n_in() {
                return Err(Error::Shape(format!(
                    "input has {n} channels, layer expects {}",
                    self.n_in()
                )));
            }
        }
        if let LayerInput::Active(a) = input {
            if a.iter().any(|&j| j as usize >= self.n_in()) {
                return Err(Error::Shape(format!("active input index beyond {}", self.n_in())));
            }
        }
        Ok(())
    }

    /// Synaptic and membrane integration shared by both neuron kinds.
    fn integrate(&self, state: &mut LayerState, input: LayerInput<'_>) {
        let n_out = self.n_out();
        for k in 0..n_out {
            let mut drive = self.syn.bias[k];
            match (&self.syn.weights, input) {
                (Weights::Dense(w), LayerInput::Spikes(frame)) => {
                    let row = w.row(k);
                    for j in frame.active() {
                        drive += row[j];
                    }
                }
                (Weights::Dense(w), LayerInput::Active(active)) => {
                    let row = w.row(k);
                    for &j in active {
                        drive += row[j as usize];
                    }
                }
                (Weights::Dense(w), LayerInput::Currents(x)) => {
                    for (wj, xj) in w.row(k).iter().zip(x) {
                        drive += wj * xj;
                    }
                }
                (Weights::Diagonal(d), LayerInput::Spikes(frame)) => {
                    if frame.fired[k] {
                        drive += d[k];
                    }
                }
                (Weights::Diagonal(d), LayerInput::Active(active)) => {
                    if active.binary_search(&(k as u32)).is_ok() {
                        drive += d[k];
                    }
                }
                (Weights::Diagonal(d), LayerInput::Currents(x)) => {
                    drive += d[k] * x[k];
                }
            }
            state.i_syn[k] = self.alpha * state.i_syn[k] + drive;
            state.u_mem[k] = self.beta[k] * state.u_mem[k] + state.i_syn[k];
        }
    }

    /// Leaky-integrator step; returns the updated membrane potentials.
    pub fn li_step(&self, state: &mut LayerState, input: LayerInput<'_>) -> Result<Vec<f64>> {
        self.check(state, &input)?;
        self.integrate(state, input);
        Ok(state.u_mem.clone())
    }

    /// Integrate-and-fire step. Integration happens first, then each
    /// membrane at or above threshold fires and is reset.
    pub fn lif_step(
        &self,
        state: &mut LayerState,
        input: LayerInput<'_>,
        t_index: usize,
    ) -> Result<SpikeFrame> {
        let threshold = self
            .neu
            .threshold
            .as_ref()
            .ok_or_else(|| Error::Parameter("LIF step requires a threshold".into()))?;
        self.check(state, &input)?;
        self.integrate(state, input);
        let mut fired = vec![false; self.n_out()];
        for k in 0..self.n_out() {
            if state.u_mem[k] >= threshold[k] {
                fired[k] = true;
                match self.neu.reset {
                    ResetMode::ToZero => state.u_mem[k] = 0.0,
                    ResetMode::Subtract => state.u_mem[k] -= threshold[k],
                }
            }
        }
        Ok(SpikeFrame { t_index, fired })
    }
}

/// One-shot LI step on value state.
pub fn li_step(
    state: &LayerState,
    input: &SpikeFrame,
    syn: &SynapseParams,
    neu: &NeuronParams,
    dt_ms: f64,
) -> Result<(LayerState, Vec<f64>)> {
    let layer = Layer::new(syn.clone(), neu.clone(), dt_ms)?;
    let mut next = state.clone();
    let out = layer.li_step(&mut next, LayerInput::Spikes(input))?;
    Ok((next, out))
}

/// One-shot LIF step on value state.
pub fn lif_step(
    state: &LayerState,
    input: &SpikeFrame,
    syn: &SynapseParams,
    neu: &NeuronParams,
    dt_ms: f64,
) -> Result<(LayerState, SpikeFrame)> {
    let layer = Layer::new(syn.clone(), neu.clone(), dt_ms)?;
    let mut next = state.clone();
    let out = layer.lif_step(&mut next, LayerInput::Spikes(input), input.t_index)?;
    Ok((next, out))
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamOutput {
    Potentials(Vec<Vec<f64>>),
    Spikes(Vec<SpikeFrame>),
}

impl StreamOutput {
    pub fn len(&self) -> usize {
        match self {
            StreamOutput::Potentials(p) => p.len(),
            StreamOutput::Spikes(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Folds the layer over consecutive frames starting from `initial`.
/// Returns every step's output plus the state to continue from.
pub fn stream_layer(
    frames: &[SpikeFrame],
    layer: &Layer,
    initial: LayerState,
) -> Result<(StreamOutput, LayerState)> {
    for pair in frames.windows(2) {
        if pair[1].t_index != pair[0].t_index + 1 {
            return Err(Error::Sequencing(format!(
                "frame {} follows frame {}",
                pair[1].t_index, pair[0].t_index
            )));
        }
    }
    let mut state = initial;
    if layer.is_spiking() {
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            out.push(layer.lif_step(&mut state, LayerInput::Spikes(f), f.t_index)?);
        }
        Ok((StreamOutput::Spikes(out), state))
    } else {
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            out.push(layer.li_step(&mut state, LayerInput::Spikes(f))?);
        }
        Ok((StreamOutput::Potentials(out), state))
    }
}
