//! Surrogate-gradient backpropagation through time with Adam.
//!
//! The forward pass here replays the decoder's arithmetic operation for
//! operation, so a hard-threshold forward over a window reproduces
//! `predict_stream` bit for bit. The backward pass is written out by hand.

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoders::{predict_stream, DecoderKind, DecoderModel, DecoderState, OneToOneStage};
use crate::dynamics::{decay_factor, tau_from_decay, ResetMode, Weights};
use crate::error::{Error, Result};
use crate::signals::{ForceTrajectory, SpikeTrainSet, N_FINGERS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Falls back to the decoder kind's default when absent.
    pub learning_rate: Option<f64>,
    pub window_s: f64,
    pub window_overlap: f64,
    pub surrogate_slope: f64,
    /// Shuffle the task order of each repetition before segmentation.
    pub shuffle_tasks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: None,
            window_s: 10.0,
            window_overlap: 0.5,
            surrogate_slope: 25.0,
            shuffle_tasks: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("learning rate {lr} must be positive")));
            }
        }
        if !(self.window_s > 0.0) || !(0.0..1.0).contains(&self.window_overlap) {
            return Err(Error::Config("window must be positive with overlap in [0, 1)".into()));
        }
        if !(self.surrogate_slope > 0.0) {
            return Err(Error::Config("surrogate slope must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate_for(&self, kind: DecoderKind) -> f64 {
        self.learning_rate.unwrap_or(default_learning_rate(kind))
    }
}

pub fn default_learning_rate(kind: DecoderKind) -> f64 {
    match kind {
        DecoderKind::Li => 0.01,
        DecoderKind::Lif => 0.001,
    }
}

/// Derivative of the fast-sigmoid surrogate at distance `v` from threshold.
pub fn surrogate_spike_grad(v: f64, slope: f64) -> f64 {
    let d = 1.0 + slope * v.abs();
    slope / (d * d)
}

/// How the spike nonlinearity behaves in forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpikeFn {
    /// Heaviside forward, fast-sigmoid surrogate backward.
    Hard { slope: f64 },
    /// Smooth fast-sigmoid forward `0.5·(1 + k·v/(1 + k|v|))` with its
    /// exact derivative backward; used to check gradients numerically.
    Smooth { slope: f64 },
}

impl SpikeFn {
    fn derivative(self, v: f64) -> f64 {
        match self {
            SpikeFn::Hard { slope } => surrogate_spike_grad(v, slope),
            SpikeFn::Smooth { slope } => 0.5 * surrogate_spike_grad(v, slope),
        }
    }
}

/// Window of training data: active inputs per step and the target force.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub active: Vec<Vec<u32>>,
    pub target: Vec<[f64; N_FINGERS]>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

/// Concatenates the trials in `order` and cuts overlapping windows of
/// `window_steps` every `hop_steps`. Trials shorter than one window are
/// skipped with a warning.
pub fn segment_windows(
    trials: &[(&SpikeTrainSet, &ForceTrajectory)],
    order: &[usize],
    window_steps: usize,
    hop_steps: usize,
) -> Result<Vec<Segment>> {
    if window_steps == 0 || hop_steps == 0 {
        return Err(Error::Parameter("window and hop must be at least one step".into()));
    }
    let mut spikes = Vec::new();
    let mut forces = Vec::new();
    for &i in order {
        let (s, f) = trials.get(i).ok_or_else(|| Error::Parameter(format!("no trial {i}")))?;
        if s.n_steps() != f.len() {
            return Err(Error::Shape("spikes and force differ in length".into()));
        }
        if s.n_steps() < window_steps {
            warn!("skipping a {}-step trial shorter than the {window_steps}-step window", s.n_steps());
            continue;
        }
        spikes.push(*s);
        forces.push(*f);
    }
    if spikes.is_empty() {
        return Ok(Vec::new());
    }
    let spikes = SpikeTrainSet::concat(&spikes)?;
    let force = ForceTrajectory::concat(&forces)?;
    let steps = spikes.step_lists();
    let n = steps.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start + window_steps <= n {
        out.push(Segment {
            active: steps[start..start + window_steps].to_vec(),
            target: force.rows()[start..start + window_steps].to_vec(),
        });
        start += hop_steps;
    }
    Ok(out)
}

/// Window and hop of a training config in grid steps.
pub fn window_steps(cfg: &TrainConfig, dt_ms: f64) -> Result<(usize, usize)> {
    let w = (cfg.window_s * 1000.0 / dt_ms).round() as usize;
    let h = (w as f64 * (1.0 - cfg.window_overlap)).round() as usize;
    if w == 0 || h == 0 {
        return Err(Error::Config("training window shorter than one step".into()));
    }
    Ok((w, h))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
struct Stage {
    alpha: f64,
    beta: Vec<f64>,
    gain: Vec<f64>,
    bias: Vec<f64>,
}

impl Stage {
    fn new(s: &OneToOneStage, dt_ms: f64) -> Result<Self> {
        let gain = match &s.synapse.weights {
            Weights::Diagonal(d) => d.clone(),
            Weights::Dense(_) => return Err(Error::Shape("cascade stages must be one-to-one".into())),
        };
        Ok(Self {
            alpha: s.synapse.tau_syn_ms.map(|t| decay_factor(t, dt_ms)).transpose()?.unwrap_or(0.0),
            beta: s.neurons.tau_m_ms.iter().map(|&t| decay_factor(t, dt_ms)).collect::<Result<_>>()?,
            gain,
            bias: s.synapse.bias.clone(),
        })
    }
}

/// Decoder parameters with decay factors resolved, in the layout the
/// gradient code works on.
#[derive(Debug, Clone)]
pub struct Net {
    n_in: usize,
    n_out: usize,
    w: Vec<f64>,
    b: Vec<f64>,
    alpha: f64,
    beta: Vec<f64>,
    threshold: Option<Vec<f64>>,
    reset: ResetMode,
    conv: Option<Stage>,
    smooth: Option<Stage>,
    gamma: f64,
}

/// Per-step records of a forward pass.
struct Trace {
    v: Vec<f64>,
    s: Vec<f64>,
    u: Vec<f64>,
    y: Vec<f64>,
}

impl Net {
    /// Decay factors computed exactly as the streaming decoder does.
    pub fn from_model(model: &DecoderModel) -> Result<Self> {
        model.validate()?;
        let dt = model.dt_ms;
        Ok(Self {
            n_in: model.input_dim,
            n_out: model.output_dim,
            w: model.dense_weights().as_slice().to_vec(),
            b: model.dense.bias.clone(),
            alpha: model.dense.tau_syn_ms.map(|t| decay_factor(t, dt)).transpose()?.unwrap_or(0.0),
            beta: model.readout.tau_m_ms.iter().map(|&t| decay_factor(t, dt)).collect::<Result<_>>()?,
            threshold: model.readout.threshold.clone(),
            reset: model.readout.reset,
            conv: model.conv.as_ref().map(|s| Stage::new(s, dt)).transpose()?,
            smooth: model.smooth.as_ref().map(|s| Stage::new(s, dt)).transpose()?,
            gamma: decay_factor(model.output_tau_ms, dt)?,
        })
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + 2 * self.n_out
    }

    /// Flat trainable view: weights (row-major), biases, then the logit of
    /// each readout decay factor.
    pub fn flat(&self) -> Vec<f64> {
        let mut p = self.w.clone();
        p.extend_from_slice(&self.b);
        p.extend(self.beta.iter().map(|&b| logit(b)));
        p
    }

    /// Loads a flat vector; decay factors become `sigmoid(ρ)`.
    pub fn set_flat(&mut self, p: &[f64]) {
        let nw = self.w.len();
        self.w.copy_from_slice(&p[..nw]);
        self.b.copy_from_slice(&p[nw..nw + self.n_out]);
        for (b, &r) in self.beta.iter_mut().zip(&p[nw + self.n_out..]) {
            *b = sigmoid(r);
        }
    }

    fn forward(&self, seg: &Segment, spike: SpikeFn) -> Result<Trace> {
        let (n, t_len) = (self.n_out, seg.len());
        if seg.active.len() != t_len {
            return Err(Error::Shape("segment inputs and targets differ in length".into()));
        }
        let mut tr = Trace {
            v: vec![0.0; t_len * n],
            s: vec![0.0; t_len * n],
            u: vec![0.0; t_len * n],
            y: vec![0.0; t_len * n],
        };
        let mut i_syn = vec![0.0; n];
        let mut u = vec![0.0; n];
        let mut ic = vec![0.0; n];
        let mut uc = vec![0.0; n];
        let mut is = vec![0.0; n];
        let mut us = vec![0.0; n];
        let mut y = vec![0.0; n];
        for (t, active) in seg.active.iter().enumerate() {
            if let Some(&j) = active.iter().find(|&&j| j as usize >= self.n_in) {
                return Err(Error::Shape(format!("input {j} beyond {}", self.n_in)));
            }
            let o = t * n;
            for k in 0..n {
                let row = &self.w[k * self.n_in..(k + 1) * self.n_in];
                let mut drive = self.b[k];
                for &j in active {
                    drive += row[j as usize];
                }
                i_syn[k] = self.alpha * i_syn[k] + drive;
                let v = self.beta[k] * u[k] + i_syn[k];
                tr.v[o + k] = v;
                let z = match (&self.threshold, &self.conv, &self.smooth) {
                    (Some(th), Some(cv), Some(sm)) => {
                        let s = match spike {
                            SpikeFn::Hard { .. } => {
                                if v >= th[k] {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            SpikeFn::Smooth { slope } => {
                                let x = v - th[k];
                                0.5 * (1.0 + slope * x / (1.0 + slope * x.abs()))
                            }
                        };
                        u[k] = match (spike, self.reset) {
                            (SpikeFn::Hard { .. }, ResetMode::ToZero) => {
                                if s > 0.0 {
                                    0.0
                                } else {
                                    v
                                }
                            }
                            (SpikeFn::Hard { .. }, ResetMode::Subtract) => {
                                if s > 0.0 {
                                    v - th[k]
                                } else {
                                    v
                                }
                            }
                            (SpikeFn::Smooth { .. }, ResetMode::ToZero) => v * (1.0 - s),
                            (SpikeFn::Smooth { .. }, ResetMode::Subtract) => v - th[k] * s,
                        };
                        tr.s[o + k] = s;
                        let drive_c = match spike {
                            SpikeFn::Hard { .. } => {
                                if s > 0.0 {
                                    cv.bias[k] + cv.gain[k]
                                } else {
                                    cv.bias[k]
                                }
                            }
                            SpikeFn::Smooth { .. } => cv.bias[k] + cv.gain[k] * s,
                        };
                        ic[k] = cv.alpha * ic[k] + drive_c;
                        uc[k] = cv.beta[k] * uc[k] + ic[k];
                        let drive_s = sm.bias[k] + sm.gain[k] * uc[k];
                        is[k] = sm.alpha * is[k] + drive_s;
                        us[k] = sm.beta[k] * us[k] + is[k];
                        us[k]
                    }
                    _ => {
                        u[k] = v;
                        v
                    }
                };
                tr.u[o + k] = u[k];
                y[k] = self.gamma * y[k] + (1.0 - self.gamma) * z;
                tr.y[o + k] = y[k];
            }
        }
        Ok(tr)
    }

    /// Mean squared error over all steps and fingers of one window.
    pub fn loss(&self, seg: &Segment, spike: SpikeFn) -> Result<f64> {
        let tr = self.forward(seg, spike)?;
        Ok(mse(&tr.y, &seg.target, self.n_out))
    }

    /// Loss and its gradient with respect to `flat()`.
    pub fn loss_and_grad(&self, seg: &Segment, spike: SpikeFn) -> Result<(f64, Vec<f64>)> {
        let tr = self.forward(seg, spike)?;
        let n = self.n_out;
        let t_len = seg.len();
        let loss = mse(&tr.y, &seg.target, n);
        let scale = 2.0 / (t_len * n) as f64;
        let spiking = self.threshold.is_some();

        let mut gw = vec![0.0; self.w.len()];
        let mut gb = vec![0.0; n];
        let mut gbeta = vec![0.0; n];
        // Gradients carried backward from step t+1.
        let mut gy = vec![0.0; n];
        let mut gv_next = vec![0.0; n];
        let mut gi_next = vec![0.0; n];
        let mut guc_next = vec![0.0; n];
        let mut gic_next = vec![0.0; n];
        let mut gus_next = vec![0.0; n];
        let mut gis_next = vec![0.0; n];

        for t in (0..t_len).rev() {
            let o = t * n;
            for k in 0..n {
                let d = scale * (tr.y[o + k] - seg.target[t][k]);
                gy[k] = d + self.gamma * gy[k];
                let gz = (1.0 - self.gamma) * gy[k];
                let gv = if spiking {
                    let (cv, sm) = (self.conv.as_ref().expect("lif"), self.smooth.as_ref().expect("lif"));
                    let th = self.threshold.as_ref().expect("lif")[k];
                    let gus = gz + sm.beta[k] * gus_next[k];
                    let gis = gus + sm.alpha * gis_next[k];
                    let guc = sm.gain[k] * gis + cv.beta[k] * guc_next[k];
                    let gic = guc + cv.alpha * gic_next[k];
                    let gs = cv.gain[k] * gic;
                    gus_next[k] = gus;
                    gis_next[k] = gis;
                    guc_next[k] = guc;
                    gic_next[k] = gic;

                    let gu = self.beta[k] * gv_next[k];
                    let v = tr.v[o + k];
                    let ds = spike.derivative(v - th);
                    match self.reset {
                        ResetMode::ToZero => gu * (1.0 - tr.s[o + k]) + (gs - gu * v) * ds,
                        ResetMode::Subtract => gu + (gs - th * gu) * ds,
                    }
                } else {
                    gz + self.beta[k] * gv_next[k]
                };
                gv_next[k] = gv;
                let gi = gv + self.alpha * gi_next[k];
                gi_next[k] = gi;
                gb[k] += gi;
                if t > 0 {
                    gbeta[k] += gv * tr.u[o - n + k];
                }
                let row = &mut gw[k * self.n_in..(k + 1) * self.n_in];
                for &j in &seg.active[t] {
                    row[j as usize] += gi;
                }
            }
        }
        let mut g = gw;
        g.extend_from_slice(&gb);
        g.extend(gbeta.iter().zip(&self.beta).map(|(gb, b)| gb * b * (1.0 - b)));
        Ok((loss, g))
    }

    /// Hard-threshold outputs of a window from zero state.
    pub fn outputs(&self, seg: &Segment) -> Result<Vec<[f64; N_FINGERS]>> {
        if self.n_out != N_FINGERS {
            return Err(Error::Shape("window outputs need a five-output decoder".into()));
        }
        let tr = self.forward(seg, SpikeFn::Hard { slope: 1.0 })?;
        Ok(tr.y.chunks(N_FINGERS).map(|c| c.try_into().expect("five outputs")).collect())
    }
}

fn mse(y: &[f64], target: &[[f64; N_FINGERS]], n: usize) -> f64 {
    let mut acc = 0.0;
    for (t, row) in target.iter().enumerate() {
        for k in 0..n {
            let e = y[t * n + k] - row[k];
            acc += e * e;
        }
    }
    acc / y.len() as f64
}

/// Flat trainability mask matching `Net::flat`.
pub fn flat_mask(model: &DecoderModel) -> Vec<bool> {
    let m = &model.trainable;
    [m.dense_weights.clone(), m.dense_bias.clone(), m.readout_tau.clone()].concat()
}

/// Writes trained flat parameters back into a model; frozen entries are
/// left untouched.
pub fn apply_flat(model: &DecoderModel, flat: &[f64]) -> DecoderModel {
    let mut out = model.clone();
    let mask = flat_mask(model);
    let nw = model.input_dim * model.output_dim;
    let n = model.output_dim;
    {
        let w = out.dense_weights_mut().as_mut_slice();
        for i in 0..nw {
            if mask[i] {
                w[i] = flat[i];
            }
        }
    }
    for k in 0..n {
        if mask[nw + k] {
            out.dense.bias[k] = flat[nw + k];
        }
        if mask[nw + n + k] {
            out.readout.tau_m_ms[k] = tau_from_decay(sigmoid(flat[nw + n + k]), model.dt_ms);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected update of the entries where `mask` is set.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], mask: &[bool], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: DecoderModel,
    /// Mean window loss of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Task order for one repetition: shuffled unless disabled.
pub fn task_order<R: Rng + ?Sized>(n: usize, shuffle: bool, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
}

/// Trains on prepared windows. Window order is reshuffled every epoch;
/// per-window gradients are computed in parallel and summed in window
/// order, so results do not depend on the thread count.
pub fn train<R: Rng + ?Sized>(
    model: &DecoderModel,
    windows: &[Segment],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let spike = SpikeFn::Hard { slope: cfg.surrogate_slope };
    let lr = cfg.learning_rate_for(model.kind);
    let mut net = Net::from_model(model)?;
    let mask = flat_mask(model);
    let mut params = net.flat();
    let mut adam = AdamState::new(params.len());
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            net.set_flat(&params);
            let results: Vec<Result<(f64, Vec<f64>)>> =
                batch.par_iter().map(|&w| net.loss_and_grad(&windows[w], spike)).collect();
            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!("non-finite loss or gradient in epoch {}", epoch + 1)));
            }
            epoch_loss += batch_loss;
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.update(&mut params, &grad, &mask, lr);
        }
        let mean = epoch_loss / windows.len() as f64;
        debug!("epoch {} loss {mean:.6}", epoch + 1);
        loss_curve.push(mean);
    }
    let trained = apply_flat(model, &params);
    trained.validate()?;
    Ok(TrainOutcome { model: trained, loss_curve })
}

/// Sequential streaming inference over `segment_steps`-long pieces with
/// state carried across them.
pub fn infer(
    model: &DecoderModel,
    spikes: &SpikeTrainSet,
    segment_steps: usize,
    carry: Option<DecoderState>,
) -> Result<(ForceTrajectory, DecoderState)> {
    if segment_steps == 0 {
        return Err(Error::Parameter("segments must be at least one step".into()));
    }
    let mut state = carry;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < spikes.n_steps() || parts.is_empty() {
        let end = (start + segment_steps).min(spikes.n_steps());
        let (p, st) = predict_stream(model, &spikes.slice(start, end)?, state)?;
        parts.push(p);
        state = Some(st);
        start = end;
        if end == spikes.n_steps() {
            break;
        }
    }
    let traj = ForceTrajectory::concat(&parts.iter().collect::<Vec<_>>())?;
    Ok((traj, state.expect("at least one segment")))
}
