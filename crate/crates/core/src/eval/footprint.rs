//! Static parameter and memory accounting at 4 bytes per stored value.

use serde::Serialize;

use crate::baseline::LinearModel;
use crate::decoders::{latency_ms, DecoderModel};
use crate::encoding::{EncoderConfig, N_CHANNELS, N_ELECTRODES};

pub const BYTES_PER_PARAM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FootprintReport {
    pub label: String,
    pub total_params: usize,
    pub trainable_params: usize,
    /// Bytes of nonzero stored values, one-to-one blocks diagonal only.
    pub parameter_memory: usize,
    /// `4 × total_params`.
    pub parameter_memory_bound: usize,
    /// Bytes of the separation matrix needed upstream of the decoder.
    pub decomposition_memory: usize,
    pub latency_ms: f64,
    /// Total when one-to-one blocks are counted as full square matrices;
    /// only differs from `total_params` for the encoding path.
    pub full_matrix_total: usize,
}

pub fn decomposition_memory(n_units: usize, n_channels: usize, uses_decomposition: bool) -> usize {
    if uses_decomposition {
        n_units * n_channels * BYTES_PER_PARAM
    } else {
        0
    }
}

/// Spike-input decoder fed by decomposed motor units.
pub fn decoder_footprint(model: &DecoderModel, n_channels: usize, uses_decomposition: bool) -> FootprintReport {
    let count = model.count_parameters();
    FootprintReport {
        label: model.kind.name().to_string(),
        total_params: count.total,
        trainable_params: count.trainable,
        parameter_memory: BYTES_PER_PARAM * model.stored_nonzero_parameters(),
        parameter_memory_bound: BYTES_PER_PARAM * count.total,
        decomposition_memory: decomposition_memory(model.input_dim, n_channels, uses_decomposition),
        latency_ms: latency_ms(model),
        full_matrix_total: count.total,
    }
}

/// Every regression coefficient is stored and trainable.
pub fn baseline_footprint(model: &LinearModel, n_channels: usize) -> FootprintReport {
    let n = model.parameter_count();
    FootprintReport {
        label: "baseline".to_string(),
        total_params: n,
        trainable_params: n,
        parameter_memory: BYTES_PER_PARAM * n,
        parameter_memory_bound: BYTES_PER_PARAM * n,
        decomposition_memory: decomposition_memory(model.n_units(), n_channels, true),
        latency_ms: model.latency_ms(),
        full_matrix_total: n,
    }
}

/// Fixed encoder groups: per-channel unit gains, biases and membrane
/// constants, plus one threshold per electrode. Returns `(diagonal, full,
/// stored nonzero)` counts.
pub fn encoder_counts(cfg: &EncoderConfig) -> (usize, usize, usize) {
    let per_channel = N_CHANNELS + N_CHANNELS;
    let diagonal = N_CHANNELS + per_channel + N_ELECTRODES;
    let full = N_CHANNELS * N_CHANNELS + per_channel + N_ELECTRODES;
    // Biases are zero; gains, constants and thresholds are not.
    let nonzero = N_CHANNELS
        + usize::from(cfg.tau_m_ms != 0.0) * N_CHANNELS
        + cfg.thresholds.iter().filter(|t| **t != 0.0).count();
    (diagonal, full, nonzero)
}

/// Encoder plus an LI decoder over the encoded channels; no decomposition.
pub fn encoded_footprint(encoder: &EncoderConfig, decoder: &DecoderModel) -> FootprintReport {
    let (diag, full, nonzero) = encoder_counts(encoder);
    let count = decoder.count_parameters();
    FootprintReport {
        label: format!("encoded-{}", decoder.kind.name()),
        total_params: diag + count.total,
        trainable_params: count.trainable,
        parameter_memory: BYTES_PER_PARAM * (nonzero + decoder.stored_nonzero_parameters()),
        parameter_memory_bound: BYTES_PER_PARAM * (diag + count.total),
        decomposition_memory: 0,
        latency_ms: latency_ms(decoder),
        full_matrix_total: full + count.total,
    }
}
