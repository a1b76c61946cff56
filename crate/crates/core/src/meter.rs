//! Per-neuron activation metering for gated MLP layers.
//!
//! A neuron's contribution to the block output is
//! `n_j(x) = act(w_in_j . x) * (v_in_j . x) * w_out_col_j`; its activation
//! magnitude is the Euclidean norm of that vector. The truncation-error
//! ratio (`cett`) measures the relative error of dropping every neuron whose
//! magnitude falls below a cut level.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, ModelWeights};
use crate::par;

/// How per-token magnitudes are combined over a prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    PerToken,
    MeanOverPrefix,
    MaxOverPrefix,
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Aggregation::PerToken => "per_token",
            Aggregation::MeanOverPrefix => "mean_over_prefix",
            Aggregation::MaxOverPrefix => "max_over_prefix",
        };
        f.write_str(s)
    }
}

/// Aggregated per-neuron activation magnitudes for one layer.
#[derive(Debug, Clone)]
pub struct NeuronMagnitudes {
    pub layer: usize,
    /// Length `d_h`, all finite and non-negative.
    pub values: Vec<f32>,
    pub aggregation: Aggregation,
    /// Token range `[start, end)` the values were aggregated over.
    pub source_positions: (usize, usize),
}

/// Truncation-error report for one input at one cut level.
#[derive(Debug, Clone)]
pub struct CettReport {
    pub layer: usize,
    pub epsilon: f32,
    /// `|sum of cut contributions| / |MLP output|`, non-negative.
    pub cett: f64,
    pub cut_set_size: usize,
    /// `|MLP output|`, the ratio's denominator.
    pub denominator: f64,
}

/// Mean truncation error over a token sample.
#[derive(Debug, Clone)]
pub struct MeanCett {
    pub mean: f64,
    pub tokens_used: usize,
    /// Tokens excluded because the MLP output norm was numerically zero.
    pub tokens_skipped: usize,
}

/// Denominators below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

fn check_layer_and_state(model: &ModelWeights, layer: usize, x: &[f32]) -> Result<()> {
    if layer >= model.dims.n_layers {
        return Err(Error::Index(format!(
            "layer {layer} out of range (n_layers = {})",
            model.dims.n_layers
        )));
    }
    if x.len() != model.dims.d_model {
        return Err(Error::Dimension(format!(
            "hidden state length {} != d_model {}",
            x.len(),
            model.dims.d_model
        )));
    }
    Ok(())
}

/// Gate coefficient `act(w_in_j . x) * (v_in_j . x)` for one neuron.
fn gate_coeff(model: &ModelWeights, layer: usize, x: &[f32], j: usize) -> f32 {
    let dm = model.dims.d_model;
    let lw = &model.layers[layer];
    let a = dot(&lw.w_in[j * dm..(j + 1) * dm], x);
    let b = dot(&lw.v_in[j * dm..(j + 1) * dm], x);
    model.activation.apply(a) * b
}

/// The `d_model`-dimensional output contribution of neuron `j` on input `x`.
pub fn neuron_contribution(
    model: &ModelWeights,
    layer: usize,
    x: &[f32],
    j: usize,
) -> Result<Vec<f32>> {
    check_layer_and_state(model, layer, x)?;
    let dm = model.dims.d_model;
    if j >= model.dims.d_h {
        return Err(Error::Index(format!(
            "neuron {j} out of range (d_h = {})",
            model.dims.d_h
        )));
    }
    let coeff = gate_coeff(model, layer, x, j);
    let lw = &model.layers[layer];
    Ok(lw.w_out_t[j * dm..(j + 1) * dm]
        .iter()
        .map(|&w| coeff * w)
        .collect())
}

/// Per-token activation magnitudes of every neuron in one layer.
pub fn per_token_magnitudes(model: &ModelWeights, layer: usize, x: &[f32]) -> Result<Vec<f32>> {
    check_layer_and_state(model, layer, x)?;
    let lw = &model.layers[layer];
    Ok((0..model.dims.d_h)
        .map(|j| {
            let coeff = gate_coeff(model, layer, x, j) as f64;
            (coeff.abs() * lw.w_out_col_norms[j]) as f32
        })
        .collect())
}

/// Aggregate per-token magnitudes over a run of hidden states.
///
/// `PerToken` expects exactly one state; the prefix modes reduce across all
/// of them. `start_pos` only labels the `source_positions` range.
pub fn magnitudes(
    model: &ModelWeights,
    layer: usize,
    states: &[&[f32]],
    aggregation: Aggregation,
    start_pos: usize,
) -> Result<NeuronMagnitudes> {
    if states.is_empty() {
        return Err(Error::EmptyInput("magnitudes over empty prefix".into()));
    }
    if aggregation == Aggregation::PerToken && states.len() != 1 {
        return Err(Error::Dimension(format!(
            "per_token aggregation expects a single state, got {}",
            states.len()
        )));
    }
    let dh = model.dims.d_h;
    let per_token = par::map_indexed(states.len(), |i| {
        per_token_magnitudes(model, layer, states[i])
    });
    let mut values = vec![0.0f32; dh];
    match aggregation {
        Aggregation::PerToken => values = per_token.into_iter().next().unwrap()?,
        Aggregation::MaxOverPrefix => {
            for row in per_token {
                for (v, a) in values.iter_mut().zip(row?) {
                    if a > *v {
                        *v = a;
                    }
                }
            }
        }
        Aggregation::MeanOverPrefix => {
            let mut sums = vec![0.0f64; dh];
            let n = states.len() as f64;
            for row in per_token {
                for (s, a) in sums.iter_mut().zip(row?) {
                    *s += a as f64;
                }
            }
            for (v, s) in values.iter_mut().zip(sums) {
                *v = (s / n) as f32;
            }
        }
    }
    Ok(NeuronMagnitudes {
        layer,
        values,
        aggregation,
        source_positions: (start_pos, start_pos + states.len()),
    })
}

/// Truncation-error ratio on one input: cut every neuron with magnitude
/// strictly below `epsilon`, then compare the cut mass against the full
/// block output.
pub fn cett(model: &ModelWeights, layer: usize, x: &[f32], epsilon: f32) -> Result<CettReport> {
    check_layer_and_state(model, layer, x)?;
    if epsilon < 0.0 {
        return Err(Error::Dimension("epsilon must be >= 0".into()));
    }
    let dm = model.dims.d_model;
    let dh = model.dims.d_h;
    let lw = &model.layers[layer];
    let mut cut_sum = vec![0.0f64; dm];
    let mut full_sum = vec![0.0f64; dm];
    let mut cut_set_size = 0usize;
    for j in 0..dh {
        let coeff = gate_coeff(model, layer, x, j);
        let a_j = ((coeff as f64).abs() * lw.w_out_col_norms[j]) as f32;
        let row = &lw.w_out_t[j * dm..(j + 1) * dm];
        let in_cut = a_j < epsilon;
        if in_cut {
            cut_set_size += 1;
        }
        for (i, &w) in row.iter().enumerate() {
            let c = (coeff * w) as f64;
            full_sum[i] += c;
            if in_cut {
                cut_sum[i] += c;
            }
        }
    }
    let denominator = full_sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denominator < DEGENERATE_NORM {
        return Err(Error::DegenerateDenominator(format!(
            "MLP output norm {denominator:.3e} at layer {layer}"
        )));
    }
    let numerator = cut_sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(CettReport {
        layer,
        epsilon,
        cett: numerator / denominator,
        cut_set_size,
        denominator,
    })
}

/// Mean truncation error over a sample of hidden states. Degenerate tokens
/// are skipped and counted; if nothing remains it is an error.
pub fn mean_cett(
    model: &ModelWeights,
    layer: usize,
    states: &[&[f32]],
    epsilon: f32,
) -> Result<MeanCett> {
    if states.is_empty() {
        return Err(Error::EmptyInput("mean_cett over empty sample".into()));
    }
    let reports = par::map_indexed(states.len(), |i| cett(model, layer, states[i], epsilon));
    let mut sum = 0.0f64;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for r in reports {
        match r {
            Ok(rep) => {
                sum += rep.cett;
                used += 1;
            }
            Err(Error::DegenerateDenominator(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::InsufficientData(
            "every token in the sample had a degenerate MLP output".into(),
        ));
    }
    Ok(MeanCett {
        mean: sum / used as f64,
        tokens_used: used,
        tokens_skipped: skipped,
    })
}

/// Threshold magnitudes into a keep-mask (`A_j >= tau` stays active; ties
/// at exactly `tau` are kept). Returns the mask and its sparsity.
pub fn build_mask(mags: &NeuronMagnitudes, tau: f32) -> (Vec<bool>, f64) {
    let mask: Vec<bool> = mags.values.iter().map(|&a| a >= tau).collect();
    let active = mask.iter().filter(|&&m| m).count();
    let sparsity = 1.0 - active as f64 / mask.len().max(1) as f64;
    (mask, sparsity)
}

/// Dump magnitude vectors as CSV: `layer,neuron,value,aggregation`.
pub fn write_magnitudes_csv(mags: &[NeuronMagnitudes], path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(w, "layer,neuron,value,aggregation")?;
    for m in mags {
        for (j, v) in m.values.iter().enumerate() {
            writeln!(w, "{},{},{},{}", m.layer, j, v, m.aggregation)?;
        }
    }
    w.flush()?;
    Ok(())
}
