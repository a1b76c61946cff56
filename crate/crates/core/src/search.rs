//! Offline error-controlled search for per-layer base thresholds.
//!
//! For each layer the search maximizes the cut level subject to the mean
//! truncation-error ratio over a validation sample staying within budget.
//! Mean cett is monotone in the cut level in practice, so bisection (the
//! default) brackets the boundary; a quantile grid is available as a
//! cross-check. Results are packaged into a [`ThresholdPolicy`] JSON file
//! consumed by the generation runtime.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cogload;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::meter::{self, Aggregation};
use crate::model::{forward, ModelWeights, TraceConfig};
use crate::par;

/// How the per-layer threshold is searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    Bisection,
    Grid,
}

/// Whether generation-time indicators compare normalized or raw signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    Normalized,
    Raw,
}

/// Source of the universal cognitive firing thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CognitiveThresholdSpec {
    /// Use these values directly.
    Explicit { tau_s: f64, tau_h: f64 },
    /// Calibrate as pooled quantiles of the sample's normalized signals.
    Quantile { q_s: f64, q_h: f64 },
}

/// Full search configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Mean truncation-error budget per layer.
    pub cett_budget: f64,
    pub method: SearchMethod,
    pub bisection_iters: usize,
    /// Number of quantile candidates for the grid method.
    pub grid_size: usize,
    /// Cap on validation tokens pooled from the corpus.
    pub max_tokens: usize,
    /// Surprisal-indicator scale applied to every layer.
    pub lambda: f64,
    /// Entropy-indicator scale applied to every layer.
    pub gamma: f64,
    pub cognitive: CognitiveThresholdSpec,
    pub aggregation: Aggregation,
    pub signal_mode: SignalMode,
    /// +1 raises thresholds under load, -1 lowers them.
    pub modulation_sign: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            cett_budget: 0.2,
            method: SearchMethod::Bisection,
            bisection_iters: 40,
            grid_size: 64,
            max_tokens: 4096,
            lambda: 0.80,
            gamma: 0.12,
            cognitive: CognitiveThresholdSpec::Quantile { q_s: 0.75, q_h: 0.75 },
            aggregation: Aggregation::MeanOverPrefix,
            signal_mode: SignalMode::Normalized,
            modulation_sign: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cett_budget) {
            return Err(Error::Dimension(format!(
                "cett_budget must be in [0, 1], got {}",
                self.cett_budget
            )));
        }
        if self.bisection_iters == 0 {
            return Err(Error::Dimension("bisection_iters must be >= 1".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::Dimension("grid_size must be >= 2".into()));
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        fnv1a(format!("{self:?}").as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn default_lambda() -> f64 {
    0.80
}

fn default_gamma() -> f64 {
    0.12
}

fn default_tau() -> f64 {
    0.75
}

fn default_sign() -> f64 {
    1.0
}

fn default_aggregation() -> Aggregation {
    Aggregation::MeanOverPrefix
}

fn default_signal_mode() -> SignalMode {
    SignalMode::Normalized
}

/// Per-layer thresholding parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPolicy {
    pub tau_base: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub achieved_cett: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub achieved_sparsity: Option<f64>,
}

/// Provenance recorded alongside a searched policy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    #[serde(default)]
    pub corpus_id: String,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub method: Option<SearchMethod>,
    #[serde(default)]
    pub tokens_used: usize,
}

/// The searched artifact the runtime consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub cett_budget: f64,
    #[serde(default = "default_tau")]
    pub tau_s: f64,
    #[serde(rename = "tau_H", default = "default_tau")]
    pub tau_h: f64,
    pub layers: Vec<LayerPolicy>,
    /// +1 applies the indicator scales as-is; -1 flips them so high load
    /// lowers thresholds instead of raising them.
    #[serde(default = "default_sign")]
    pub modulation_sign: f64,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    #[serde(default = "default_signal_mode")]
    pub signal_mode: SignalMode,
    #[serde(default)]
    pub meta: PolicyMeta,
}

impl ThresholdPolicy {
    /// A do-nothing policy: zero thresholds keep every neuron active.
    pub fn zero(n_layers: usize) -> Self {
        ThresholdPolicy {
            cett_budget: 0.0,
            tau_s: default_tau(),
            tau_h: default_tau(),
            layers: (0..n_layers)
                .map(|_| LayerPolicy {
                    tau_base: 0.0,
                    lambda: default_lambda(),
                    gamma: default_gamma(),
                    achieved_cett: None,
                    achieved_sparsity: None,
                })
                .collect(),
            modulation_sign: 1.0,
            aggregation: Aggregation::MeanOverPrefix,
            signal_mode: SignalMode::Normalized,
            meta: PolicyMeta::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cett_budget) {
            return Err(Error::format("cett_budget", "must be in [0, 1]"));
        }
        if self.layers.is_empty() {
            return Err(Error::format("layers", "must not be empty"));
        }
        for (l, lp) in self.layers.iter().enumerate() {
            if !lp.tau_base.is_finite() || lp.tau_base < 0.0 {
                return Err(Error::format(
                    format!("layers[{l}].tau_base"),
                    "must be finite and >= 0",
                ));
            }
            if let Some(c) = lp.achieved_cett {
                if c > self.cett_budget + 1e-3 {
                    return Err(Error::format(
                        format!("layers[{l}].achieved_cett"),
                        format!("{c} exceeds budget {}", self.cett_budget),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn save_policy(policy: &ThresholdPolicy, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let writer = BufWriter::new(file);
    serde_json::to_writer_pretty(writer, policy)?;
    Ok(())
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<ThresholdPolicy> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let policy: ThresholdPolicy = serde_json::from_reader(reader)
        .map_err(|e| Error::format("policy", e.to_string()))?;
    policy.validate()?;
    Ok(policy)
}

/// Result of a per-layer threshold search.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub tau_base: f64,
    /// Mean cett at `tau_base` on the sample.
    pub achieved_cett: f64,
    /// Mask sparsity when thresholding the aggregated sample magnitudes.
    pub achieved_sparsity: f64,
    /// Smallest probed level known to violate the budget (`None` when the
    /// budget is vacuous and everything can be cut).
    pub next_step_tau: Option<f64>,
    pub next_step_cett: Option<f64>,
    pub tokens_used: usize,
    pub tokens_skipped: usize,
}

/// Per-token cut-error curve: contributions are prefix-summed in magnitude
/// order, so cett at any level is a single lookup.
struct CettCurve {
    sorted_a: Vec<f32>,
    prefix_norm: Vec<f64>,
    denom: f64,
}

impl CettCurve {
    fn build(model: &ModelWeights, layer: usize, x: &[f32]) -> Option<CettCurve> {
        let dm = model.dims.d_model;
        let dh = model.dims.d_h;
        let lw = &model.layers[layer];
        let mut coeffs = vec![0.0f32; dh];
        let mut mags = vec![0.0f32; dh];
        for j in 0..dh {
            let a = crate::model::dot(&lw.w_in[j * dm..(j + 1) * dm], x);
            let b = crate::model::dot(&lw.v_in[j * dm..(j + 1) * dm], x);
            let c = model.activation.apply(a) * b;
            coeffs[j] = c;
            mags[j] = ((c as f64).abs() * lw.w_out_col_norms[j]) as f32;
        }
        let mut order: Vec<usize> = (0..dh).collect();
        order.sort_by(|&i, &j| mags[i].partial_cmp(&mags[j]).unwrap().then(i.cmp(&j)));
        let mut acc = vec![0.0f64; dm];
        let mut prefix_norm = Vec::with_capacity(dh + 1);
        prefix_norm.push(0.0);
        for &j in &order {
            let c = coeffs[j];
            for (a, &w) in acc.iter_mut().zip(&lw.w_out_t[j * dm..(j + 1) * dm]) {
                *a += (c * w) as f64;
            }
            prefix_norm.push(acc.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        let denom = prefix_norm[dh];
        if denom < meter::DEGENERATE_NORM {
            return None;
        }
        let sorted_a: Vec<f32> = order.iter().map(|&j| mags[j]).collect();
        Some(CettCurve {
            sorted_a,
            prefix_norm,
            denom,
        })
    }

    fn cett(&self, epsilon: f64) -> f64 {
        let cut = self.sorted_a.partition_point(|&a| (a as f64) < epsilon);
        self.prefix_norm[cut] / self.denom
    }

    fn max_a(&self) -> f32 {
        *self.sorted_a.last().unwrap_or(&0.0)
    }
}

fn mean_curve_cett(curves: &[CettCurve], epsilon: f64) -> f64 {
    let sum: f64 = curves.iter().map(|c| c.cett(epsilon)).sum();
    sum / curves.len() as f64
}

/// Search one layer's base threshold over a sample of MLP input states.
pub fn search_layer(
    model: &ModelWeights,
    layer: usize,
    states: &[&[f32]],
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if layer >= model.dims.n_layers {
        return Err(Error::Index(format!("layer {layer} out of range")));
    }
    if states.is_empty() {
        return Err(Error::EmptyInput("threshold search over empty sample".into()));
    }
    let built = par::map_indexed(states.len(), |i| CettCurve::build(model, layer, states[i]));
    let mut curves = Vec::with_capacity(states.len());
    let mut skipped = 0usize;
    for c in built {
        match c {
            Some(c) => curves.push(c),
            None => skipped += 1,
        }
    }
    if curves.is_empty() {
        return Err(Error::InsufficientData(
            "no valid tokens for threshold search".into(),
        ));
    }

    let max_a = curves.iter().map(|c| c.max_a()).fold(0.0f32, f32::max) as f64;
    let above_all = max_a * (1.0 + 1e-6) + f64::MIN_POSITIVE;
    let budget = cfg.cett_budget;

    let (tau, next) = match cfg.method {
        SearchMethod::Bisection => {
            if mean_curve_cett(&curves, above_all) <= budget {
                (above_all, None)
            } else {
                let mut lo = 0.0f64;
                let mut hi = above_all;
                for _ in 0..cfg.bisection_iters {
                    let mid = 0.5 * (lo + hi);
                    if mean_curve_cett(&curves, mid) <= budget {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                (lo, Some(hi))
            }
        }
        SearchMethod::Grid => {
            // quantile ladder over pooled magnitudes, plus an above-max rung
            let mut pooled: Vec<f32> = curves.iter().flat_map(|c| c.sorted_a.iter().copied()).collect();
            pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut candidates: Vec<f64> = (1..=cfg.grid_size)
                .map(|i| {
                    let idx = (i * pooled.len() / cfg.grid_size).saturating_sub(1);
                    pooled[idx] as f64
                })
                .collect();
            candidates.push(above_all);
            candidates.dedup();
            let mut best = 0.0f64;
            let mut next = None;
            for &cand in &candidates {
                if mean_curve_cett(&curves, cand) <= budget {
                    best = best.max(cand);
                } else {
                    next = Some(cand);
                    break;
                }
            }
            (best, next)
        }
    };

    let achieved_cett = mean_curve_cett(&curves, tau);
    let next_step_cett = next.map(|n| mean_curve_cett(&curves, n));

    let mags = meter::magnitudes(model, layer, states, cfg.aggregation, 0)?;
    let (_, achieved_sparsity) = meter::build_mask(&mags, tau as f32);

    Ok(SearchOutcome {
        tau_base: tau,
        achieved_cett,
        achieved_sparsity,
        next_step_tau: next,
        next_step_cett,
        tokens_used: curves.len(),
        tokens_skipped: skipped,
    })
}

/// Pool up to `max_tokens` MLP input states per layer from a corpus.
///
/// Returns one state list per layer plus the sequences (truncated set) that
/// contributed, for signal calibration.
pub fn collect_sample(
    model: &ModelWeights,
    corpus: &Corpus,
    max_tokens: usize,
) -> Result<(Vec<Vec<Vec<f32>>>, Vec<Vec<u32>>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("empty corpus".into()));
    }
    let n_layers = model.dims.n_layers;
    let mut per_layer: Vec<Vec<Vec<f32>>> = vec![Vec::new(); n_layers];
    let mut used_sequences = Vec::new();
    let mut total = 0usize;
    for seq in &corpus.sequences {
        if total >= max_tokens {
            break;
        }
        if seq.tokens.is_empty() {
            continue;
        }
        let take = seq.tokens.len().min(model.dims.max_ctx).min(max_tokens - total);
        let tokens = &seq.tokens[..take];
        let (_, trace) = forward(model, tokens, &TraceConfig::inputs_only())?;
        for l in 0..n_layers {
            for (_, x) in trace.mlp_inputs(l) {
                per_layer[l].push(x.to_vec());
            }
        }
        total += take;
        used_sequences.push(tokens.to_vec());
    }
    if total == 0 {
        return Err(Error::InsufficientData("corpus had no usable tokens".into()));
    }
    Ok((per_layer, used_sequences))
}

/// Run the per-layer search over a corpus sample and assemble the policy.
pub fn search_all(
    model: &ModelWeights,
    corpus: &Corpus,
    corpus_id: &str,
    cfg: &SearchConfig,
) -> Result<ThresholdPolicy> {
    cfg.validate()?;
    let (per_layer_states, sample_sequences) = collect_sample(model, corpus, cfg.max_tokens)?;

    let mut layers = Vec::with_capacity(model.dims.n_layers);
    let mut tokens_used = 0usize;
    for layer in 0..model.dims.n_layers {
        let states: Vec<&[f32]> = per_layer_states[layer].iter().map(|v| v.as_slice()).collect();
        let outcome = search_layer(model, layer, &states, cfg).map_err(|e| match e {
            Error::InsufficientData(msg) => {
                Error::InsufficientData(format!("layer {layer}: {msg}"))
            }
            Error::EmptyInput(msg) => Error::EmptyInput(format!("layer {layer}: {msg}")),
            other => other,
        })?;
        tokens_used = tokens_used.max(outcome.tokens_used);
        layers.push(LayerPolicy {
            tau_base: outcome.tau_base,
            lambda: cfg.lambda,
            gamma: cfg.gamma,
            achieved_cett: Some(outcome.achieved_cett),
            achieved_sparsity: Some(outcome.achieved_sparsity),
        });
    }

    let (tau_s, tau_h) = match cfg.cognitive {
        CognitiveThresholdSpec::Explicit { tau_s, tau_h } => (tau_s, tau_h),
        CognitiveThresholdSpec::Quantile { q_s, q_h } => {
            let signals: Vec<_> = par::map_indexed(sample_sequences.len(), |i| {
                cogload::signal_for_sequence(model, &sample_sequences[i])
            })
            .into_iter()
            .filter_map(|r| r.ok())
            .collect();
            cogload::calibrate_thresholds(&signals, q_s, q_h)?
        }
    };

    let policy = ThresholdPolicy {
        cett_budget: cfg.cett_budget,
        tau_s,
        tau_h,
        layers,
        modulation_sign: cfg.modulation_sign,
        aggregation: cfg.aggregation,
        signal_mode: cfg.signal_mode,
        meta: PolicyMeta {
            corpus_id: corpus_id.to_string(),
            config_hash: format!("{:016x}", cfg.fingerprint()),
            method: Some(cfg.method),
            tokens_used,
        },
    };
    policy.validate()?;
    Ok(policy)
}
