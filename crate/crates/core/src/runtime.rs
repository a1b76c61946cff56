//! Load-aware sparse generation.
//!
//! Prefill measures per-neuron activation magnitudes densely over the
//! prompt; generation then rebuilds per-layer masks each step by comparing
//! those magnitudes against a threshold modulated by the current token's
//! cognitive signals, and runs the masked forward pass for the appended
//! token. Baseline modes (dense, static top-k / top-p, ablation variants)
//! share the same stepping engine so their costs are directly comparable.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::cogload::{self, CognitiveSignal};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::meter::{self, Aggregation, NeuronMagnitudes};
use crate::model::{DecodeState, LayerMasks, MagnitudeAggregator, MlpObserver, ModelWeights};
use crate::par;
use crate::search::{SignalMode, ThresholdPolicy};

/// Generation behavior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RuntimeMode {
    /// Full forward pass every step.
    Dense,
    /// Base thresholds modulated per step by cognitive-load indicators.
    CladaFull,
    /// Base thresholds only; indicators are ignored.
    CladaNoSemantic,
    /// Static top-p(0.5) mass selection whose retained fraction is divided
    /// by the per-step indicator multiplier.
    CladaNoStatistical,
    /// Keep the smallest prefix of neurons (by descending magnitude) whose
    /// cumulative magnitude mass reaches `p` of the total.
    TopP(f64),
    /// Keep the `ceil(f * d_h)` largest-magnitude neurons.
    TopK(f64),
}

impl RuntimeMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RuntimeMode::TopP(p) if !(0.0 < p && p <= 1.0) => Err(Error::Dimension(format!(
                "top-p fraction must be in (0, 1], got {p}"
            ))),
            RuntimeMode::TopK(f) if !(0.0 < f && f <= 1.0) => Err(Error::Dimension(format!(
                "top-k fraction must be in (0, 1], got {f}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let mode = match norm.as_str() {
            "dense" => RuntimeMode::Dense,
            "clada-full" => RuntimeMode::CladaFull,
            "clada-no-semantic" => RuntimeMode::CladaNoSemantic,
            "clada-no-statistical" => RuntimeMode::CladaNoStatistical,
            other => {
                if let Some(v) = other.strip_prefix("top-p:") {
                    RuntimeMode::TopP(
                        v.parse()
                            .map_err(|_| Error::Dimension(format!("bad top-p fraction `{v}`")))?,
                    )
                } else if let Some(v) = other.strip_prefix("top-k:") {
                    RuntimeMode::TopK(
                        v.parse()
                            .map_err(|_| Error::Dimension(format!("bad top-k fraction `{v}`")))?,
                    )
                } else {
                    return Err(Error::Dimension(format!("unknown mode `{s}`")));
                }
            }
        };
        mode.validate()?;
        Ok(mode)
    }
}

impl std::fmt::Display for RuntimeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RuntimeMode::Dense => write!(f, "dense"),
            RuntimeMode::CladaFull => write!(f, "clada-full"),
            RuntimeMode::CladaNoSemantic => write!(f, "clada-no-semantic"),
            RuntimeMode::CladaNoStatistical => write!(f, "clada-no-statistical"),
            RuntimeMode::TopP(p) => write!(f, "top-p:{p}"),
            RuntimeMode::TopK(k) => write!(f, "top-k:{k}"),
        }
    }
}

/// Where per-step mask thresholds read their magnitudes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MagnitudeMode {
    /// Magnitudes stay fixed from the prompt prefill (default).
    #[default]
    PrefillStatic,
    /// Computed neurons refresh their magnitudes from the most recent token;
    /// masked-out neurons keep their last known values.
    Lagged,
}

/// Extra generation knobs beyond the mode itself.
#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub magnitude_mode: MagnitudeMode,
}

/// Summary of one generation run. Decoding is always greedy.
#[derive(Debug, Clone, Serialize)]
pub struct GenerationStats {
    pub tokens_generated: usize,
    pub per_layer_mean_sparsity: Vec<f64>,
    pub mean_sparsity: f64,
    /// Seconds spent in the generation loop (prefill excluded).
    pub wall_time_s: f64,
    pub prefill_time_s: f64,
    pub fires_surprisal: usize,
    pub fires_entropy: usize,
    pub decode_strategy: &'static str,
    /// Scalar multiplies spent inside MLP blocks during the generation loop.
    pub mlp_flops: u64,
}

/// Per-step threshold: the base level scaled by
/// `1 + sign * (lambda * I(s > tau_s) + gamma * I(H > tau_H))`, floored at
/// zero. Indicators use strict comparison.
pub fn final_threshold(policy: &ThresholdPolicy, layer: usize, s: f64, h: f64) -> f64 {
    let lp = &policy.layers[layer];
    let fire_s = if s > policy.tau_s { 1.0 } else { 0.0 };
    let fire_h = if h > policy.tau_h { 1.0 } else { 0.0 };
    let multiplier = 1.0 + policy.modulation_sign * (lp.lambda * fire_s + lp.gamma * fire_h);
    (lp.tau_base * multiplier).max(0.0)
}

/// Static baseline masks over aggregated magnitudes.
///
/// `TopK(f)` keeps the `ceil(f * d_h)` largest values (ties broken toward
/// the lower index). `TopP(p)` keeps the shortest descending-magnitude
/// prefix whose cumulative mass reaches `p` of the total; an all-zero
/// magnitude vector keeps nothing by convention.
pub fn static_mask(mags: &NeuronMagnitudes, mode: RuntimeMode) -> Result<Vec<bool>> {
    mode.validate()?;
    if mags.values.is_empty() {
        return Err(Error::EmptyInput("static_mask over empty magnitudes".into()));
    }
    let d_h = mags.values.len();
    let mut order: Vec<usize> = (0..d_h).collect();
    order.sort_by(|&i, &j| {
        mags.values[j]
            .partial_cmp(&mags.values[i])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut mask = vec![false; d_h];
    match mode {
        RuntimeMode::TopK(f) => {
            let k = (f * d_h as f64).ceil() as usize;
            for &j in order.iter().take(k) {
                mask[j] = true;
            }
        }
        RuntimeMode::TopP(p) => {
            let total: f64 = mags.values.iter().map(|&a| a as f64).sum();
            if total <= 0.0 {
                return Ok(mask);
            }
            let target = p * total;
            let mut cum = 0.0f64;
            for &j in &order {
                mask[j] = true;
                cum += mags.values[j] as f64;
                if cum >= target {
                    break;
                }
            }
        }
        other => {
            return Err(Error::Dimension(format!(
                "static_mask requires a top-p or top-k mode, got {other}"
            )))
        }
    }
    Ok(mask)
}

struct RunningMinMax {
    min: f64,
    max: f64,
}

impl RunningMinMax {
    fn new() -> Self {
        RunningMinMax {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn update(&mut self, v: f64) {
        if v < self.min {
            self.min = v;
        }
        if v > self.max {
            self.max = v;
        }
    }

    fn normalize(&self, v: f64) -> f64 {
        if self.max > self.min {
            (v - self.min) / (self.max - self.min)
        } else {
            0.0
        }
    }
}

/// Result of processing a prompt densely before generation.
pub struct PrefillState {
    /// Aggregated per-layer magnitudes.
    pub magnitudes: Vec<Vec<f32>>,
    /// Keep-masks at the unmodulated base thresholds.
    pub initial_masks: Vec<Vec<bool>>,
    pub initial_sparsity: Vec<f64>,
    pub last_logits: Vec<f32>,
    pub prompt_signal: Option<CognitiveSignal>,
    pub prefill_time_s: f64,
}

/// One generation stream: decode state plus per-step masking machinery.
struct Engine<'m> {
    state: DecodeState<'m>,
    policy: &'m ThresholdPolicy,
    mode: RuntimeMode,
    magnitude_mode: MagnitudeMode,
    d_h: usize,
    /// Per-layer magnitude tables the thresholds read.
    a_tables: Vec<Vec<f32>>,
    /// Neuron indices per layer in descending magnitude order, plus the
    /// cumulative mass in that order (for the top-p family).
    sorted_desc: Vec<Vec<u32>>,
    cum_mass: Vec<Vec<f64>>,
    /// Current step's active sets (rebuilt in place each step).
    current: LayerMasks,
    uses_masks: bool,
    norm_s: RunningMinMax,
    norm_h: RunningMinMax,
    fires_s: usize,
    fires_h: usize,
    steps: usize,
    sparsity_sums: Vec<f64>,
    prefill_time_s: f64,
}

fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as u32
}

fn build_order(a_tables: &[Vec<f32>]) -> (Vec<Vec<u32>>, Vec<Vec<f64>>) {
    let mut sorted_desc = Vec::with_capacity(a_tables.len());
    let mut cum_mass = Vec::with_capacity(a_tables.len());
    for table in a_tables {
        let mut order: Vec<u32> = (0..table.len() as u32).collect();
        order.sort_by(|&i, &j| {
            table[j as usize]
                .partial_cmp(&table[i as usize])
                .unwrap()
                .then(i.cmp(&j))
        });
        let mut cum = Vec::with_capacity(order.len());
        let mut acc = 0.0f64;
        for &j in &order {
            acc += table[j as usize] as f64;
            cum.push(acc);
        }
        sorted_desc.push(order);
        cum_mass.push(cum);
    }
    (sorted_desc, cum_mass)
}

impl<'m> Engine<'m> {
    fn new(
        model: &'m ModelWeights,
        prompt: &[u32],
        policy: &'m ThresholdPolicy,
        mode: RuntimeMode,
        opts: &GenerateOptions,
    ) -> Result<Self> {
        mode.validate()?;
        if prompt.is_empty() {
            return Err(Error::EmptyInput("empty prompt".into()));
        }
        let dims = &model.dims;
        if mode != RuntimeMode::Dense {
            if policy.layers.len() != dims.n_layers {
                return Err(Error::Dimension(format!(
                    "policy covers {} layers, model has {}",
                    policy.layers.len(),
                    dims.n_layers
                )));
            }
            if policy.aggregation == Aggregation::PerToken {
                return Err(Error::Dimension(
                    "per_token aggregation is not valid for prefill".into(),
                ));
            }
        }
        let needs_mags = mode != RuntimeMode::Dense;
        let mut agg = needs_mags
            .then(|| MagnitudeAggregator::new(dims.n_layers, dims.d_h, policy.aggregation));

        let mut state = DecodeState::new(model);
        let t0 = Instant::now();
        let mut norm_s = RunningMinMax::new();
        let mut norm_h = RunningMinMax::new();
        let mut prev_logits: Option<Vec<f32>> = None;
        for &tok in prompt {
            if let Some(prev) = prev_logits.as_deref() {
                if (tok as usize) < dims.vocab_size {
                    norm_s.update(cogload::surprisal(prev, tok));
                }
                norm_h.update(cogload::entropy(prev));
            }
            let mut obs = match agg.as_mut() {
                Some(a) => MlpObserver::Aggregate(a),
                None => MlpObserver::None,
            };
            state.step(tok, None, &mut obs)?;
            prev_logits = Some(state.logits().to_vec());
        }
        let prefill_time_s = t0.elapsed().as_secs_f64();

        let a_tables = agg.map(|a| a.finalize()).unwrap_or_default();
        let d_h = dims.d_h;
        let (sorted_desc, cum_mass) = build_order(&a_tables);

        // stats cover the generation loop; prefill work is reported apart
        state.reset_flops();

        let uses_masks = mode != RuntimeMode::Dense;
        let mut engine = Engine {
            state,
            policy,
            mode,
            magnitude_mode: opts.magnitude_mode,
            d_h,
            a_tables,
            sorted_desc,
            cum_mass,
            current: LayerMasks::from_active(vec![Vec::new(); dims.n_layers], d_h),
            uses_masks,
            norm_s,
            norm_h,
            fires_s: 0,
            fires_h: 0,
            steps: 0,
            sparsity_sums: vec![0.0; dims.n_layers],
            prefill_time_s,
        };
        if matches!(engine.mode, RuntimeMode::TopP(_) | RuntimeMode::TopK(_)) {
            engine.fill_static_masks()?;
        }
        Ok(engine)
    }

    fn fill_static_masks(&mut self) -> Result<()> {
        let mut active = Vec::with_capacity(self.a_tables.len());
        for (l, table) in self.a_tables.iter().enumerate() {
            let mags = NeuronMagnitudes {
                layer: l,
                values: table.clone(),
                aggregation: self.policy.aggregation,
                source_positions: (0, self.state.position()),
            };
            let mask = static_mask(&mags, self.mode)?;
            active.push(
                mask.iter()
                    .enumerate()
                    .filter_map(|(j, &keep)| keep.then_some(j as u32))
                    .collect::<Vec<u32>>(),
            );
        }
        self.current = LayerMasks::from_active(active, self.d_h);
        Ok(())
    }

    /// Threshold masks for the clada modes; `fire_*` carry the indicator
    /// outcomes for this step.
    fn rebuild_threshold_masks(&mut self, fire_s: bool, fire_h: bool) {
        let n_layers = self.a_tables.len();
        let mut active: Vec<Vec<u32>> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let lp = &self.policy.layers[l];
            let multiplier = 1.0
                + self.policy.modulation_sign
                    * (lp.lambda * fire_s as u8 as f64 + lp.gamma * fire_h as u8 as f64);
            match self.mode {
                RuntimeMode::CladaFull | RuntimeMode::CladaNoSemantic => {
                    let tau = (lp.tau_base * multiplier).max(0.0) as f32;
                    let list: Vec<u32> = self.a_tables[l]
                        .iter()
                        .enumerate()
                        .filter_map(|(j, &a)| (a >= tau).then_some(j as u32))
                        .collect();
                    active.push(list);
                }
                RuntimeMode::CladaNoStatistical => {
                    let p_eff = if multiplier > 1e-9 {
                        (0.5 / multiplier).clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                    active.push(self.top_p_active(l, p_eff));
                }
                _ => unreachable!("threshold masks only for clada modes"),
            }
        }
        self.current = LayerMasks::from_active(active, self.d_h);
    }

    /// Shortest descending-magnitude prefix reaching `p` of the total mass,
    /// returned ascending.
    fn top_p_active(&self, layer: usize, p: f64) -> Vec<u32> {
        let cum = &self.cum_mass[layer];
        let total = *cum.last().unwrap_or(&0.0);
        if total <= 0.0 {
            return Vec::new();
        }
        let target = p * total;
        let take = (cum.partition_point(|&c| c < target) + 1).min(self.sorted_desc[layer].len());
        let mut list = self.sorted_desc[layer][..take].to_vec();
        list.sort_unstable();
        list
    }

    /// Advance one token: update signal state, rebuild masks, step.
    fn advance(&mut self, token: u32, s_raw: f64, h_raw: f64) -> Result<()> {
        self.norm_s.update(s_raw);
        self.norm_h.update(h_raw);
        let (s_eff, h_eff) = match self.policy.signal_mode {
            SignalMode::Normalized => (self.norm_s.normalize(s_raw), self.norm_h.normalize(h_raw)),
            SignalMode::Raw => (s_raw, h_raw),
        };
        let fire_s = s_eff > self.policy.tau_s;
        let fire_h = h_eff > self.policy.tau_h;
        self.fires_s += fire_s as usize;
        self.fires_h += fire_h as usize;

        let lagged = self.magnitude_mode == MagnitudeMode::Lagged;
        match self.mode {
            RuntimeMode::Dense => {}
            RuntimeMode::TopP(_) | RuntimeMode::TopK(_) => {
                if lagged {
                    let (sorted, cum) = build_order(&self.a_tables);
                    self.sorted_desc = sorted;
                    self.cum_mass = cum;
                    self.fill_static_masks()?;
                }
            }
            RuntimeMode::CladaFull => self.rebuild_threshold_masks(fire_s, fire_h),
            RuntimeMode::CladaNoSemantic => self.rebuild_threshold_masks(false, false),
            RuntimeMode::CladaNoStatistical => {
                if lagged {
                    let (sorted, cum) = build_order(&self.a_tables);
                    self.sorted_desc = sorted;
                    self.cum_mass = cum;
                }
                self.rebuild_threshold_masks(fire_s, fire_h);
            }
        }

        if self.uses_masks {
            for (l, sum) in self.sparsity_sums.iter_mut().enumerate() {
                *sum += 1.0 - self.current.layer(l).len() as f64 / self.d_h as f64;
            }
        }
        self.steps += 1;

        let masks = if self.uses_masks { Some(&self.current) } else { None };
        if lagged && self.uses_masks {
            let mut obs = MlpObserver::Refresh(&mut self.a_tables);
            self.state.step(token, masks, &mut obs)
        } else {
            self.state.step(token, masks, &mut MlpObserver::None)
        }
    }

    fn stats(&self, tokens_generated: usize, wall_time_s: f64) -> GenerationStats {
        let steps = self.steps.max(1) as f64;
        let per_layer: Vec<f64> = self.sparsity_sums.iter().map(|s| s / steps).collect();
        let mean = if per_layer.is_empty() {
            0.0
        } else {
            per_layer.iter().sum::<f64>() / per_layer.len() as f64
        };
        GenerationStats {
            tokens_generated,
            per_layer_mean_sparsity: per_layer,
            mean_sparsity: mean,
            wall_time_s,
            prefill_time_s: self.prefill_time_s,
            fires_surprisal: self.fires_s,
            fires_entropy: self.fires_h,
            decode_strategy: "greedy",
            mlp_flops: self.state.mlp_flops(),
        }
    }
}

/// Process a prompt densely and report the initial masking state.
pub fn prefill(
    model: &ModelWeights,
    prompt: &[u32],
    policy: &ThresholdPolicy,
) -> Result<PrefillState> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("empty prompt".into()));
    }
    if policy.layers.len() != model.dims.n_layers {
        return Err(Error::Dimension(format!(
            "policy covers {} layers, model has {}",
            policy.layers.len(),
            model.dims.n_layers
        )));
    }
    let dims = &model.dims;
    let mut agg = MagnitudeAggregator::new(dims.n_layers, dims.d_h, policy.aggregation);
    let mut state = DecodeState::new(model);
    let t0 = Instant::now();
    for &tok in prompt {
        let mut obs = MlpObserver::Aggregate(&mut agg);
        state.step(tok, None, &mut obs)?;
    }
    let prefill_time_s = t0.elapsed().as_secs_f64();
    let magnitudes = agg.finalize();

    let mut initial_masks = Vec::with_capacity(dims.n_layers);
    let mut initial_sparsity = Vec::with_capacity(dims.n_layers);
    for (l, table) in magnitudes.iter().enumerate() {
        let mags = NeuronMagnitudes {
            layer: l,
            values: table.clone(),
            aggregation: policy.aggregation,
            source_positions: (0, prompt.len()),
        };
        let (mask, sparsity) = meter::build_mask(&mags, policy.layers[l].tau_base as f32);
        initial_masks.push(mask);
        initial_sparsity.push(sparsity);
    }

    let prompt_signal = if prompt.len() >= 2 {
        Some(cogload::signal_for_sequence(model, prompt)?)
    } else {
        None
    };

    Ok(PrefillState {
        magnitudes,
        initial_masks,
        initial_sparsity,
        last_logits: state.logits().to_vec(),
        prompt_signal,
        prefill_time_s,
    })
}

/// Greedy generation under the given mode. Returns the generated tokens and
/// run statistics; timing covers the generation loop only.
pub fn generate(
    model: &ModelWeights,
    prompt: &[u32],
    policy: &ThresholdPolicy,
    mode: RuntimeMode,
    max_new: usize,
) -> Result<(Vec<u32>, GenerationStats)> {
    generate_with(model, prompt, policy, mode, max_new, &GenerateOptions::default())
}

pub fn generate_with(
    model: &ModelWeights,
    prompt: &[u32],
    policy: &ThresholdPolicy,
    mode: RuntimeMode,
    max_new: usize,
    opts: &GenerateOptions,
) -> Result<(Vec<u32>, GenerationStats)> {
    if max_new == 0 {
        return Err(Error::Dimension("max_new must be >= 1".into()));
    }
    let mut engine = Engine::new(model, prompt, policy, mode, opts)?;
    let mut out = Vec::with_capacity(max_new);
    let t0 = Instant::now();
    for _ in 0..max_new {
        let logits = engine.state.logits();
        let y = argmax(logits);
        let s = cogload::surprisal(logits, y);
        let h = cogload::entropy(logits);
        engine.advance(y, s, h)?;
        out.push(y);
    }
    let wall = t0.elapsed().as_secs_f64();
    let stats = engine.stats(out.len(), wall);
    Ok((out, stats))
}

/// One row of an ablation comparison.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub mode: String,
    /// Teacher-forced next-token agreement against the dense stream.
    pub agreement_rate: f64,
    pub mean_sparsity: f64,
    pub wall_time_s: f64,
    pub indicator_fire_rate_s: f64,
    pub indicator_fire_rate_h: f64,
}

/// Ablation setup: prompts are corpus sequences truncated to `prompt_len`.
#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub prompt_len: usize,
    pub max_new: usize,
    pub max_prompts: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            prompt_len: 32,
            max_new: 32,
            max_prompts: 8,
        }
    }
}

/// Compare modes against dense greedy decoding.
///
/// For each prompt the dense stream is generated once; every mode then
/// replays that stream teacher-forced, scoring at each step whether its own
/// greedy pick matches the dense token. This keeps agreement a per-step
/// measurement instead of compounding divergence.
pub fn ablation_run(
    model: &ModelWeights,
    corpus: &Corpus,
    policy: &ThresholdPolicy,
    modes: &[RuntimeMode],
    cfg: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    if modes.is_empty() {
        return Err(Error::EmptyInput("no modes requested".into()));
    }
    let prompts: Vec<Vec<u32>> = corpus
        .sequences
        .iter()
        .filter(|s| !s.tokens.is_empty())
        .take(cfg.max_prompts)
        .map(|s| s.tokens[..s.tokens.len().min(cfg.prompt_len)].to_vec())
        .collect();
    if prompts.is_empty() {
        return Err(Error::InsufficientData("corpus has no usable prompts".into()));
    }

    let dense_streams = par::map_indexed(prompts.len(), |i| {
        generate(model, &prompts[i], policy, RuntimeMode::Dense, cfg.max_new)
            .map(|(tokens, _)| tokens)
    });
    let dense_streams: Vec<Vec<u32>> = dense_streams.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let t0 = Instant::now();
        let mut agree = 0usize;
        let mut total = 0usize;
        let mut sparsity_sum = 0.0f64;
        let mut fire_s = 0usize;
        let mut fire_h = 0usize;
        let mut steps = 0usize;
        for (prompt, stream) in prompts.iter().zip(&dense_streams) {
            let mut engine =
                Engine::new(model, prompt, policy, mode, &GenerateOptions::default())?;
            for &reference in stream {
                let logits = engine.state.logits();
                let pick = argmax(logits);
                agree += (pick == reference) as usize;
                total += 1;
                let s = cogload::surprisal(logits, reference);
                let h = cogload::entropy(logits);
                engine.advance(reference, s, h)?;
            }
            let st = engine.stats(stream.len(), 0.0);
            sparsity_sum += st.mean_sparsity;
            fire_s += st.fires_surprisal;
            fire_h += st.fires_entropy;
            steps += stream.len();
        }
        rows.push(AblationRow {
            mode: mode.to_string(),
            agreement_rate: agree as f64 / total.max(1) as f64,
            mean_sparsity: sparsity_sum / prompts.len() as f64,
            wall_time_s: t0.elapsed().as_secs_f64(),
            indicator_fire_rate_s: fire_s as f64 / steps.max(1) as f64,
            indicator_fire_rate_h: fire_h as f64 / steps.max(1) as f64,
        });
    }
    Ok(rows)
}

/// CSV report for ablation rows.
pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "mode,agreement_rate,mean_sparsity,wall_time_s,indicator_fire_rate_s,indicator_fire_rate_H"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.mode,
            r.agreement_rate,
            r.mean_sparsity,
            r.wall_time_s,
            r.indicator_fire_rate_s,
            r.indicator_fire_rate_h
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One latency measurement grid point.
#[derive(Debug, Clone, Copy)]
pub struct BenchPoint {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub batch: usize,
}

/// Latency run configuration; `repeats` excludes the warm-up iteration.
#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub repeats: usize,
    pub seed: u32,
}

/// One latency result row.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub mode: String,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub batch: usize,
    /// Median generation-loop seconds over the repeats.
    pub wall_time_s: f64,
    /// Coefficient of variation of the repeat times.
    pub cv: f64,
    pub speedup_vs_dense: f64,
    pub dense_wall_s: f64,
    pub mean_sparsity: f64,
    pub prefill_s: f64,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_h: usize,
}

fn synth_prompt(seed: u32, stream: usize, len: usize, vocab: usize) -> Vec<u32> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(((seed as u64) << 20) | stream as u64);
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

struct BenchStream<'m> {
    engine: Engine<'m>,
    err: Option<Error>,
}

fn run_stream(stream: &mut BenchStream<'_>, gen_len: usize) {
    for _ in 0..gen_len {
        let logits = stream.engine.state.logits();
        let y = argmax(logits);
        let s = cogload::surprisal(logits, y);
        let h = cogload::entropy(logits);
        if let Err(e) = stream.engine.advance(y, s, h) {
            stream.err = Some(e);
            return;
        }
    }
}

/// median wall seconds, cv, mean sparsity, mean prefill seconds
fn measure_mode(
    model: &ModelWeights,
    policy: &ThresholdPolicy,
    mode: RuntimeMode,
    point: BenchPoint,
    cfg: BenchConfig,
) -> Result<(f64, f64, f64, f64)> {
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut sparsity = 0.0f64;
    let mut prefill_s = 0.0f64;
    for rep in 0..=cfg.repeats {
        // Fresh engines per repeat; prefill happens outside the timed region.
        let mut streams: Vec<BenchStream> = (0..point.batch)
            .map(|b| {
                let prompt = synth_prompt(cfg.seed, b, point.prompt_len, model.dims.vocab_size);
                Engine::new(model, &prompt, policy, mode, &GenerateOptions::default())
                    .map(|engine| BenchStream { engine, err: None })
            })
            .collect::<Result<_>>()?;
        let t0 = Instant::now();
        par::for_each_mut(&mut streams, |_, s| run_stream(s, point.gen_len));
        let elapsed = t0.elapsed().as_secs_f64();
        for s in &mut streams {
            if let Some(e) = s.err.take() {
                return Err(e);
            }
        }
        if rep > 0 {
            times.push(elapsed);
        } else {
            // warm-up iteration also supplies the sparsity/prefill readings
            let n = streams.len() as f64;
            sparsity = streams
                .iter()
                .map(|s| s.engine.stats(point.gen_len, 0.0).mean_sparsity)
                .sum::<f64>()
                / n;
            prefill_s =
                streams.iter().map(|s| s.engine.prefill_time_s).sum::<f64>() / n;
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = times[times.len() / 2];
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64;
    let cv = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    Ok((median, cv, sparsity, prefill_s))
}

/// Measure generation-phase latency for each mode at each grid point, with
/// a dense run as the denominator. The warm-up iteration is excluded from
/// the reported times. Grid points beyond the model context are refused.
pub fn bench_latency(
    model: &ModelWeights,
    policy: &ThresholdPolicy,
    modes: &[RuntimeMode],
    points: &[BenchPoint],
    cfg: BenchConfig,
) -> Result<Vec<BenchRow>> {
    if cfg.repeats < 3 {
        return Err(Error::Dimension("bench repeats must be >= 3".into()));
    }
    let mut rows = Vec::new();
    for &point in points {
        if point.prompt_len + point.gen_len > model.dims.max_ctx {
            return Err(Error::Length(format!(
                "prompt {} + gen {} exceeds max_ctx {}",
                point.prompt_len, point.gen_len, model.dims.max_ctx
            )));
        }
        if point.batch == 0 || point.prompt_len == 0 || point.gen_len == 0 {
            return Err(Error::Dimension("bench grid values must be >= 1".into()));
        }
        let (dense_median, _, _, _) =
            measure_mode(model, policy, RuntimeMode::Dense, point, cfg)?;
        for &mode in modes {
            let (median, cv, sparsity, prefill_s) =
                measure_mode(model, policy, mode, point, cfg)?;
            rows.push(BenchRow {
                mode: mode.to_string(),
                prompt_len: point.prompt_len,
                gen_len: point.gen_len,
                batch: point.batch,
                wall_time_s: median,
                cv,
                speedup_vs_dense: dense_median / median,
                dense_wall_s: dense_median,
                mean_sparsity: sparsity,
                prefill_s,
                n_layers: model.dims.n_layers,
                d_model: model.dims.d_model,
                d_h: model.dims.d_h,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSequence;
    use crate::model::{forward, gen_random_model, ModelDims, TraceConfig};
    use crate::search::{self, SearchConfig};

    fn dims() -> ModelDims {
        ModelDims {
            n_layers: 2,
            d_model: 32,
            d_h: 64,
            n_heads: 2,
            vocab_size: 64,
            max_ctx: 96,
        }
    }

    fn prompt() -> Vec<u32> {
        (0..12u32).map(|i| (i * 7 + 5) % 64).collect()
    }

    #[test]
    fn final_threshold_indicator_arithmetic() {
        let mut policy = ThresholdPolicy::zero(1);
        policy.layers[0].tau_base = 1.0;
        policy.tau_s = 0.75;
        policy.tau_h = 0.75;
        let base = policy.layers[0].tau_base;
        let lambda = policy.layers[0].lambda;
        let gamma = policy.layers[0].gamma;
        // strict comparisons: equality does not fire
        assert_eq!(final_threshold(&policy, 0, 0.5, 0.5), base);
        assert_eq!(final_threshold(&policy, 0, 0.75, 0.75), base);
        assert_eq!(final_threshold(&policy, 0, 0.8, 0.5), base * (1.0 + lambda));
        assert_eq!(final_threshold(&policy, 0, 0.5, 0.8), base * (1.0 + gamma));
        assert_eq!(
            final_threshold(&policy, 0, 0.8, 0.8),
            base * (1.0 + lambda + gamma)
        );
        for (s, h, expect) in [
            (0.5, 0.5, 1.00),
            (0.9, 0.5, 1.80),
            (0.5, 0.9, 1.12),
            (0.9, 0.9, 1.92),
        ] {
            let ratio = final_threshold(&policy, 0, s, h) / base;
            assert!((ratio - expect).abs() < 1e-12, "ratio {ratio} != {expect}");
        }
    }

    #[test]
    fn dense_mode_matches_plain_greedy_loop() {
        let m = gen_random_model(51, dims()).unwrap();
        let policy = ThresholdPolicy::zero(2);
        let (tokens, stats) = generate(&m, &prompt(), &policy, RuntimeMode::Dense, 16).unwrap();

        // reference: grow the sequence and re-run the full forward each step
        let mut seq = prompt();
        let mut expect = Vec::new();
        for _ in 0..16 {
            let (logits, _) = forward(&m, &seq, &TraceConfig::disabled()).unwrap();
            let y = argmax(logits.last().unwrap());
            expect.push(y);
            seq.push(y);
        }
        assert_eq!(tokens, expect);
        assert_eq!(stats.tokens_generated, 16);
        assert_eq!(stats.mean_sparsity, 0.0);
    }

    #[test]
    fn zero_thresholds_reproduce_dense_tokens() {
        let m = gen_random_model(52, dims()).unwrap();
        let policy = ThresholdPolicy::zero(2);
        let (dense, _) = generate(&m, &prompt(), &policy, RuntimeMode::Dense, 24).unwrap();
        let (full, stats) = generate(&m, &prompt(), &policy, RuntimeMode::CladaFull, 24).unwrap();
        assert_eq!(dense, full);
        assert_eq!(stats.mean_sparsity, 0.0);
    }

    #[test]
    fn generation_is_reproducible() {
        let m = gen_random_model(53, dims()).unwrap();
        let corpus = Corpus::new(vec![CorpusSequence {
            id: "c".into(),
            group: "T".into(),
            tokens: (0..64u32).map(|i| (i * 3 + 1) % 64).collect(),
        }]);
        let policy = search::search_all(&m, &corpus, "c", &SearchConfig::default()).unwrap();
        let (a, _) = generate(&m, &prompt(), &policy, RuntimeMode::CladaFull, 20).unwrap();
        let (b, _) = generate(&m, &prompt(), &policy, RuntimeMode::CladaFull, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_semantic_equals_full_when_indicators_cannot_fire() {
        let m = gen_random_model(54, dims()).unwrap();
        let corpus = Corpus::new(vec![CorpusSequence {
            id: "c".into(),
            group: "T".into(),
            tokens: (0..64u32).map(|i| (i * 5 + 2) % 64).collect(),
        }]);
        let mut policy = search::search_all(&m, &corpus, "c", &SearchConfig::default()).unwrap();
        // normalized signals never strictly exceed 1.0
        policy.tau_s = 1.0;
        policy.tau_h = 1.0;
        let (full, fs) = generate(&m, &prompt(), &policy, RuntimeMode::CladaFull, 24).unwrap();
        let (nosem, ns) =
            generate(&m, &prompt(), &policy, RuntimeMode::CladaNoSemantic, 24).unwrap();
        assert_eq!(full, nosem);
        assert_eq!(fs.fires_surprisal, 0);
        assert_eq!(fs.fires_entropy, 0);
        assert!((fs.mean_sparsity - ns.mean_sparsity).abs() < 1e-12);
    }

    #[test]
    fn static_mask_hand_cases() {
        let mags = NeuronMagnitudes {
            layer: 0,
            values: vec![4.0, 3.0, 2.0, 1.0],
            aggregation: Aggregation::MeanOverPrefix,
            source_positions: (0, 4),
        };
        // 4 + 3 = 7 >= 0.5 * 10
        let mask = static_mask(&mags, RuntimeMode::TopP(0.5)).unwrap();
        assert_eq!(mask, vec![true, true, false, false]);

        let all = static_mask(&mags, RuntimeMode::TopK(1.0)).unwrap();
        assert!(all.iter().all(|&b| b));

        let half = static_mask(&mags, RuntimeMode::TopK(0.5)).unwrap();
        assert_eq!(half.iter().filter(|&&b| b).count(), 2);

        let zeros = NeuronMagnitudes {
            layer: 0,
            values: vec![0.0; 4],
            aggregation: Aggregation::MeanOverPrefix,
            source_positions: (0, 4),
        };
        let none = static_mask(&zeros, RuntimeMode::TopP(0.5)).unwrap();
        assert!(none.iter().all(|&b| !b));

        assert!(static_mask(&mags, RuntimeMode::Dense).is_err());
    }

    #[test]
    fn prefill_masks_match_build_mask_and_zero_tau_is_all_true() {
        let m = gen_random_model(55, dims()).unwrap();
        let policy = ThresholdPolicy::zero(2);
        let pre = prefill(&m, &prompt(), &policy).unwrap();
        assert!(pre.initial_masks.iter().all(|m| m.iter().all(|&b| b)));
        assert!(pre.initial_sparsity.iter().all(|&s| s == 0.0));

        let mut policy2 = ThresholdPolicy::zero(2);
        policy2.layers[0].tau_base = 0.05;
        policy2.layers[1].tau_base = 0.02;
        let pre2 = prefill(&m, &prompt(), &policy2).unwrap();
        for l in 0..2 {
            let mags = NeuronMagnitudes {
                layer: l,
                values: pre2.magnitudes[l].clone(),
                aggregation: policy2.aggregation,
                source_positions: (0, prompt().len()),
            };
            let (mask, sparsity) = meter::build_mask(&mags, policy2.layers[l].tau_base as f32);
            assert_eq!(mask, pre2.initial_masks[l]);
            assert_eq!(sparsity, pre2.initial_sparsity[l]);
        }
    }

    #[test]
    fn mask_nesting_as_threshold_rises() {
        let m = gen_random_model(56, dims()).unwrap();
        let policy = ThresholdPolicy::zero(2);
        let pre = prefill(&m, &prompt(), &policy).unwrap();
        let mags = NeuronMagnitudes {
            layer: 0,
            values: pre.magnitudes[0].clone(),
            aggregation: Aggregation::MeanOverPrefix,
            source_positions: (0, 12),
        };
        let mut prev: Option<Vec<bool>> = None;
        for i in 0..8 {
            let tau = i as f32 * 0.02;
            let (mask, _) = meter::build_mask(&mags, tau);
            if let Some(p) = prev {
                for (now, before) in mask.iter().zip(&p) {
                    assert!(!*now || *before, "active sets must nest downward");
                }
            }
            prev = Some(mask);
        }
    }

    #[test]
    fn ablation_dense_row_is_exact() {
        let m = gen_random_model(57, dims()).unwrap();
        let corpus = Corpus::new(
            (0..3)
                .map(|i| CorpusSequence {
                    id: format!("s{i}"),
                    group: "T".into(),
                    tokens: (0..48u32).map(|t| (t * (i + 3) as u32 + 1) % 64).collect(),
                })
                .collect(),
        );
        let policy = search::search_all(&m, &corpus, "c", &SearchConfig::default()).unwrap();
        let rows = ablation_run(
            &m,
            &corpus,
            &policy,
            &[RuntimeMode::Dense, RuntimeMode::TopP(0.5)],
            &AblationConfig {
                prompt_len: 12,
                max_new: 12,
                max_prompts: 3,
            },
        )
        .unwrap();
        assert_eq!(rows[0].mode, "dense");
        assert_eq!(rows[0].agreement_rate, 1.0);
        assert_eq!(rows[0].mean_sparsity, 0.0);
        assert!(rows[1].mean_sparsity > 0.0);
        assert!(rows[1].agreement_rate <= 1.0);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(RuntimeMode::parse("dense").unwrap(), RuntimeMode::Dense);
        assert_eq!(
            RuntimeMode::parse("clada_full").unwrap(),
            RuntimeMode::CladaFull
        );
        assert_eq!(RuntimeMode::parse("top-p:0.5").unwrap(), RuntimeMode::TopP(0.5));
        assert_eq!(
            RuntimeMode::parse("TOP-K:0.25").unwrap(),
            RuntimeMode::TopK(0.25)
        );
        assert!(RuntimeMode::parse("top-p:1.5").is_err());
        assert!(RuntimeMode::parse("bogus").is_err());
    }

    #[test]
    fn bench_enforces_limits() {
        let m = gen_random_model(58, dims()).unwrap();
        let policy = ThresholdPolicy::zero(2);
        let err = bench_latency(
            &m,
            &policy,
            &[RuntimeMode::Dense],
            &[BenchPoint {
                prompt_len: 90,
                gen_len: 90,
                batch: 1,
            }],
            BenchConfig { repeats: 3, seed: 1 },
        );
        assert!(matches!(err, Err(Error::Length(_))));
        let err2 = bench_latency(
            &m,
            &policy,
            &[RuntimeMode::Dense],
            &[BenchPoint {
                prompt_len: 8,
                gen_len: 8,
                batch: 1,
            }],
            BenchConfig { repeats: 2, seed: 1 },
        );
        assert!(err2.is_err());
    }

    #[test]
    fn bench_dense_vs_dense_speedup_near_one() {
        let m = gen_random_model(59, dims()).unwrap();
        let policy = ThresholdPolicy::zero(2);
        let rows = bench_latency(
            &m,
            &policy,
            &[RuntimeMode::Dense],
            &[BenchPoint {
                prompt_len: 8,
                gen_len: 48,
                batch: 1,
            }],
            BenchConfig { repeats: 5, seed: 3 },
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        // same workload measured twice; tiny models are noisy, so this is a
        // coarse sanity bound (the acceptance suite checks the tight one at
        // realistic scale)
        assert!(
            (rows[0].speedup_vs_dense - 1.0).abs() < 0.4,
            "{}",
            rows[0].speedup_vs_dense
        );
    }
}
