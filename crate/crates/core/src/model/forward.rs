//! Forward passes: a single incremental decoder that serves full-sequence
//! evaluation, masked (sparse) evaluation, and token-by-token generation.
//!
//! Determinism contract: every reduction runs over fixed-size chunks whose
//! partial sums are combined in index order, so results are bit-identical
//! regardless of worker-thread count and of whether the `parallel` feature
//! is enabled. A masked pass over the full index set follows exactly the
//! same arithmetic order as the dense pass.

use crate::error::{Error, Result};
use crate::meter::Aggregation;

use super::{Activation, LayerWeights, ModelWeights};

/// RMS normalization epsilon.
const NORM_EPS: f64 = 1e-6;
/// Neurons per MLP work chunk (also the dense chunking, for bit-equality).
const MLP_CHUNK: usize = 128;
/// Output rows per matvec work chunk.
const ROW_CHUNK: usize = 64;
/// Below this many scalar multiplies a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 14;

/// Dot product with a fixed 8-lane accumulator tree. The lane structure is
/// part of the numeric contract: every module uses this same kernel, so
/// independently computed gate coefficients are bit-identical, and the
/// fixed combine order keeps results independent of vector width.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 32;
    let mut acc = [0.0f32; LANES];
    let a_chunks = a.chunks_exact(LANES);
    let b_chunks = b.chunks_exact(LANES);
    let a_tail = a_chunks.remainder();
    let b_tail = b_chunks.remainder();
    for (ar, br) in a_chunks.zip(b_chunks) {
        for i in 0..LANES {
            acc[i] += ar[i] * br[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in a_tail.iter().zip(b_tail) {
        tail += x * y;
    }
    // fixed pairwise combine tree
    let mut width = LANES / 2;
    while width > 0 {
        for i in 0..width {
            acc[i] += acc[i + width];
        }
        width /= 2;
    }
    acc[0] + tail
}

/// `out[r] = w[r] . x` for a row-major `rows x cols` matrix.
fn matvec(w: &[f32], x: &[f32], cols: usize, out: &mut [f32]) {
    #[cfg(feature = "parallel")]
    let rows = out.len();
    let body = |(c, chunk): (usize, &mut [f32])| {
        let base = c * ROW_CHUNK;
        for (i, o) in chunk.iter_mut().enumerate() {
            let r = base + i;
            *o = dot(&w[r * cols..(r + 1) * cols], x);
        }
    };
    #[cfg(feature = "parallel")]
    if rows * cols >= PAR_MIN_WORK {
        use rayon::prelude::*;
        out.par_chunks_mut(ROW_CHUNK).enumerate().for_each(body);
        return;
    }
    out.chunks_mut(ROW_CHUNK).enumerate().for_each(body);
}

fn rmsnorm(x: &[f32], out: &mut [f32]) {
    let ms = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    let inv = (1.0 / (ms + NORM_EPS).sqrt()) as f32;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * inv;
    }
}

/// Per-layer sets of active neuron indices (ascending). `None` entries are
/// not allowed; a fully dense pass uses `masks = None` at the call site.
#[derive(Debug, Clone)]
pub struct LayerMasks {
    active: Vec<Vec<u32>>,
    d_h: usize,
}

impl LayerMasks {
    /// Build from per-layer boolean keep-vectors.
    pub fn from_bools(masks: &[Vec<bool>], n_layers: usize, d_h: usize) -> Result<Self> {
        if masks.len() != n_layers {
            return Err(Error::Dimension(format!(
                "expected {n_layers} layer masks, got {}",
                masks.len()
            )));
        }
        let mut active = Vec::with_capacity(masks.len());
        for (l, m) in masks.iter().enumerate() {
            if m.len() != d_h {
                return Err(Error::Dimension(format!(
                    "layer {l}: mask length {} != d_h {d_h}",
                    m.len()
                )));
            }
            active.push(
                m.iter()
                    .enumerate()
                    .filter_map(|(j, &keep)| keep.then_some(j as u32))
                    .collect(),
            );
        }
        Ok(LayerMasks { active, d_h })
    }

    /// Build from per-layer ascending index lists (trusted input).
    pub fn from_active(active: Vec<Vec<u32>>, d_h: usize) -> Self {
        LayerMasks { active, d_h }
    }

    pub fn all_active(n_layers: usize, d_h: usize) -> Self {
        LayerMasks {
            active: (0..n_layers).map(|_| (0..d_h as u32).collect()).collect(),
            d_h,
        }
    }

    pub fn layer(&self, l: usize) -> &[u32] {
        &self.active[l]
    }

    pub fn active_counts(&self) -> Vec<usize> {
        self.active.iter().map(|a| a.len()).collect()
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }
}

/// What to capture during a traced forward pass.
#[derive(Debug, Clone)]
pub struct TraceConfig {
    /// Layers to trace; `None` = all.
    pub layers: Option<Vec<usize>>,
    /// Token positions to trace; `None` = all.
    pub positions: Option<Vec<usize>>,
    /// Keep the normalized MLP input state per traced point.
    pub record_inputs: bool,
    /// Keep per-neuron activation magnitudes per traced point.
    pub record_magnitudes: bool,
    /// Keep the MLP output vector per traced point.
    pub record_outputs: bool,
    /// Keep the full `d_h x d_model` per-neuron contribution matrix.
    pub retain_contributions: bool,
}

impl TraceConfig {
    pub fn disabled() -> Self {
        TraceConfig {
            layers: Some(Vec::new()),
            positions: None,
            record_inputs: false,
            record_magnitudes: false,
            record_outputs: false,
            retain_contributions: false,
        }
    }

    /// Magnitudes, inputs and outputs everywhere; no contribution matrices.
    pub fn full() -> Self {
        TraceConfig {
            layers: None,
            positions: None,
            record_inputs: true,
            record_magnitudes: true,
            record_outputs: true,
            retain_contributions: false,
        }
    }

    /// Normalized MLP inputs only (cheapest option that supports replaying
    /// per-neuron computations offline).
    pub fn inputs_only() -> Self {
        TraceConfig {
            layers: None,
            positions: None,
            record_inputs: true,
            record_magnitudes: false,
            record_outputs: false,
            retain_contributions: false,
        }
    }

    /// Everything, including the contribution matrix, at one point.
    pub fn contributions_at(layer: usize, position: usize) -> Self {
        TraceConfig {
            layers: Some(vec![layer]),
            positions: Some(vec![position]),
            record_inputs: true,
            record_magnitudes: true,
            record_outputs: true,
            retain_contributions: true,
        }
    }

    fn selects(&self, layer: usize, position: usize) -> bool {
        let any = self.record_inputs
            || self.record_magnitudes
            || self.record_outputs
            || self.retain_contributions;
        if !any {
            return false;
        }
        let layer_ok = self.layers.as_ref().map_or(true, |ls| ls.contains(&layer));
        let pos_ok = self
            .positions
            .as_ref()
            .map_or(true, |ps| ps.contains(&position));
        layer_ok && pos_ok
    }
}

/// One captured (layer, position) record.
#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub layer: usize,
    pub position: usize,
    /// Normalized hidden state fed to the MLP (`d_model`).
    pub mlp_input: Option<Vec<f32>>,
    /// Per-neuron activation magnitudes (`d_h`, all non-negative).
    pub magnitudes: Option<Vec<f32>>,
    /// MLP block output before the residual add (`d_model`).
    pub mlp_output: Option<Vec<f32>>,
    /// Per-neuron contribution matrix, `d_h x d_model` row-major.
    pub contributions: Option<Vec<f32>>,
}

/// Recorded activations from a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    pub d_model: usize,
    pub d_h: usize,
    pub entries: Vec<TraceEntry>,
}

impl ActivationTrace {
    pub fn entry(&self, layer: usize, position: usize) -> Option<&TraceEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.position == position)
    }

    /// All recorded MLP input states for one layer, in position order.
    pub fn mlp_inputs(&self, layer: usize) -> Vec<(usize, &[f32])> {
        let mut v: Vec<(usize, &[f32])> = self
            .entries
            .iter()
            .filter(|e| e.layer == layer)
            .filter_map(|e| e.mlp_input.as_deref().map(|x| (e.position, x)))
            .collect();
        v.sort_by_key(|(p, _)| *p);
        v
    }
}

/// Streaming reduction of per-position magnitudes into a per-layer summary,
/// without retaining the per-position values.
#[derive(Debug, Clone)]
pub struct MagnitudeAggregator {
    mode: Aggregation,
    sums: Vec<Vec<f64>>,
    maxs: Vec<Vec<f32>>,
    lasts: Vec<Vec<f32>>,
    positions: usize,
}

impl MagnitudeAggregator {
    pub fn new(n_layers: usize, d_h: usize, mode: Aggregation) -> Self {
        MagnitudeAggregator {
            mode,
            sums: vec![vec![0.0; d_h]; n_layers],
            maxs: vec![vec![0.0; d_h]; n_layers],
            lasts: vec![vec![0.0; d_h]; n_layers],
            positions: 0,
        }
    }

    fn observe(&mut self, layer: usize, magnitudes: &[f32]) {
        for ((s, m), &a) in self.sums[layer]
            .iter_mut()
            .zip(self.maxs[layer].iter_mut())
            .zip(magnitudes)
        {
            *s += a as f64;
            if a > *m {
                *m = a;
            }
        }
        self.lasts[layer].copy_from_slice(magnitudes);
        if layer + 1 == self.sums.len() {
            self.positions += 1;
        }
    }

    pub fn positions_seen(&self) -> usize {
        self.positions
    }

    /// Aggregated per-layer magnitude vectors. `PerToken` keeps the most
    /// recent position's values.
    pub fn finalize(self) -> Vec<Vec<f32>> {
        match self.mode {
            Aggregation::PerToken => self.lasts,
            Aggregation::MaxOverPrefix => self.maxs,
            Aggregation::MeanOverPrefix => {
                let n = self.positions.max(1) as f64;
                self.sums
                    .into_iter()
                    .map(|layer| layer.into_iter().map(|s| (s / n) as f32).collect())
                    .collect()
            }
        }
    }
}

/// Side-channel consumer for per-layer MLP results during a step.
pub enum MlpObserver<'a> {
    None,
    Trace(&'a TraceConfig, &'a mut ActivationTrace),
    Aggregate(&'a mut MagnitudeAggregator),
    /// Overwrite entries of per-layer magnitude tables for the neurons that
    /// were actually computed this step; masked-out entries keep their old
    /// values.
    Refresh(&'a mut [Vec<f32>]),
}

struct LayerKv {
    k: Vec<f32>,
    v: Vec<f32>,
}

struct Scratch {
    x: Vec<f32>,
    normed: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    heads_out: Vec<f32>,
    attn_out: Vec<f32>,
    mlp_out: Vec<f32>,
    coeff: Vec<f32>,
    partials: Vec<Vec<f32>>,
    acc: Vec<f64>,
    scores: Vec<f32>,
    rot_cos: Vec<f32>,
    rot_sin: Vec<f32>,
    logits: Vec<f32>,
}

/// Incremental decoding state over one token stream.
///
/// Holds the attention cache and reusable buffers; the model itself is
/// shared immutably, so independent streams can run in parallel.
pub struct DecodeState<'m> {
    model: &'m ModelWeights,
    kv: Vec<LayerKv>,
    theta: Vec<f64>,
    pos: usize,
    scratch: Scratch,
    mlp_flops: u64,
}

impl<'m> DecodeState<'m> {
    pub fn new(model: &'m ModelWeights) -> Self {
        let dims = &model.dims;
        let dm = dims.d_model;
        let dh = dims.d_h;
        let hd = dims.head_dim();
        let half = hd / 2;
        let theta = (0..half)
            .map(|i| 10000f64.powf(-2.0 * i as f64 / hd as f64))
            .collect();
        let kv = (0..dims.n_layers)
            .map(|_| LayerKv {
                k: Vec::new(),
                v: Vec::new(),
            })
            .collect();
        let n_chunks = dh.div_ceil(MLP_CHUNK);
        DecodeState {
            model,
            kv,
            theta,
            pos: 0,
            scratch: Scratch {
                x: vec![0.0; dm],
                normed: vec![0.0; dm],
                q: vec![0.0; dm],
                k: vec![0.0; dm],
                v: vec![0.0; dm],
                heads_out: vec![0.0; dm],
                attn_out: vec![0.0; dm],
                mlp_out: vec![0.0; dm],
                coeff: vec![0.0; dh],
                partials: (0..n_chunks).map(|_| vec![0.0; dm]).collect(),
                acc: vec![0.0; dm],
                scores: vec![0.0; dims.n_heads * dims.max_ctx],
                rot_cos: vec![0.0; half],
                rot_sin: vec![0.0; half],
                logits: vec![0.0; dims.vocab_size],
            },
            mlp_flops: 0,
        }
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Next-token logits after the most recent [`step`](Self::step).
    pub fn logits(&self) -> &[f32] {
        &self.scratch.logits
    }

    /// Scalar multiplies spent inside MLP blocks so far.
    pub fn mlp_flops(&self) -> u64 {
        self.mlp_flops
    }

    pub fn reset_flops(&mut self) {
        self.mlp_flops = 0;
    }

    /// Feed one token. With `masks`, each layer's MLP touches only the
    /// listed neurons (skipped neurons cost nothing). The observer receives
    /// per-layer MLP data as configured.
    pub fn step(
        &mut self,
        token: u32,
        masks: Option<&LayerMasks>,
        observer: &mut MlpObserver<'_>,
    ) -> Result<()> {
        let model = self.model;
        let dims = &model.dims;
        let dm = dims.d_model;
        if self.pos >= dims.max_ctx {
            return Err(Error::Length(format!(
                "context overflow: position {} >= max_ctx {}",
                self.pos, dims.max_ctx
            )));
        }
        if (token as usize) >= dims.vocab_size {
            return Err(Error::Range(format!(
                "token id {token} >= vocab size {}",
                dims.vocab_size
            )));
        }
        if let Some(m) = masks {
            if m.active.len() != dims.n_layers || m.d_h != dims.d_h {
                return Err(Error::Dimension(format!(
                    "masks cover {} layers of width {}, model has {} layers of width {}",
                    m.active.len(),
                    m.d_h,
                    dims.n_layers,
                    dims.d_h
                )));
            }
        }

        let s = &mut self.scratch;
        s.x.copy_from_slice(&model.token_embedding[token as usize * dm..(token as usize + 1) * dm]);

        // Rotation angles for this position, shared by all heads.
        let hd = dims.head_dim();
        let half = hd / 2;
        for i in 0..half {
            let angle = self.pos as f64 * self.theta[i];
            s.rot_cos[i] = angle.cos() as f32;
            s.rot_sin[i] = angle.sin() as f32;
        }

        for (l, lw) in model.layers.iter().enumerate() {
            // Attention sublayer (pre-norm, residual).
            rmsnorm(&s.x, &mut s.normed);
            matvec(&lw.wq, &s.normed, dm, &mut s.q);
            matvec(&lw.wk, &s.normed, dm, &mut s.k);
            matvec(&lw.wv, &s.normed, dm, &mut s.v);
            for h in 0..dims.n_heads {
                rotate_half(&mut s.q[h * hd..(h + 1) * hd], &s.rot_cos, &s.rot_sin);
                rotate_half(&mut s.k[h * hd..(h + 1) * hd], &s.rot_cos, &s.rot_sin);
            }
            let kv = &mut self.kv[l];
            kv.k.extend_from_slice(&s.k);
            kv.v.extend_from_slice(&s.v);
            attention(
                &s.q,
                &kv.k,
                &kv.v,
                dims.n_heads,
                hd,
                self.pos,
                dims.max_ctx,
                &mut s.scores,
                &mut s.heads_out,
            );
            matvec(&lw.wo, &s.heads_out, dm, &mut s.attn_out);
            for (xv, &a) in s.x.iter_mut().zip(s.attn_out.iter()) {
                *xv += a;
            }

            // MLP sublayer (pre-norm, residual).
            rmsnorm(&s.x, &mut s.normed);
            let active = masks.map(|m| m.layer(l));
            let n_jobs = mlp_forward(
                lw,
                model.activation,
                &s.normed,
                active,
                &mut s.coeff,
                &mut s.partials,
                &mut s.acc,
                &mut s.mlp_out,
            );
            self.mlp_flops += 3 * dm as u64 * n_jobs as u64;

            match observer {
                MlpObserver::None => {}
                MlpObserver::Trace(cfg, trace) => {
                    if cfg.selects(l, self.pos) {
                        let entry = build_trace_entry(
                            cfg, l, self.pos, lw, &s.normed, &s.coeff, active, &s.mlp_out, dm,
                            dims.d_h,
                        );
                        trace.entries.push(entry);
                    }
                }
                MlpObserver::Aggregate(agg) => {
                    // Aggregation is defined over dense magnitudes.
                    debug_assert!(active.is_none());
                    let a_vals: Vec<f32> = (0..dims.d_h)
                        .map(|j| magnitude(lw, s.coeff[j], j))
                        .collect();
                    agg.observe(l, &a_vals);
                }
                MlpObserver::Refresh(tables) => {
                    let table = &mut tables[l];
                    match active {
                        None => {
                            for j in 0..dims.d_h {
                                table[j] = magnitude(lw, s.coeff[j], j);
                            }
                        }
                        Some(list) => {
                            for (idx, &j) in list.iter().enumerate() {
                                table[j as usize] = magnitude(lw, s.coeff[idx], j as usize);
                            }
                        }
                    }
                }
            }

            for (xv, &mval) in s.x.iter_mut().zip(s.mlp_out.iter()) {
                *xv += mval;
            }
        }

        rmsnorm(&s.x, &mut s.normed);
        matvec(&model.output_head, &s.normed, dm, &mut s.logits);
        self.pos += 1;
        Ok(())
    }
}

#[inline]
fn magnitude(lw: &LayerWeights, coeff: f32, j: usize) -> f32 {
    ((coeff as f64).abs() * lw.w_out_col_norms[j]) as f32
}

fn rotate_half(head: &mut [f32], cos: &[f32], sin: &[f32]) {
    let half = cos.len();
    for i in 0..half {
        let a = head[i];
        let b = head[i + half];
        head[i] = a * cos[i] - b * sin[i];
        head[i + half] = a * sin[i] + b * cos[i];
    }
}

#[allow(clippy::too_many_arguments)]
fn attention(
    q: &[f32],
    k_cache: &[f32],
    v_cache: &[f32],
    n_heads: usize,
    hd: usize,
    pos: usize,
    score_stride: usize,
    scores: &mut [f32],
    heads_out: &mut [f32],
) {
    let dm = n_heads * hd;
    let t = pos + 1; // positions attended
    let scale = 1.0 / (hd as f32).sqrt();
    let body = |(h, (out_h, score_h)): (usize, (&mut [f32], &mut [f32]))| {
        let qh = &q[h * hd..(h + 1) * hd];
        for p in 0..t {
            let kh = &k_cache[p * dm + h * hd..p * dm + (h + 1) * hd];
            score_h[p] = dot(qh, kh) * scale;
        }
        // softmax over 0..t
        let mut max = f32::NEG_INFINITY;
        for &sv in &score_h[..t] {
            if sv > max {
                max = sv;
            }
        }
        let mut sum = 0f64;
        for sv in &mut score_h[..t] {
            *sv = (*sv - max).exp();
            sum += *sv as f64;
        }
        let inv = (1.0 / sum) as f32;
        out_h.fill(0.0);
        for p in 0..t {
            let w = score_h[p] * inv;
            let vh = &v_cache[p * dm + h * hd..p * dm + (h + 1) * hd];
            for (o, &vv) in out_h.iter_mut().zip(vh) {
                *o += w * vv;
            }
        }
    };
    #[cfg(feature = "parallel")]
    if 2 * t * dm >= PAR_MIN_WORK {
        use rayon::prelude::*;
        heads_out
            .par_chunks_mut(hd)
            .zip(scores.par_chunks_mut(score_stride))
            .enumerate()
            .for_each(body);
        return;
    }
    heads_out
        .chunks_mut(hd)
        .zip(scores.chunks_mut(score_stride))
        .enumerate()
        .for_each(body);
}

/// Gated-MLP forward over the given neurons (all of them when `active` is
/// `None`). Per-neuron gate coefficients are left in `coeff[..n_jobs]`,
/// indexed by job position. Returns the number of neurons computed.
#[allow(clippy::too_many_arguments)]
fn mlp_forward(
    lw: &LayerWeights,
    act: Activation,
    x: &[f32],
    active: Option<&[u32]>,
    coeff: &mut Vec<f32>,
    partials: &mut Vec<Vec<f32>>,
    acc: &mut [f64],
    out: &mut [f32],
) -> usize {
    let dm = x.len();
    let n_jobs = active.map_or(lw.w_out_col_norms.len(), |a| a.len());
    let n_chunks = n_jobs.div_ceil(MLP_CHUNK).max(1);
    if coeff.len() < n_jobs {
        coeff.resize(n_jobs, 0.0);
    }
    if partials.len() < n_chunks {
        let extra = n_chunks - partials.len();
        partials.extend((0..extra).map(|_| vec![0.0; dm]));
    }

    let chunk_body = |(c, (partial, cslice)): (usize, (&mut Vec<f32>, &mut [f32]))| {
        partial.fill(0.0);
        let base = c * MLP_CHUNK;
        for (off, cf) in cslice.iter_mut().enumerate() {
            let idx = base + off;
            let j = match active {
                Some(list) => list[idx] as usize,
                None => idx,
            };
            let a = dot(&lw.w_in[j * dm..(j + 1) * dm], x);
            let b = dot(&lw.v_in[j * dm..(j + 1) * dm], x);
            let cval = act.apply(a) * b;
            *cf = cval;
            let w_row = &lw.w_out_t[j * dm..(j + 1) * dm];
            for (p, &w) in partial.iter_mut().zip(w_row) {
                *p += cval * w;
            }
        }
    };

    let used_chunks;
    if n_jobs == 0 {
        used_chunks = 0;
    } else {
        used_chunks = n_jobs.div_ceil(MLP_CHUNK);
        let coeff_slice = &mut coeff[..n_jobs];
        #[cfg(feature = "parallel")]
        {
            if n_jobs * dm >= PAR_MIN_WORK {
                use rayon::prelude::*;
                partials[..used_chunks]
                    .par_iter_mut()
                    .zip(coeff_slice.par_chunks_mut(MLP_CHUNK))
                    .enumerate()
                    .for_each(chunk_body);
            } else {
                partials[..used_chunks]
                    .iter_mut()
                    .zip(coeff_slice.chunks_mut(MLP_CHUNK))
                    .enumerate()
                    .for_each(chunk_body);
            }
        }
        #[cfg(not(feature = "parallel"))]
        partials[..used_chunks]
            .iter_mut()
            .zip(coeff_slice.chunks_mut(MLP_CHUNK))
            .enumerate()
            .for_each(chunk_body);
    }

    // Combine chunk partials in chunk order; this fixes the summation tree.
    for a in acc.iter_mut() {
        *a = 0.0;
    }
    for partial in &partials[..used_chunks] {
        for (a, &p) in acc.iter_mut().zip(partial.iter()) {
            *a += p as f64;
        }
    }
    for (o, &a) in out.iter_mut().zip(acc.iter()) {
        *o = a as f32;
    }
    n_jobs
}

#[allow(clippy::too_many_arguments)]
fn build_trace_entry(
    cfg: &TraceConfig,
    layer: usize,
    position: usize,
    lw: &LayerWeights,
    normed: &[f32],
    coeff: &[f32],
    active: Option<&[u32]>,
    mlp_out: &[f32],
    dm: usize,
    dh: usize,
) -> TraceEntry {
    let job_to_neuron = |idx: usize| match active {
        Some(list) => list[idx] as usize,
        None => idx,
    };
    let n_jobs = active.map_or(dh, |a| a.len());
    let magnitudes = cfg.record_magnitudes.then(|| {
        let mut a = vec![0.0f32; dh];
        for idx in 0..n_jobs {
            let j = job_to_neuron(idx);
            a[j] = magnitude(lw, coeff[idx], j);
        }
        a
    });
    let contributions = cfg.retain_contributions.then(|| {
        let mut n = vec![0.0f32; dh * dm];
        for idx in 0..n_jobs {
            let j = job_to_neuron(idx);
            let cval = coeff[idx];
            let w_row = &lw.w_out_t[j * dm..(j + 1) * dm];
            for (slot, &w) in n[j * dm..(j + 1) * dm].iter_mut().zip(w_row) {
                *slot = cval * w;
            }
        }
        n
    });
    TraceEntry {
        layer,
        position,
        mlp_input: cfg.record_inputs.then(|| normed.to_vec()),
        magnitudes,
        mlp_output: cfg.record_outputs.then(|| mlp_out.to_vec()),
        contributions,
    }
}

fn check_sequence(model: &ModelWeights, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("forward over empty sequence".into()));
    }
    if tokens.len() > model.dims.max_ctx {
        return Err(Error::Length(format!(
            "sequence length {} > max_ctx {}",
            tokens.len(),
            model.dims.max_ctx
        )));
    }
    Ok(())
}

/// Full causal forward pass. Returns one logits row per position plus the
/// requested activation trace.
pub fn forward(
    model: &ModelWeights,
    tokens: &[u32],
    trace_cfg: &TraceConfig,
) -> Result<(Vec<Vec<f32>>, ActivationTrace)> {
    check_sequence(model, tokens)?;
    let mut trace = ActivationTrace {
        d_model: model.dims.d_model,
        d_h: model.dims.d_h,
        entries: Vec::new(),
    };
    let mut state = DecodeState::new(model);
    let mut logits = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let mut obs = MlpObserver::Trace(trace_cfg, &mut trace);
        state.step(tok, None, &mut obs)?;
        logits.push(state.logits().to_vec());
    }
    Ok((logits, trace))
}

/// Forward pass with static per-layer neuron masks. Skipped neurons are not
/// computed at all, so cost scales with the active count.
pub fn forward_masked(
    model: &ModelWeights,
    tokens: &[u32],
    masks: &[Vec<bool>],
) -> Result<Vec<Vec<f32>>> {
    check_sequence(model, tokens)?;
    let layer_masks = LayerMasks::from_bools(masks, model.dims.n_layers, model.dims.d_h)?;
    let mut state = DecodeState::new(model);
    let mut logits = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        state.step(tok, Some(&layer_masks), &mut MlpObserver::None)?;
        logits.push(state.logits().to_vec());
    }
    Ok(logits)
}
