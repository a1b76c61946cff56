//! Prefix-flocking experiment apparatus: frequency-matched random token
//! sequences, hybrid prefix replacement, activation-matrix extraction at a
//! probe position, similarity kernels, and panel/heatmap export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cogload;
use crate::corpus::{Corpus, CorpusSequence};
use crate::error::{Error, Result};
use crate::model::{forward, ModelWeights, TraceConfig};
use crate::par;

/// Similarity kernel choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cka,
    Cosine,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cka" => Ok(Metric::Cka),
            "cos" | "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Dimension(format!("unknown metric `{other}`"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Cka => write!(f, "cka"),
            Metric::Cosine => write!(f, "cos"),
        }
    }
}

/// Parameters of one hybrid construction.
#[derive(Debug, Clone)]
pub struct HybridSpec {
    /// Replaced-prefix ratio, in `(0, 1]`.
    pub alpha: f64,
    pub seq_len: usize,
    /// Token index probed for the activation matrix; `seq_len` means the
    /// next-token position reached by one greedy continuation step.
    pub probe_position: usize,
    pub source_a: String,
    pub source_b: String,
}

impl HybridSpec {
    pub fn prefix_len(&self) -> usize {
        (self.seq_len as f64 * self.alpha).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha <= 1.0) {
            return Err(Error::Dimension(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.prefix_len() > self.seq_len {
            return Err(Error::Dimension("prefix exceeds sequence length".into()));
        }
        Ok(())
    }
}

/// Per-neuron contribution matrix at one probe point, `d_h x d_model`
/// row-major (row `j` = neuron `j`'s output contribution).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub layer: usize,
    pub position: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl ActivationMatrix {
    pub fn row(&self, j: usize) -> &[f32] {
        &self.data[j * self.cols..(j + 1) * self.cols]
    }
}

/// Sample `count` sequences of `length` tokens i.i.d. from the corpus
/// unigram distribution. Deterministic in `seed`; the output frequency
/// profile converges to the corpus profile as the sample grows.
pub fn make_rts(
    corpus: &Corpus,
    seed: u32,
    length: usize,
    count: usize,
) -> Result<Vec<CorpusSequence>> {
    if corpus.is_empty() || corpus.total_tokens() == 0 {
        return Err(Error::EmptyInput(
            "cannot build random token sequences from an empty corpus".into(),
        ));
    }
    let counts = corpus.unigram_counts();
    let dist = WeightedIndex::new(counts.iter().map(|&c| c as f64))
        .map_err(|e| Error::Dimension(format!("bad unigram weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    Ok((0..count)
        .map(|i| CorpusSequence {
            id: format!("rts-{i:04}"),
            group: "RTS".into(),
            tokens: (0..length).map(|_| dist.sample(&mut rng) as u32).collect(),
        })
        .collect())
}

/// Replace the first `ceil(len * alpha)` tokens of `a` with `b`'s.
pub fn make_hybrid(a: &[u32], b: &[u32], alpha: f64) -> Result<Vec<u32>> {
    if a.len() != b.len() {
        return Err(Error::Length(format!(
            "sequence lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if !(0.0 < alpha && alpha <= 1.0) {
        return Err(Error::Dimension(format!("alpha must be in (0, 1], got {alpha}")));
    }
    let ell = (a.len() as f64 * alpha).ceil() as usize;
    let mut out = Vec::with_capacity(a.len());
    out.extend_from_slice(&b[..ell]);
    out.extend_from_slice(&a[ell..]);
    Ok(out)
}

/// Extract the contribution matrix at `(layer, position)`.
///
/// `position == tokens.len()` probes the next-token position: the sequence
/// is extended by one greedy continuation step first.
pub fn extract_activation_matrix(
    model: &ModelWeights,
    tokens: &[u32],
    layer: usize,
    position: usize,
) -> Result<ActivationMatrix> {
    if layer >= model.dims.n_layers {
        return Err(Error::Index(format!(
            "layer {layer} out of range (n_layers = {})",
            model.dims.n_layers
        )));
    }
    if position > tokens.len() {
        return Err(Error::Index(format!(
            "probe position {position} beyond sequence length {}",
            tokens.len()
        )));
    }
    let probe_tokens;
    let input: &[u32] = if position == tokens.len() {
        let (logits, _) = forward(model, tokens, &TraceConfig::disabled())?;
        let last = logits.last().expect("non-empty forward");
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for (i, &v) in last.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        let mut extended = tokens.to_vec();
        extended.push(best as u32);
        probe_tokens = extended;
        &probe_tokens
    } else {
        tokens
    };
    let cfg = TraceConfig::contributions_at(layer, position);
    let (_, trace) = forward(model, input, &cfg)?;
    let entry = trace
        .entry(layer, position)
        .ok_or_else(|| Error::Index(format!("trace missing ({layer}, {position})")))?;
    Ok(ActivationMatrix {
        layer,
        position,
        rows: model.dims.d_h,
        cols: model.dims.d_model,
        data: entry.contributions.clone().expect("contributions retained"),
    })
}

fn check_same_shape(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<()> {
    if x.rows != y.rows || x.cols != y.cols {
        return Err(Error::Dimension(format!(
            "matrix shapes differ: {}x{} vs {}x{}",
            x.rows, x.cols, y.rows, y.cols
        )));
    }
    Ok(())
}

fn frob_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Cross-product matrix `X^T Y`, `cols x cols` in f64.
fn gram(x: &ActivationMatrix, y: &ActivationMatrix) -> Vec<f64> {
    let cols = x.cols;
    let mut c = vec![0.0f64; cols * cols];
    for j in 0..x.rows {
        let xr = x.row(j);
        let yr = y.row(j);
        for (a, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let xv = xv as f64;
            let crow = &mut c[a * cols..(a + 1) * cols];
            for (cslot, &yv) in crow.iter_mut().zip(yr) {
                *cslot += xv * yv as f64;
            }
        }
    }
    c
}

/// Alignment similarity between two matrices:
/// `|X^T Y|_F^2 / (|X^T X|_F * |Y^T Y|_F)`. Lies in `[0, 1]` and is
/// invariant to rescaling either argument.
pub fn cka(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    check_same_shape(x, y)?;
    let xx = frob_sq(&gram(x, x)).sqrt();
    let yy = frob_sq(&gram(y, y)).sqrt();
    if xx < 1e-30 || yy < 1e-30 {
        return Err(Error::DegenerateInput("zero matrix in cka".into()));
    }
    let xy = frob_sq(&gram(x, y));
    Ok(xy / (xx * yy))
}

/// Cosine similarity of the flattened matrices, in `[-1, 1]`.
pub fn cosine(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    check_same_shape(x, y)?;
    let mut dot = 0.0f64;
    let mut nx = 0.0f64;
    let mut ny = 0.0f64;
    for (&a, &b) in x.data.iter().zip(&y.data) {
        dot += a as f64 * b as f64;
        nx += (a as f64) * (a as f64);
        ny += (b as f64) * (b as f64);
    }
    if nx < 1e-60 || ny < 1e-60 {
        return Err(Error::DegenerateInput("zero matrix in cosine".into()));
    }
    Ok(dot / (nx.sqrt() * ny.sqrt()))
}

pub fn similarity(metric: Metric, x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    match metric {
        Metric::Cka => cka(x, y),
        Metric::Cosine => cosine(x, y),
    }
}

/// Relative similarity shift caused by prefix replacement:
/// `sim(MA', MB) / sim(MA, MB) - 1`.
pub fn delta_sim(
    ma: &ActivationMatrix,
    mb: &ActivationMatrix,
    ma_prime: &ActivationMatrix,
    metric: Metric,
) -> Result<f64> {
    let base = similarity(metric, ma, mb)?;
    if base.abs() < 1e-12 {
        return Err(Error::DegenerateDenominator(
            "baseline similarity is numerically zero".into(),
        ));
    }
    let shifted = similarity(metric, ma_prime, mb)?;
    Ok(shifted / base - 1.0)
}

/// One panel row of the flocking experiment.
#[derive(Debug, Clone)]
pub struct PanelRow {
    pub pair_id: String,
    pub group: String,
    pub metric: String,
    pub alpha: f64,
    pub prefix_len: usize,
    pub token_len: usize,
    pub surprisal_mean_norm: f64,
    pub entropy_mean_norm: f64,
    pub delta_sim: f64,
}

/// Sequence group used in the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlockGroup {
    Nls,
    Rts,
}

impl std::fmt::Display for FlockGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FlockGroup::Nls => write!(f, "NLS"),
            FlockGroup::Rts => write!(f, "RTS"),
        }
    }
}

/// Flocking experiment configuration.
#[derive(Debug, Clone)]
pub struct FlockingConfig {
    pub alphas: Vec<f64>,
    pub n_pairs: usize,
    pub seq_len: usize,
    /// Probed layer; defaults to the middle one.
    pub layer: Option<usize>,
    pub seed: u32,
    pub groups: Vec<FlockGroup>,
}

impl Default for FlockingConfig {
    fn default() -> Self {
        FlockingConfig {
            alphas: vec![0.25, 0.30, 0.35, 0.40, 0.45, 0.50],
            n_pairs: 50,
            seq_len: 256,
            layer: None,
            seed: 7,
            groups: vec![FlockGroup::Nls, FlockGroup::Rts],
        }
    }
}

/// Run the prefix-replacement experiment: for every pair and ratio, build
/// the hybrid, extract the three activation matrices at the probe position,
/// and record the similarity shift under both kernels together with the
/// hybrid's mean normalized cognitive signals.
pub fn run_flocking_experiment(
    model: &ModelWeights,
    corpus: &Corpus,
    cfg: &FlockingConfig,
) -> Result<Vec<PanelRow>> {
    if cfg.alphas.is_empty() || cfg.groups.is_empty() || cfg.n_pairs == 0 {
        return Err(Error::EmptyInput("empty alphas/groups/pairs".into()));
    }
    for &a in &cfg.alphas {
        if !(0.0 < a && a <= 1.0) {
            return Err(Error::Dimension(format!("alpha {a} outside (0, 1]")));
        }
    }
    let l_probe = cfg.layer.unwrap_or(model.dims.n_layers / 2);
    if l_probe >= model.dims.n_layers {
        return Err(Error::Index(format!("layer {l_probe} out of range")));
    }
    if cfg.seq_len + 1 > model.dims.max_ctx {
        return Err(Error::Length(format!(
            "probe needs seq_len + 1 = {} <= max_ctx {}",
            cfg.seq_len + 1,
            model.dims.max_ctx
        )));
    }

    // Natural sequences come straight from the corpus; random ones are
    // frequency-matched samples from its unigram distribution.
    let nls: Vec<Vec<u32>> = corpus
        .sequences
        .iter()
        .filter(|s| s.tokens.len() >= cfg.seq_len)
        .take(2 * cfg.n_pairs)
        .map(|s| s.tokens[..cfg.seq_len].to_vec())
        .collect();
    if cfg.groups.contains(&FlockGroup::Nls) && nls.len() < 2 * cfg.n_pairs {
        return Err(Error::InsufficientData(format!(
            "need {} sequences of length >= {}, corpus provides {}",
            2 * cfg.n_pairs,
            cfg.seq_len,
            nls.len()
        )));
    }
    let rts: Vec<Vec<u32>> = if cfg.groups.contains(&FlockGroup::Rts) {
        make_rts(corpus, cfg.seed, cfg.seq_len, 2 * cfg.n_pairs)?
            .into_iter()
            .map(|s| s.tokens)
            .collect()
    } else {
        Vec::new()
    };

    // One task per (group, pair); each task sweeps all ratios.
    let mut tasks: Vec<(FlockGroup, usize)> = Vec::new();
    for &g in &cfg.groups {
        for p in 0..cfg.n_pairs {
            tasks.push((g, p));
        }
    }

    let results = par::map_indexed(tasks.len(), |t| -> Result<Vec<PanelRow>> {
        let (group, pair) = tasks[t];
        let pool = match group {
            FlockGroup::Nls => &nls,
            FlockGroup::Rts => &rts,
        };
        let a_seq = &pool[2 * pair];
        let b_seq = &pool[2 * pair + 1];
        let probe = cfg.seq_len;
        let ma = extract_activation_matrix(model, a_seq, l_probe, probe)?;
        let mb = extract_activation_matrix(model, b_seq, l_probe, probe)?;
        let mut rows = Vec::with_capacity(cfg.alphas.len() * 2);
        for &alpha in &cfg.alphas {
            let hybrid = make_hybrid(a_seq, b_seq, alpha)?;
            let ma_prime = extract_activation_matrix(model, &hybrid, l_probe, probe)?;
            let signal = cogload::signal_for_sequence(model, &hybrid)?;
            let n = signal.len().max(1) as f64;
            let s_mean = signal.surprisal_norm.iter().sum::<f64>() / n;
            let h_mean = signal.entropy_norm.iter().sum::<f64>() / n;
            let prefix_len = (cfg.seq_len as f64 * alpha).ceil() as usize;
            for metric in [Metric::Cka, Metric::Cosine] {
                let d = delta_sim(&ma, &mb, &ma_prime, metric)?;
                rows.push(PanelRow {
                    pair_id: format!("p{pair:04}"),
                    group: group.to_string(),
                    metric: metric.to_string(),
                    alpha,
                    prefix_len,
                    token_len: cfg.seq_len,
                    surprisal_mean_norm: s_mean,
                    entropy_mean_norm: h_mean,
                    delta_sim: d,
                });
            }
        }
        Ok(rows)
    });

    let mut rows: Vec<PanelRow> = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    // scheduling-independent output order
    rows.sort_by(|a, b| {
        a.pair_id
            .cmp(&b.pair_id)
            .then(a.group.cmp(&b.group))
            .then(a.alpha.partial_cmp(&b.alpha).unwrap())
            .then(a.metric.cmp(&b.metric))
    });
    Ok(rows)
}

/// Panel CSV writer (schema consumed by the regression frontend).
pub fn write_panel_csv(rows: &[PanelRow], path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "pair_id,group,metric,alpha,prefix_len,token_len,surprisal_mean_norm,entropy_mean_norm,delta_sim"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.pair_id,
            r.group,
            r.metric,
            r.alpha,
            r.prefix_len,
            r.token_len,
            r.surprisal_mean_norm,
            r.entropy_mean_norm,
            r.delta_sim
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Where the pairwise-similarity probe sits in each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbePosition {
    /// Same absolute token index for every sample.
    Fixed(usize),
    /// Each sample's next-token position (one greedy continuation step).
    End,
}

/// Pairwise similarity matrix over samples; symmetric with unit diagonal.
pub fn pairwise_similarity(
    model: &ModelWeights,
    samples: &[Vec<u32>],
    layer: usize,
    position: ProbePosition,
    metric: Metric,
) -> Result<Vec<Vec<f64>>> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(
            "pairwise similarity needs at least 2 samples".into(),
        ));
    }
    let matrices = par::map_indexed(samples.len(), |i| {
        let pos = match position {
            ProbePosition::Fixed(p) => p,
            ProbePosition::End => samples[i].len(),
        };
        extract_activation_matrix(model, &samples[i], layer, pos)
    });
    let matrices: Vec<ActivationMatrix> = matrices.into_iter().collect::<Result<_>>()?;

    let n = matrices.len();
    let mut s = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = similarity(metric, &matrices[i], &matrices[j])
                .map_err(|e| Error::DegenerateInput(format!("samples ({i}, {j}): {e}")))?;
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    Ok(s)
}

/// A rows-by-cols value grid for export.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn from_matrix(m: &[Vec<f64>]) -> Result<Self> {
        if m.is_empty() || m[0].is_empty() {
            return Err(Error::EmptyInput("empty heatmap".into()));
        }
        let cols = m[0].len();
        if m.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged heatmap rows".into()));
        }
        Ok(Heatmap {
            rows: m.len(),
            cols,
            values: m.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    /// Token-by-neuron magnitude grid from a traced forward pass.
    pub fn from_trace_magnitudes(
        trace: &crate::model::ActivationTrace,
        layer: usize,
    ) -> Result<Self> {
        let mut rows: Vec<(usize, &Vec<f32>)> = trace
            .entries
            .iter()
            .filter(|e| e.layer == layer)
            .filter_map(|e| e.magnitudes.as_ref().map(|m| (e.position, m)))
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptyInput(format!(
                "trace has no magnitudes for layer {layer}"
            )));
        }
        rows.sort_by_key(|(p, _)| *p);
        let cols = rows[0].1.len();
        Ok(Heatmap {
            rows: rows.len(),
            cols,
            values: rows
                .iter()
                .flat_map(|(_, m)| m.iter().map(|&v| v as f64))
                .collect(),
        })
    }

    /// Min-max scale into `0..=255` (constant grids map to zero).
    pub fn to_bytes(&self) -> Vec<u8> {
        let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max <= min {
            return vec![0u8; self.values.len()];
        }
        let scale = 255.0 / (max - min);
        self.values
            .iter()
            .map(|&v| ((v - min) * scale).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Write a heatmap as CSV (rows = tokens, columns = neurons) and optionally
/// as a binary greyscale PGM for quick viewing.
pub fn export_heatmap(
    map: &Heatmap,
    csv_path: impl AsRef<Path>,
    pgm_path: Option<&Path>,
) -> Result<()> {
    let file = File::create(csv_path.as_ref())?;
    let mut w = BufWriter::new(file);
    for r in 0..map.rows {
        let row = &map.values[r * map.cols..(r + 1) * map.cols];
        let line = row
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(w, "{line}")?;
    }
    w.flush()?;

    if let Some(pgm) = pgm_path {
        let mut f = BufWriter::new(File::create(pgm)?);
        write!(f, "P5\n{} {}\n255\n", map.cols, map.rows)?;
        f.write_all(&map.to_bytes())?;
        f.flush()?;
    }
    Ok(())
}
