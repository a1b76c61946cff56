//! Token-level cognitive-load signals: surprisal of the realized token and
//! entropy of the predictive distribution, both in nats, plus sequence-level
//! min-max normalization and quantile calibration of firing thresholds.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{forward, ModelWeights, TraceConfig};

/// Per-token signals for one sequence of length `T`: index `i` holds the
/// value for target position `i + 1` (the first token has no context).
#[derive(Debug, Clone, PartialEq)]
pub struct CognitiveSignal {
    pub surprisal_raw: Vec<f64>,
    pub entropy_raw: Vec<f64>,
    pub surprisal_norm: Vec<f64>,
    pub entropy_norm: Vec<f64>,
}

impl CognitiveSignal {
    pub fn len(&self) -> usize {
        self.surprisal_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surprisal_raw.is_empty()
    }
}

/// log-sum-exp of a logits row, in f64.
fn lse(logits: &[f32]) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let sum: f64 = logits.iter().map(|&v| ((v as f64) - max).exp()).sum();
    max + sum.ln()
}

/// Negative log probability (nats) of `target` under the softmax of one
/// logits row. Always non-negative.
pub fn surprisal(logits: &[f32], target: u32) -> f64 {
    lse(logits) - logits[target as usize] as f64
}

/// Shannon entropy (nats) of the softmax distribution of one logits row.
/// `0 * log 0` contributes zero. Bounded by `ln(vocab)`.
pub fn entropy(logits: &[f32]) -> f64 {
    let z = lse(logits);
    logits
        .iter()
        .map(|&l| {
            let l = l as f64;
            let p = (l - z).exp();
            p * (z - l)
        })
        .sum()
}

/// Sequence-level min-max normalization into `[0, 1]`; a constant sequence
/// maps to all zeros.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0.0; values.len()];
    }
    let inv = 1.0 / (max - min);
    values.iter().map(|&v| (v - min) * inv).collect()
}

/// Surprisal and entropy at every position with a predecessor context,
/// from a single forward pass. Needs at least two tokens.
pub fn signal_for_sequence(model: &ModelWeights, tokens: &[u32]) -> Result<CognitiveSignal> {
    if tokens.len() < 2 {
        return Err(Error::InsufficientData(
            "surprisal needs a predecessor context (sequence length < 2)".into(),
        ));
    }
    let (logits, _) = forward(model, tokens, &TraceConfig::disabled())?;
    let mut s = Vec::with_capacity(tokens.len() - 1);
    let mut h = Vec::with_capacity(tokens.len() - 1);
    for t in 1..tokens.len() {
        let row = &logits[t - 1];
        s.push(surprisal(row, tokens[t]));
        h.push(entropy(row));
    }
    let surprisal_norm = normalize(&s);
    let entropy_norm = normalize(&h);
    Ok(CognitiveSignal {
        surprisal_raw: s,
        entropy_raw: h,
        surprisal_norm,
        entropy_norm,
    })
}

/// Interpolating (type-7) empirical quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Pool normalized signals over a calibration corpus and return the
/// `(q_s, q_h)` quantiles as universal firing thresholds.
pub fn calibrate_thresholds(
    signals: &[CognitiveSignal],
    q_s: f64,
    q_h: f64,
) -> Result<(f64, f64)> {
    for (name, q) in [("q_s", q_s), ("q_h", q_h)] {
        if !(0.0 < q && q < 1.0) {
            return Err(Error::Dimension(format!("{name} must be in (0, 1), got {q}")));
        }
    }
    let pooled_s: Vec<f64> = signals.iter().flat_map(|s| s.surprisal_norm.iter().copied()).collect();
    let pooled_h: Vec<f64> = signals.iter().flat_map(|s| s.entropy_norm.iter().copied()).collect();
    if pooled_s.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "threshold calibration needs >= 10 tokens of signal, got {}",
            pooled_s.len()
        )));
    }
    Ok((quantile(&pooled_s, q_s), quantile(&pooled_h, q_h)))
}

/// Dump signals as CSV:
/// `sequence_id,position,surprisal_raw,entropy_raw,surprisal_norm,entropy_norm`.
pub fn write_signals_csv(
    entries: &[(String, CognitiveSignal)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "sequence_id,position,surprisal_raw,entropy_raw,surprisal_norm,entropy_norm"
    )?;
    for (id, sig) in entries {
        for i in 0..sig.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                id,
                i + 1,
                sig.surprisal_raw[i],
                sig.entropy_raw[i],
                sig.surprisal_norm[i],
                sig.entropy_norm[i]
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_random_model, ModelDims};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain-softmax reference implementation kept independent of the
    /// closed-form production path.
    fn brute_force(logits: &[f32], target: usize) -> (f64, f64) {
        let exps: Vec<f64> = logits.iter().map(|&l| (l as f64).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let s = -probs[target].max(1e-30).ln();
        let h = -probs
            .iter()
            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
            .sum::<f64>();
        (s, h)
    }

    #[test]
    fn uniform_row_hits_log_vocab() {
        let row = vec![0.25f32; 256];
        let expect = 256f64.ln();
        assert!((surprisal(&row, 17) - expect).abs() < 1e-9);
        assert!((entropy(&row) - expect).abs() < 1e-9);
    }

    #[test]
    fn peaked_row_is_near_zero() {
        let mut row = vec![0.0f32; 64];
        row[5] = 60.0;
        assert!(surprisal(&row, 5) < 1e-9);
        assert!(entropy(&row) < 1e-9);
    }

    #[test]
    fn matches_brute_force_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let row: Vec<f32> = (0..97).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let target = rng.gen_range(0..97usize);
            let (s_ref, h_ref) = brute_force(&row, target);
            assert!((surprisal(&row, target as u32) - s_ref).abs() < 1e-6);
            assert!((entropy(&row) - h_ref).abs() < 1e-6);
        }
    }

    #[test]
    fn entropy_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row: Vec<f32> = (0..64).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let shifted: Vec<f32> = row.iter().map(|&v| v + 7.5).collect();
        assert!((entropy(&row) - entropy(&shifted)).abs() < 1e-6);
    }

    #[test]
    fn argmax_token_has_minimal_surprisal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let row: Vec<f32> = (0..32).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0 as u32;
        let s_best = surprisal(&row, argmax);
        for t in 0..32 {
            assert!(s_best <= surprisal(&row, t) + 1e-12);
        }
    }

    #[test]
    fn normalize_basic_cases() {
        assert_eq!(normalize(&[1.0, 3.0]), vec![0.0, 1.0]);
        assert_eq!(normalize(&[2.0, 2.0, 2.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn signal_shapes_and_determinism() {
        let dims = ModelDims {
            n_layers: 2,
            d_model: 16,
            d_h: 32,
            n_heads: 2,
            vocab_size: 32,
            max_ctx: 32,
        };
        let m = gen_random_model(5, dims).unwrap();
        let tokens: Vec<u32> = (0..12).map(|i| (i * 3 + 1) % 32).collect();
        let a = signal_for_sequence(&m, &tokens).unwrap();
        let b = signal_for_sequence(&m, &tokens).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), tokens.len() - 1);
        assert!(a.surprisal_raw.iter().all(|&s| s >= 0.0));
        let bound = (dims.vocab_size as f64).ln() + 1e-9;
        assert!(a.entropy_raw.iter().all(|&h| (0.0..=bound).contains(&h)));
        assert!(signal_for_sequence(&m, &[1]).is_err());
    }

    #[test]
    fn repetition_model_sees_low_surprisal() {
        // Zero the attention output and every MLP output column, then point
        // the head at the embedding table: the residual stream carries the
        // current token's embedding straight to the logits, so the model
        // votes for repeating the previous token.
        let dims = ModelDims {
            n_layers: 2,
            d_model: 32,
            d_h: 32,
            n_heads: 2,
            vocab_size: 32,
            max_ctx: 32,
        };
        let mut m = gen_random_model(21, dims).unwrap();
        for lw in &mut m.layers {
            lw.wo.fill(0.0);
            lw.w_out_t.fill(0.0);
            lw.refresh_norms(dims.d_h, dims.d_model);
        }
        m.output_head = m.token_embedding.clone();
        let tokens = vec![7u32; 16];
        let sig = signal_for_sequence(&m, &tokens).unwrap();
        let mean_s: f64 = sig.surprisal_raw.iter().sum::<f64>() / sig.len() as f64;
        assert!(
            mean_s < 0.5,
            "repetition should be predictable, mean surprisal {mean_s}"
        );
    }

    #[test]
    fn quantile_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..1.0)).collect();
        // independent oracle: sort, then interpolate between closest ranks
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = 0.75;
        let h = q * (sorted.len() - 1) as f64;
        let expect = sorted[h.floor() as usize]
            + (h - h.floor()) * (sorted[h.floor() as usize + 1] - sorted[h.floor() as usize]);
        assert!((quantile(&values, q) - expect).abs() < 1e-12);
        assert_eq!(quantile(&[0.0, 0.5, 1.0], 0.5), 0.5);
    }

    #[test]
    fn calibration_needs_data_and_valid_quantiles() {
        let sig = CognitiveSignal {
            surprisal_raw: vec![1.0; 4],
            entropy_raw: vec![1.0; 4],
            surprisal_norm: vec![0.5; 4],
            entropy_norm: vec![0.5; 4],
        };
        assert!(calibrate_thresholds(&[sig.clone()], 0.75, 0.75).is_err());
        assert!(calibrate_thresholds(&[sig.clone(), sig.clone(), sig.clone()], 1.5, 0.5).is_err());
        let ok = calibrate_thresholds(&[sig.clone(), sig.clone(), sig], 0.5, 0.5).unwrap();
        assert_eq!(ok, (0.5, 0.5));
    }

    proptest! {
        #[test]
        fn normalize_bounds_and_order(values in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
            let out = normalize(&values);
            prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] < values[j] {
                        prop_assert!(out[i] <= out[j]);
                    }
                }
            }
            // idempotent when the input already spans [0, 1]
            let twice = normalize(&out);
            if out.iter().any(|&v| v != out[0]) {
                for (a, b) in twice.iter().zip(&out) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
