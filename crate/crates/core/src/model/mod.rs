//! Minimal deterministic CPU transformer: decoder-only, pre-norm, rotary
//! attention, gated MLP. Weights live in plain `Vec<f32>` row-major tensors
//! so every downstream computation is reproducible bit for bit.

mod forward;
mod io;
mod tokenizer;

pub use forward::{
    forward, forward_masked, ActivationTrace, DecodeState, LayerMasks, MagnitudeAggregator,
    MlpObserver, TraceConfig, TraceEntry,
};
pub(crate) use forward::dot;
pub use io::{load_model, save_model};
pub use tokenizer::{detokenize, tokenize, BOS_TOKEN, BYTE_VOCAB, EOS_TOKEN, VOCAB_WITH_SPECIALS};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise nonlinearity of the gated MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                // tanh approximation
                let x3 = x * x * x;
                0.5 * x * (1.0 + (0.797_884_56 * (x + 0.044_715 * x3)).tanh())
            }
        }
    }

    pub(crate) fn to_u8(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Relu => 1,
            Activation::Gelu => 2,
        }
    }

    pub(crate) fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Activation::Silu),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Gelu),
            other => Err(Error::format(
                "activation_fn",
                format!("unknown activation code {other}"),
            )),
        }
    }
}

/// Shape parameters of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_layers: usize,
    pub d_model: usize,
    /// MLP hidden width (neurons per layer), uniform across layers.
    pub d_h: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_ctx: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_h", self.d_h),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_ctx", self.max_ctx),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Dimension(format!("{name} must be >= 1")));
            }
            if v > u32::MAX as usize {
                return Err(Error::Dimension(format!("{name} overflows u32")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Dimension("vocab_size must be >= 2".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Dimension(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        // Guard the largest per-layer allocation.
        self.d_h
            .checked_mul(self.d_model)
            .ok_or_else(|| Error::Dimension("d_h * d_model overflows".into()))?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One transformer layer's tensors.
///
/// `w_out_t` stores the output projection transposed (`d_h x d_model`
/// row-major, row `j` = the output column of neuron `j`) so that per-neuron
/// contributions are contiguous. On disk it is laid out `d_model x d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub w_in: Vec<f32>,
    pub v_in: Vec<f32>,
    pub w_out_t: Vec<f32>,
    /// Euclidean norm of each neuron's output column, derived at build time.
    pub(crate) w_out_col_norms: Vec<f64>,
}

impl LayerWeights {
    fn compute_col_norms(w_out_t: &[f32], d_h: usize, d_model: usize) -> Vec<f64> {
        (0..d_h)
            .map(|j| {
                let row = &w_out_t[j * d_model..(j + 1) * d_model];
                row.iter().map(|&w| (w as f64) * (w as f64)).sum::<f64>().sqrt()
            })
            .collect()
    }

    /// Rebuild derived data after mutating `w_out_t`.
    pub(crate) fn refresh_norms(&mut self, d_h: usize, d_model: usize) {
        self.w_out_col_norms = Self::compute_col_norms(&self.w_out_t, d_h, d_model);
    }

    pub fn w_out_col_norm(&self, j: usize) -> f64 {
        self.w_out_col_norms[j]
    }
}

/// A full model: dimensions, tensors, tokenizer-facing vocabulary size, and
/// the RNG seed it was generated from (provenance only).
///
/// Immutable after construction; forward passes over shared references are
/// safe to run concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub dims: ModelDims,
    /// `vocab_size x d_model` row-major.
    pub token_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    /// `vocab_size x d_model` row-major.
    pub output_head: Vec<f32>,
    pub activation: Activation,
    pub rng_seed: u32,
}

/// Raw per-layer tensors accepted by [`ModelWeights::from_parts`].
#[derive(Debug, Clone)]
pub struct LayerTensors {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub w_in: Vec<f32>,
    pub v_in: Vec<f32>,
    /// Transposed output projection, `d_h x d_model` row-major.
    pub w_out_t: Vec<f32>,
}

fn check_tensor(name: &str, data: &[f32], expect: usize) -> Result<()> {
    if data.len() != expect {
        return Err(Error::Dimension(format!(
            "tensor {name}: expected {expect} elements, got {}",
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(name, "non-finite value"));
    }
    Ok(())
}

impl ModelWeights {
    /// Build and validate a model from raw tensors.
    pub fn from_parts(
        dims: ModelDims,
        token_embedding: Vec<f32>,
        layers: Vec<LayerTensors>,
        output_head: Vec<f32>,
        activation: Activation,
        rng_seed: u32,
    ) -> Result<Self> {
        dims.validate()?;
        if layers.len() != dims.n_layers {
            return Err(Error::Dimension(format!(
                "expected {} layers, got {}",
                dims.n_layers,
                layers.len()
            )));
        }
        let dm = dims.d_model;
        let dh = dims.d_h;
        check_tensor("token_embedding", &token_embedding, dims.vocab_size * dm)?;
        check_tensor("output_head", &output_head, dims.vocab_size * dm)?;
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(l, t)| {
                check_tensor(&format!("layers.{l}.attn.wq"), &t.wq, dm * dm)?;
                check_tensor(&format!("layers.{l}.attn.wk"), &t.wk, dm * dm)?;
                check_tensor(&format!("layers.{l}.attn.wv"), &t.wv, dm * dm)?;
                check_tensor(&format!("layers.{l}.attn.wo"), &t.wo, dm * dm)?;
                check_tensor(&format!("layers.{l}.mlp.w_in"), &t.w_in, dh * dm)?;
                check_tensor(&format!("layers.{l}.mlp.v_in"), &t.v_in, dh * dm)?;
                check_tensor(&format!("layers.{l}.mlp.w_out"), &t.w_out_t, dh * dm)?;
                let norms = LayerWeights::compute_col_norms(&t.w_out_t, dh, dm);
                Ok(LayerWeights {
                    wq: t.wq,
                    wk: t.wk,
                    wv: t.wv,
                    wo: t.wo,
                    w_in: t.w_in,
                    v_in: t.v_in,
                    w_out_t: t.w_out_t,
                    w_out_col_norms: norms,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelWeights {
            dims,
            token_embedding,
            layers,
            output_head,
            activation,
            rng_seed,
        })
    }
}

fn fill_uniform(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Generate a model with uniform random weights, fully determined by `seed`.
///
/// Every tensor entry is drawn i.i.d. from `U(-b, b)` with `b = sqrt(3 /
/// fan_in)` (unit embedding scale), in a fixed documented order: embedding,
/// then per layer wq, wk, wv, wo, w_in, v_in, w_out (neuron-major), then the
/// output head. Same seed and dims give bit-identical weights.
pub fn gen_random_model(seed: u32, dims: ModelDims) -> Result<ModelWeights> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let dm = dims.d_model;
    let dh = dims.d_h;
    let b_model = (3.0 / dm as f32).sqrt();
    let b_hidden = (3.0 / dh as f32).sqrt();

    let token_embedding = fill_uniform(&mut rng, dims.vocab_size * dm, 1.0);
    let mut layers = Vec::with_capacity(dims.n_layers);
    for _ in 0..dims.n_layers {
        layers.push(LayerTensors {
            wq: fill_uniform(&mut rng, dm * dm, b_model),
            wk: fill_uniform(&mut rng, dm * dm, b_model),
            wv: fill_uniform(&mut rng, dm * dm, b_model),
            wo: fill_uniform(&mut rng, dm * dm, b_model),
            w_in: fill_uniform(&mut rng, dh * dm, b_model),
            v_in: fill_uniform(&mut rng, dh * dm, b_model),
            w_out_t: fill_uniform(&mut rng, dh * dm, b_hidden),
        });
    }
    let output_head = fill_uniform(&mut rng, dims.vocab_size * dm, b_model);
    ModelWeights::from_parts(dims, token_embedding, layers, output_head, Activation::Silu, seed)
}

/// Zero the output columns of a seed-chosen fraction of one layer's neurons,
/// returning the modified copy and the planted index set (sorted).
///
/// A zeroed output column makes the neuron's contribution identically zero,
/// so the planted set is redundant by construction.
pub fn plant_dead_neurons(
    model: &ModelWeights,
    layer: usize,
    fraction: f64,
    seed: u32,
) -> Result<(ModelWeights, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Dimension(format!(
            "fraction must be in [0, 1], got {fraction}"
        )));
    }
    if layer >= model.dims.n_layers {
        return Err(Error::Index(format!(
            "layer {layer} out of range (n_layers = {})",
            model.dims.n_layers
        )));
    }
    let dh = model.dims.d_h;
    let dm = model.dims.d_model;
    let k = (fraction * dh as f64).ceil() as usize;
    let mut indices: Vec<usize> = (0..dh).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    // Fisher-Yates prefix shuffle: the first k slots are the sample.
    for i in 0..k.min(dh.saturating_sub(1)) {
        let swap = rng.gen_range(i..dh);
        indices.swap(i, swap);
    }
    let mut planted: Vec<usize> = indices[..k].to_vec();
    planted.sort_unstable();

    let mut out = model.clone();
    {
        let lw = &mut out.layers[layer];
        for &j in &planted {
            lw.w_out_t[j * dm..(j + 1) * dm].fill(0.0);
        }
        lw.refresh_norms(dh, dm);
    }
    Ok((out, planted))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> ModelDims {
        ModelDims {
            n_layers: 2,
            d_model: 16,
            d_h: 64,
            n_heads: 2,
            vocab_size: 32,
            max_ctx: 64,
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = gen_random_model(7, small_dims()).unwrap();
        let b = gen_random_model(7, small_dims()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_differs() {
        let a = gen_random_model(7, small_dims()).unwrap();
        let b = gen_random_model(8, small_dims()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_dim_rejected() {
        let mut dims = small_dims();
        dims.d_model = 0;
        assert!(matches!(gen_random_model(1, dims), Err(Error::Dimension(_))));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut dims = small_dims();
        dims.n_heads = 3;
        assert!(gen_random_model(1, dims).is_err());
    }

    #[test]
    fn plant_zero_fraction_is_identity() {
        let m = gen_random_model(3, small_dims()).unwrap();
        let (planted, set) = plant_dead_neurons(&m, 0, 0.0, 9).unwrap();
        assert!(set.is_empty());
        assert_eq!(m, planted);
    }

    #[test]
    fn plant_half_zeroes_exact_count() {
        let m = gen_random_model(3, small_dims()).unwrap();
        let (planted, set) = plant_dead_neurons(&m, 1, 0.5, 9).unwrap();
        assert_eq!(set.len(), 32);
        let dm = m.dims.d_model;
        let zero_cols = (0..m.dims.d_h)
            .filter(|&j| {
                planted.layers[1].w_out_t[j * dm..(j + 1) * dm]
                    .iter()
                    .all(|&w| w == 0.0)
            })
            .count();
        assert_eq!(zero_cols, 32);
        for &j in &set {
            assert_eq!(planted.layers[1].w_out_col_norm(j), 0.0);
        }
    }

    #[test]
    fn plant_layer_out_of_range() {
        let m = gen_random_model(3, small_dims()).unwrap();
        assert!(matches!(
            plant_dead_neurons(&m, 5, 0.5, 9),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn plant_is_deterministic() {
        let m = gen_random_model(3, small_dims()).unwrap();
        let (a, sa) = plant_dead_neurons(&m, 0, 0.25, 42).unwrap();
        let (b, sb) = plant_dead_neurons(&m, 0, 0.25, 42).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a, b);
    }
}
