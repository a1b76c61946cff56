//! Binary weight-file format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   "CLDA" (4 bytes)
//! version u32 = 1
//! dims    7 x u32: n_layers, d_model, d_h, n_heads, vocab_size, max_ctx, rng_seed
//! act     u8 (0 = silu, 1 = relu, 2 = gelu)
//! tensors fixed order, each: name_len u32, name bytes, then f32 data row-major
//! ```
//!
//! Tensor order: `token_embedding` (`vocab x d_model`); per layer `l`:
//! `layers.<l>.attn.wq|wk|wv|wo` (`d_model x d_model`),
//! `layers.<l>.mlp.w_in|v_in` (`d_h x d_model`),
//! `layers.<l>.mlp.w_out` (`d_model x d_h`); finally `output_head`
//! (`vocab x d_model`). Round-tripping a file is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{Activation, LayerTensors, ModelDims, ModelWeights};

const MAGIC: &[u8; 4] = b"CLDA";
const VERSION: u32 = 1;

fn write_tensor(w: &mut impl Write, name: &str, data: &[f32]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Transpose `d_h x d_model` (neuron-major) into the on-disk
/// `d_model x d_h` layout.
fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub fn save_model(model: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let d = &model.dims;
    for v in [
        d.n_layers,
        d.d_model,
        d.d_h,
        d.n_heads,
        d.vocab_size,
        d.max_ctx,
        model.rng_seed as usize,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&[model.activation.to_u8()])?;

    write_tensor(&mut w, "token_embedding", &model.token_embedding)?;
    for (l, lw) in model.layers.iter().enumerate() {
        write_tensor(&mut w, &format!("layers.{l}.attn.wq"), &lw.wq)?;
        write_tensor(&mut w, &format!("layers.{l}.attn.wk"), &lw.wk)?;
        write_tensor(&mut w, &format!("layers.{l}.attn.wv"), &lw.wv)?;
        write_tensor(&mut w, &format!("layers.{l}.attn.wo"), &lw.wo)?;
        write_tensor(&mut w, &format!("layers.{l}.mlp.w_in"), &lw.w_in)?;
        write_tensor(&mut w, &format!("layers.{l}.mlp.v_in"), &lw.v_in)?;
        let w_out = transpose(&lw.w_out_t, d.d_h, d.d_model);
        write_tensor(&mut w, &format!("layers.{l}.mlp.w_out"), &w_out)?;
    }
    write_tensor(&mut w, "output_head", &model.output_head)?;
    w.flush()?;
    Ok(())
}

struct TensorReader<R: Read> {
    inner: R,
}

impl<R: Read> TensorReader<R> {
    fn read_exact_field(&mut self, buf: &mut [u8], field: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::format(field, "file truncated"))
    }

    fn read_u32(&mut self, field: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_field(&mut b, field)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_tensor(&mut self, expected_name: &str, expected_len: usize) -> Result<Vec<f32>> {
        let name_len = self.read_u32(expected_name)? as usize;
        if name_len > 4096 {
            return Err(Error::format(expected_name, "tensor name length implausible"));
        }
        let mut name_buf = vec![0u8; name_len];
        self.read_exact_field(&mut name_buf, expected_name)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format(expected_name, "tensor name not utf-8"))?;
        if name != expected_name {
            return Err(Error::format(
                expected_name,
                format!("found tensor `{name}` out of order"),
            ));
        }
        let mut bytes = vec![0u8; expected_len * 4];
        self.read_exact_field(&mut bytes, expected_name)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(expected_name, "non-finite value"));
        }
        Ok(data)
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let file = File::open(path.as_ref())?;
    let mut r = TensorReader {
        inner: BufReader::new(file),
    };

    let mut magic = [0u8; 4];
    r.read_exact_field(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format("magic", "not a model file"));
    }
    let version = r.read_u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let mut raw = [0u32; 7];
    for (i, field) in ["n_layers", "d_model", "d_h", "n_heads", "vocab_size", "max_ctx", "rng_seed"]
        .iter()
        .enumerate()
    {
        raw[i] = r.read_u32(field)?;
    }
    let dims = ModelDims {
        n_layers: raw[0] as usize,
        d_model: raw[1] as usize,
        d_h: raw[2] as usize,
        n_heads: raw[3] as usize,
        vocab_size: raw[4] as usize,
        max_ctx: raw[5] as usize,
    };
    dims.validate()
        .map_err(|e| Error::format("dims", e.to_string()))?;
    let rng_seed = raw[6];
    let mut act_byte = [0u8; 1];
    r.read_exact_field(&mut act_byte, "activation_fn")?;
    let activation = Activation::from_u8(act_byte[0])?;

    let dm = dims.d_model;
    let dh = dims.d_h;
    let token_embedding = r.read_tensor("token_embedding", dims.vocab_size * dm)?;
    let mut layers = Vec::with_capacity(dims.n_layers);
    for l in 0..dims.n_layers {
        let wq = r.read_tensor(&format!("layers.{l}.attn.wq"), dm * dm)?;
        let wk = r.read_tensor(&format!("layers.{l}.attn.wk"), dm * dm)?;
        let wv = r.read_tensor(&format!("layers.{l}.attn.wv"), dm * dm)?;
        let wo = r.read_tensor(&format!("layers.{l}.attn.wo"), dm * dm)?;
        let w_in = r.read_tensor(&format!("layers.{l}.mlp.w_in"), dh * dm)?;
        let v_in = r.read_tensor(&format!("layers.{l}.mlp.v_in"), dh * dm)?;
        let w_out = r.read_tensor(&format!("layers.{l}.mlp.w_out"), dm * dh)?;
        // on-disk layout is d_model x d_h; store neuron-major
        let w_out_t = transpose(&w_out, dm, dh);
        layers.push(LayerTensors {
            wq,
            wk,
            wv,
            wo,
            w_in,
            v_in,
            w_out_t,
        });
    }
    let output_head = r.read_tensor("output_head", dims.vocab_size * dm)?;

    ModelWeights::from_parts(dims, token_embedding, layers, output_head, activation, rng_seed)
}
