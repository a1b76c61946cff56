//! Byte-level tokenizer: every byte is its own token, plus two reserved
//! special ids that `tokenize` never emits.

use crate::error::{Error, Result};

/// Number of plain byte tokens.
pub const BYTE_VOCAB: usize = 256;
/// Beginning-of-sequence marker (reserved, never produced by `tokenize`).
pub const BOS_TOKEN: u32 = 256;
/// End-of-sequence marker (reserved, never produced by `tokenize`).
pub const EOS_TOKEN: u32 = 257;
/// Byte vocabulary plus the two specials.
pub const VOCAB_WITH_SPECIALS: usize = 258;

pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]. Special ids are skipped; ids beyond the
/// vocabulary are a range error.
pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < BYTE_VOCAB as u32 {
            out.push(id as u8);
        } else if id == BOS_TOKEN || id == EOS_TOKEN {
            continue;
        } else {
            return Err(Error::Range(format!(
                "token id {id} >= vocab size {VOCAB_WITH_SPECIALS}"
            )));
        }
    }
    Ok(out)
}
