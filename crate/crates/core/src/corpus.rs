//! JSON-lines corpus files: one object per sequence.
//!
//! Schema per line: `{"id": string, "group": string, "tokens": [u32]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One tokenized sequence with its provenance label.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CorpusSequence {
    pub id: String,
    pub group: String,
    pub tokens: Vec<u32>,
}

/// An in-memory corpus, order-preserving.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sequences: Vec<CorpusSequence>,
}

impl Corpus {
    pub fn new(sequences: Vec<CorpusSequence>) -> Self {
        Corpus { sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Total token count across all sequences.
    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.tokens.len()).sum()
    }

    /// Unigram histogram over token ids (length = max id + 1).
    pub fn unigram_counts(&self) -> Vec<u64> {
        let max_id = self
            .sequences
            .iter()
            .flat_map(|s| s.tokens.iter())
            .copied()
            .max()
            .unwrap_or(0);
        let mut counts = vec![0u64; max_id as usize + 1];
        for seq in &self.sequences {
            for &t in &seq.tokens {
                counts[t as usize] += 1;
            }
        }
        counts
    }

    /// Deterministic random byte-token corpus (ids in `0..256`, so any
    /// model with a byte-sized vocabulary accepts it).
    pub fn synthetic(seed: u32, count: usize, len: usize, group: &str) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        Corpus::new(
            (0..count)
                .map(|i| CorpusSequence {
                    id: format!("syn-{i:04}"),
                    group: group.to_string(),
                    tokens: (0..len).map(|_| rng.gen_range(0..256u32)).collect(),
                })
                .collect(),
        )
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        let reader = BufReader::new(file);
        let mut sequences = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let seq: CorpusSequence = serde_json::from_str(&line).map_err(|e| {
                Error::format(format!("corpus line {}", lineno + 1), e.to_string())
            })?;
            sequences.push(seq);
        }
        Ok(Corpus { sequences })
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path.as_ref())?;
        let mut writer = BufWriter::new(file);
        for seq in &self.sequences {
            serde_json::to_writer(&mut writer, seq)?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let corpus = Corpus::new(vec![
            CorpusSequence {
                id: "a".into(),
                group: "NLS".into(),
                tokens: vec![1, 2, 3],
            },
            CorpusSequence {
                id: "b".into(),
                group: "RTS".into(),
                tokens: vec![9],
            },
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        corpus.write_jsonl(&path).unwrap();
        let back = Corpus::read_jsonl(&path).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"group\":\"g\",\"tokens\":[1]}\nnot json\n").unwrap();
        let err = Corpus::read_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
