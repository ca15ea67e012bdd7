//! Byte-level tokenization, fixed-length packing, chunked streaming and
//! synthetic multi-domain corpora.

mod cursor;
mod packed;
mod synth;

pub use cursor::{Chunk, ChunkCursor, ChunkOrder};
pub use packed::{read_packed, write_packed};
pub use synth::{synth_corpus, DomainParams, DomainSpec, SynthConfig, SynthCorpus};

use crate::error::{Error, Result};

/// Byte-level vocabulary: ids 0..=255 are raw bytes, 256 is padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    pub size: usize,
    pub pad: u32,
}

impl Vocabulary {
    pub const BYTES: Vocabulary = Vocabulary { size: 257, pad: 256 };
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::BYTES
    }
}

pub fn tokenize(text: &[u8], _vocab: &Vocabulary) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| u8::try_from(id).map_err(|_| Error::invalid(format!("id {id} is not a byte token"))))
        .collect()
}

/// A window of exactly `S` token ids and the stream position it was cut from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub offset: u64,
}

/// Cuts `ids` into consecutive non-overlapping windows of length `s`; the
/// trailing remainder is dropped.
pub fn pack_sequences(ids: &[u32], s: usize) -> Result<Vec<TokenSequence>> {
    if s < 2 {
        return Err(Error::invalid(format!("sequence length must be at least 2, got {s}")));
    }
    Ok(ids
        .chunks_exact(s)
        .enumerate()
        .map(|(i, w)| TokenSequence { ids: w.to_vec(), offset: (i * s) as u64 })
        .collect())
}

/// An ordered collection of equal-length sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: usize,
    pub seq_len: usize,
    pub sequences: Vec<TokenSequence>,
}

impl Dataset {
    pub fn new(vocab: usize, seq_len: usize, sequences: Vec<TokenSequence>) -> Result<Self> {
        for s in &sequences {
            if s.ids.len() != seq_len {
                return Err(Error::invalid(format!("sequence at {} has length {}", s.offset, s.ids.len())));
            }
            if let Some(bad) = s.ids.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::invalid(format!("id {bad} outside vocabulary of {vocab}")));
            }
        }
        Ok(Self { vocab, seq_len, sequences })
    }

    /// Tokenizes and packs raw bytes into a dataset.
    pub fn from_bytes(text: &[u8], seq_len: usize) -> Result<Self> {
        let vocab = Vocabulary::BYTES;
        Self::new(vocab.size, seq_len, pack_sequences(&tokenize(text, &vocab), seq_len)?)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn ids(&self, i: usize) -> &[u32] {
        &self.sequences[i].ids
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            vocab: self.vocab,
            seq_len: self.seq_len,
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
        }
    }
}
