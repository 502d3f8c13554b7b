//! Explicit tabular denoisers for the brute-force verification suites: one
//! stored simplex row per (masked-sequence, position) pair.

use crate::core::{MaskedSequence, RandomStream, Sequence, Vocabulary};
use crate::error::{Error, Result};

/// A denoiser given by explicit probability rows, keyed by the encoding of
/// the masked sequence. Rows over real tokens only; the mask coordinate and
/// the carry-over constraint are applied on lookup, so every output satisfies
/// the SUBS constraints by construction.
#[derive(Clone, Debug)]
pub struct TabularDenoiser {
    vocab: Vocabulary,
    len: usize,
    /// rows[state_code * len + position] -> simplex over V real tokens
    rows: Vec<Vec<f64>>,
}

impl TabularDenoiser {
    fn n_states(vocab: &Vocabulary, len: usize) -> Result<usize> {
        let states = (vocab.n_symbols() as u128).checked_pow(len as u32);
        match states {
            Some(s) if s <= 1 << 24 => Ok(s as usize),
            _ => Err(Error::SizeGuard(format!(
                "tabular denoiser state space too large: (V+1)^L with V={}, L={len}",
                vocab.size()
            ))),
        }
    }

    /// Encodes a masked sequence as a base-(V+1) integer.
    pub fn encode(z: &MaskedSequence, vocab: &Vocabulary) -> usize {
        let base = vocab.n_symbols();
        z.tokens().iter().rev().fold(0usize, |acc, &t| acc * base + t)
    }

    pub fn uniform(vocab: Vocabulary, len: usize) -> Result<Self> {
        let states = Self::n_states(&vocab, len)?;
        let row = vec![1.0 / vocab.size() as f64; vocab.size()];
        Ok(Self {
            vocab,
            len,
            rows: vec![row; states * len],
        })
    }

    /// Independent random rows with every entry at least `floor` after
    /// normalization, so log-confidences stay finite.
    pub fn random(vocab: Vocabulary, len: usize, rng: &mut RandomStream, floor: f64) -> Result<Self> {
        let states = Self::n_states(&vocab, len)?;
        let v = vocab.size();
        let mut rows = Vec::with_capacity(states * len);
        let mut r = rng.substream("tabular-rows", 0);
        for _ in 0..states * len {
            let mut row: Vec<f64> = (0..v).map(|_| floor + r.next_f64()).collect();
            let sum: f64 = row.iter().sum();
            for p in row.iter_mut() {
                *p /= sum;
            }
            rows.push(row);
        }
        Ok(Self { vocab, len, rows })
    }

    /// Deterministic on `x`: every row is a point mass on the matching token.
    pub fn delta(x: &Sequence, vocab: Vocabulary) -> Result<Self> {
        let len = x.len();
        let states = Self::n_states(&vocab, len)?;
        let mut rows = Vec::with_capacity(states * len);
        for _ in 0..states {
            for i in 0..len {
                let mut row = vec![0.0; vocab.size()];
                row[x.get(i)] = 1.0;
                rows.push(row);
            }
        }
        Ok(Self { vocab, len, rows })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// SUBS-constrained rows over V+1 symbols for every position.
    pub fn denoise(&self, z: &MaskedSequence) -> Vec<Vec<f64>> {
        debug_assert_eq!(z.len(), self.len);
        let code = Self::encode(z, &self.vocab);
        let v = self.vocab.size();
        (0..self.len)
            .map(|i| {
                let mut row = vec![0.0; v + 1];
                if z.is_masked(i) {
                    row[..v].copy_from_slice(&self.rows[code * self.len + i]);
                } else {
                    row[z.get(i)] = 1.0;
                }
                row
            })
            .collect()
    }
}

/// Canonical per-position encoding used as the feature map of tabular models:
/// one-hot over the V+1 symbols concatenated with a one-hot position.
pub fn canonical_features(tokens: &[usize], vocab: &Vocabulary, len: usize) -> Vec<f64> {
    let sym = vocab.n_symbols();
    let dim = sym + len;
    let mut out = vec![0.0; tokens.len() * dim];
    for (i, &t) in tokens.iter().enumerate() {
        out[i * dim + t] = 1.0;
        out[i * dim + sym + i] = 1.0;
    }
    out
}

pub fn canonical_feature_dim(vocab: &Vocabulary, len: usize) -> usize {
    vocab.n_symbols() + len
}
