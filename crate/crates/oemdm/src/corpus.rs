//! Corpus ingestion: character-level tokenization of plain text and a
//! deterministic key-value template grammar whose sequences have a
//! context-dependent optimal unmasking order.

use crate::core::{RandomStream, Sequence, Vocabulary};
use crate::error::{Error, Result};

/// Hard cap on character-level vocabularies.
pub const VOCAB_CAP: usize = 512;

/// A list of fixed-length token sequences with the vocabulary they live in
/// and the character map used to decode samples back to text.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub sequences: Vec<Sequence>,
    pub vocab: Vocabulary,
    pub length: usize,
    /// `charmap[token] = character`; includes the pad character when present.
    pub charmap: Vec<char>,
    pub pad_id: Option<usize>,
}

impl Corpus {
    pub fn decode(&self, x: &Sequence) -> String {
        x.tokens().iter().map(|&t| self.charmap[t]).collect()
    }

    /// Deterministic split into training and held-out sequences.
    pub fn split_holdout(&self, holdout: usize) -> Result<(Corpus, Corpus)> {
        if holdout >= self.sequences.len() {
            return Err(Error::Corpus(format!(
                "holdout {holdout} not below corpus size {}",
                self.sequences.len()
            )));
        }
        let cut = self.sequences.len() - holdout;
        let mut train = self.clone();
        let mut held = self.clone();
        train.sequences.truncate(cut);
        held.sequences = held.sequences.split_off(cut);
        Ok((train, held))
    }
}

/// Character-level ingestion: the distinct characters of the text, sorted by
/// codepoint, become tokens 0..; one reserved pad character (counted in V)
/// fills the final chunk. Identical input text yields an identical corpus.
pub fn ingest_corpus(text: &str, length: usize) -> Result<Corpus> {
    if text.is_empty() {
        return Err(Error::Corpus("empty corpus".into()));
    }
    if length == 0 {
        return Err(Error::Corpus("sequence length must be positive".into()));
    }
    let mut chars: Vec<char> = {
        let mut set: std::collections::BTreeSet<char> = text.chars().collect();
        // pad character: NUL unless the text uses it, then U+F8FF
        let pad = if set.contains(&'\0') { '\u{f8ff}' } else { '\0' };
        if set.contains(&pad) {
            return Err(Error::Corpus("no pad character available".into()));
        }
        set.insert(pad);
        set.into_iter().collect()
    };
    chars.sort_unstable();
    if chars.len() > VOCAB_CAP {
        return Err(Error::Corpus(format!(
            "character vocabulary {} exceeds cap {VOCAB_CAP}",
            chars.len()
        )));
    }
    let pad_char = if text.contains('\0') { '\u{f8ff}' } else { '\0' };
    let pad_id = chars.iter().position(|&c| c == pad_char).expect("pad present");
    let vocab = Vocabulary::new(chars.len())?;
    let index = |c: char| chars.iter().position(|&k| k == c).expect("char in map");
    let all: Vec<usize> = text.chars().map(index).collect();
    let mut sequences = Vec::new();
    for chunk in all.chunks(length) {
        let mut toks = chunk.to_vec();
        toks.resize(length, pad_id);
        sequences.push(Sequence::new(toks, &vocab)?);
    }
    Ok(Corpus {
        sequences,
        vocab,
        length,
        charmap: chars,
        pad_id: Some(pad_id),
    })
}

/// Key characters of the template grammar.
const KV_KEYS: [char; 8] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h'];
/// Value characters; each value is a position-dependent function of its key.
const KV_VALUES: [char; 4] = ['A', 'B', 'C', 'D'];

/// The deterministic key-value grammar: sequences of `pairs` adjacent
/// `(key, value)` pairs where `value = VALUES[(key_index + pair_index) % 4]`.
/// Keys are i.i.d. uniform, values carry no information of their own, so a
/// scheduler that reveals keys before values makes every value predictable.
pub fn kv_grammar_corpus(n_sequences: usize, pairs: usize, seed: u64) -> Result<Corpus> {
    if n_sequences == 0 || pairs == 0 {
        return Err(Error::Corpus("grammar needs sequences >= 1 and pairs >= 1".into()));
    }
    let mut charmap: Vec<char> = KV_KEYS.iter().chain(KV_VALUES.iter()).cloned().collect();
    charmap.sort_unstable();
    let vocab = Vocabulary::new(charmap.len())?;
    let key_ids: Vec<usize> = KV_KEYS
        .iter()
        .map(|k| charmap.iter().position(|c| c == k).unwrap())
        .collect();
    let value_ids: Vec<usize> = KV_VALUES
        .iter()
        .map(|v| charmap.iter().position(|c| c == v).unwrap())
        .collect();
    let root = RandomStream::new(seed).substream("kv-grammar", 0);
    let mut sequences = Vec::with_capacity(n_sequences);
    for s in 0..n_sequences {
        let mut draw = root.substream("seq", s as u64);
        let mut toks = Vec::with_capacity(2 * pairs);
        for j in 0..pairs {
            let key = (draw.next_u64() % KV_KEYS.len() as u64) as usize;
            toks.push(key_ids[key]);
            toks.push(value_ids[(key + j) % KV_VALUES.len()]);
        }
        sequences.push(Sequence::new(toks, &vocab)?);
    }
    Ok(Corpus {
        sequences,
        vocab,
        length: 2 * pairs,
        charmap,
        pad_id: None,
    })
}

/// Builds a corpus from a named grammar; `kv8` is the key-value template.
pub fn grammar_corpus(grammar: &str, n_sequences: usize, length: usize, seed: u64) -> Result<Corpus> {
    match grammar {
        "kv8" => {
            if length % 2 != 0 {
                return Err(Error::Corpus("kv8 needs an even sequence length".into()));
            }
            kv_grammar_corpus(n_sequences, length / 2, seed)
        }
        other => Err(Error::Corpus(format!("unknown grammar `{other}`"))),
    }
}
