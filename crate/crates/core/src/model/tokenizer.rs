use std::collections::HashMap;

use super::config::TokenizerSpec;
use crate::data::probe::PROBE_WORDS;
use crate::error::{Error, Result};

/// Text ↔ token-id mapping with three reserved ids (pad, bos, eos).
#[derive(Clone, Debug)]
pub enum Tokenizer {
    /// Ids 0..=255 are raw UTF-8 bytes; 256 pad, 257 bos, 258 eos.
    Bytes,
    /// Ids 0 pad, 1 bos, 2 eos, then one id per word.
    Words { words: Vec<String>, index: HashMap<String, usize> },
}

const WORD_SPECIALS: usize = 3;

impl Tokenizer {
    pub fn from_spec(spec: &TokenizerSpec) -> Result<Self> {
        match spec {
            TokenizerSpec::Bytes => Ok(Tokenizer::Bytes),
            TokenizerSpec::ProbeWords => Ok(Self::words(PROBE_WORDS.iter().map(|w| w.to_string()).collect())),
            TokenizerSpec::WordFile { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read vocabulary {path}: {e}")))?;
                Ok(Self::words(text.split_whitespace().map(str::to_string).collect()))
            }
        }
    }

    pub fn words(words: Vec<String>) -> Self {
        let mut index = HashMap::new();
        let mut uniq = Vec::new();
        for w in words {
            let w = w.to_lowercase();
            if !index.contains_key(&w) {
                index.insert(w.clone(), uniq.len() + WORD_SPECIALS);
                uniq.push(w);
            }
        }
        Tokenizer::Words { words: uniq, index }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bytes => 259,
            Tokenizer::Words { words, .. } => words.len() + WORD_SPECIALS,
        }
    }

    pub fn pad_id(&self) -> usize {
        match self {
            Tokenizer::Bytes => 256,
            Tokenizer::Words { .. } => 0,
        }
    }

    pub fn bos_id(&self) -> usize {
        match self {
            Tokenizer::Bytes => 257,
            Tokenizer::Words { .. } => 1,
        }
    }

    pub fn eos_id(&self) -> usize {
        match self {
            Tokenizer::Bytes => 258,
            Tokenizer::Words { .. } => 2,
        }
    }

    /// Token ids without any special tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        match self {
            Tokenizer::Bytes => Ok(text.bytes().map(usize::from).collect()),
            Tokenizer::Words { index, .. } => text
                .split_whitespace()
                .map(|w| {
                    let w = w.to_lowercase();
                    index.get(&w).copied().ok_or_else(|| Error::Data(format!("word {w:?} not in vocabulary")))
                })
                .collect(),
        }
    }

    /// Encodes and terminates with eos, truncating so the result fits `context`.
    pub fn encode_with_eos(&self, text: &str, context: usize) -> Result<Vec<usize>> {
        let mut ids = self.encode(text)?;
        ids.truncate(context.saturating_sub(1));
        ids.push(self.eos_id());
        Ok(ids)
    }

    /// Inverse of [`encode`](Self::encode); special ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        match self {
            Tokenizer::Bytes => {
                let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Tokenizer::Words { words, .. } => ids
                .iter()
                .filter(|&&i| i >= WORD_SPECIALS && i - WORD_SPECIALS < words.len())
                .map(|&i| words[i - WORD_SPECIALS].as_str())
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

/// Right-padded batch of token sequences, flattened row-major `[batch × len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub len: usize,
    pub pad: usize,
}

impl TokenBatch {
    pub fn new(seqs: &[Vec<usize>], pad: usize) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Data("token batch needs nonempty sequences".into()));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap();
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, len - s.len()));
        }
        Ok(TokenBatch { ids, lens: seqs.iter().map(Vec::len).collect(), len, pad })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.len..i * self.len + self.lens[i]]
    }
}
