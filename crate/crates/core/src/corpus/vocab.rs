use std::collections::HashMap;

use crate::corpus::PatientStay;
use crate::error::{Error, Result};
use crate::io::sha256_hex;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id bijection. Ids 0–3 are always PAD, BOS, EOS, UNK.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidData(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index, min_freq })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Map ids back to tokens, dropping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED_TOKENS[UNK]).to_string())
            .collect()
    }

    /// SHA-256 over the newline-joined token list.
    pub fn checksum(&self) -> String {
        sha256_hex(self.to_file_string().as_bytes())
    }

    /// One token per line; line number − 1 is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED_TOKENS.len() || tokens[..4].iter().zip(RESERVED_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::InvalidData("vocabulary file must start with the four reserved tokens".into()));
        }
        // min_freq is not stored in the file format.
        Self::from_tokens(tokens, 0)
    }
}

/// Count tokens over records and instructions and keep those occurring at
/// least `min_freq` times, ordered by descending frequency then lexically.
pub fn build_vocab(stays: &[&PatientStay], min_freq: usize) -> Result<Vocabulary> {
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for stay in stays {
        for t in stay.record_tokens.iter().chain(&stay.instruction_tokens) {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_freq && !RESERVED_TOKENS.contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = RESERVED_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocabulary::from_tokens(tokens, min_freq)
}

/// Lookup with UNK fallback, truncated to `max_len`; no padding.
pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.id(t.as_ref()).unwrap_or(UNK))
        .collect()
}
