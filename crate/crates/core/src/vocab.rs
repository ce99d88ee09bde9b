//! Whitespace tokenizer and vocabulary with reserved special ids.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const MASK: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];

/// Token-to-id map. Ids `0..5` are the specials; corpus tokens start at 5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token ids of one encoded sequence plus its attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
}

impl Encoded {
    /// Number of non-PAD positions.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The non-PAD prefix of the ids.
    pub fn trimmed(&self) -> &[usize] {
        &self.ids[..self.len()]
    }
}

impl Vocabulary {
    /// Builds a vocabulary from corpus texts, keeping the most frequent
    /// tokens (ties broken lexicographically) up to `max_size` total ids.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size <= SPECIAL_TOKENS.len() {
            return Err(Error::config(format!(
                "vocabulary size {max_size} leaves no room beyond the {} specials",
                SPECIAL_TOKENS.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in split_words(text).filter(|t| !SPECIAL_TOKENS.contains(&t.as_str())) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let words = ranked
            .into_iter()
            .take(max_size - SPECIAL_TOKENS.len())
            .map(|(w, _)| w);
        Self::from_corpus_tokens(words)
    }

    /// Builds a vocabulary from an explicit ordered list of corpus tokens.
    pub fn from_corpus_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::data(format!("invalid vocabulary token {w:?}")));
            }
            if index.contains_key(&w) {
                return Err(Error::data(format!("duplicate vocabulary token {w:?}")));
            }
            index.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a corpus token; UNK for unknown words and for the spelled-out
    /// names of special tokens.
    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&id) if id >= SPECIAL_TOKENS.len() => id,
            _ => UNK,
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Corpus tokens in id order, excluding specials.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[SPECIAL_TOKENS.len()..]
    }

    /// Short content hash identifying this vocabulary.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Lowercased whitespace tokenization framed as `BOS tokens EOS` and
    /// padded to `max_len`. Token runs too long to fit are truncated; EOS is
    /// always kept.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Encoded> {
        if max_len < 3 {
            return Err(Error::contract(format!("max_len {max_len} < 3")));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(split_words(text).take(max_len - 2).map(|w| self.id(&w)));
        ids.push(EOS);
        let used = ids.len();
        ids.resize(max_len, PAD);
        let mut mask = vec![1u8; used];
        mask.resize(max_len, 0);
        Ok(Encoded { ids, mask })
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}
