use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::tokenize::{tokenize, TokenMode};
use super::PairRecord;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token-to-id mapping with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Data(format!("vocab must start with reserved token {r}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Tokenizes and maps `s`, keeping at most `max_len` ids.
    pub fn encode_str(&self, s: &str, mode: TokenMode, max_len: usize) -> Vec<u32> {
        let mut ids = self.encode(&tokenize(s, mode));
        ids.truncate(max_len);
        ids
    }

    /// One token per line in id order. Tokens never contain whitespace.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Frequency-ranked vocabulary over both sides of the corpus (text tokens in
/// text mode, code tokens in code mode). Ties are broken lexicographically.
///
/// `max_size` bounds the number of learned tokens; the four reserved ids come
/// on top of it.
pub fn build_vocab<'a>(
    corpus: impl IntoIterator<Item = &'a PairRecord>,
    max_size: usize,
    min_freq: usize,
) -> Result<Vocab> {
    if max_size < 5 {
        return Err(Error::Config(format!("vocab max_size must be ≥ 5, got {max_size}")));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut n_records = 0usize;
    for r in corpus {
        n_records += 1;
        let toks = tokenize(&r.text, TokenMode::Text)
            .into_iter()
            .chain(tokenize(&r.code, TokenMode::Code));
        for t in toks {
            *counts.entry(t).or_default() += 1;
        }
    }
    if n_records == 0 {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_size).map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}
