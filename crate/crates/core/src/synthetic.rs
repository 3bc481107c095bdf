//! Seeded synthetic text/code corpus for desk-scale experiments.
//!
//! Every pair carries a signature of a few "content" words that appear in
//! both the docstring and the code; everything else is modality-specific
//! filler, so retrieval quality depends on learning to attend to the shared
//! signature.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairRecord;
use crate::error::{Error, Result};

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "zo", "pe", "qua", "dri", "fen", "gal", "hob", "jun",
];

const SYNTAX: &[&str] = &["(", ")", "{", "}", ";", "=", ".", ",", ":", "->", "+", "-", "*", "<", ">", "[", "]", "!", "&", "|"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub pairs: usize,
    pub signature_pool: usize,
    pub signature_len: usize,
    pub text_filler_pool: usize,
    pub code_filler_pool: usize,
    /// Inclusive range of filler words per docstring.
    pub text_filler: (usize, usize),
    /// Inclusive range of filler identifiers per code snippet.
    pub code_filler: (usize, usize),
    pub lang: String,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            pairs: 512,
            signature_pool: 80,
            signature_len: 3,
            text_filler_pool: 60,
            code_filler_pool: 40,
            text_filler: (3, 6),
            code_filler: (3, 6),
            lang: "synth".into(),
            seed: 20_240_601,
        }
    }
}

/// `count` distinct lowercase pseudo-words with the given prefix.
fn words(rng: &mut ChaCha8Rng, prefix: &str, count: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.random_range(2..=3);
        let w: String = std::iter::once(prefix.to_string())
            .chain((0..n).map(|_| SYLLABLES.choose(rng).expect("non-empty").to_string()))
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<PairRecord>> {
    if cfg.signature_len == 0 || cfg.signature_len > cfg.signature_pool {
        return Err(Error::Config("signature length must be in [1, signature_pool]".into()));
    }
    if cfg.text_filler.0 > cfg.text_filler.1 || cfg.code_filler.0 > cfg.code_filler.1 {
        return Err(Error::Config("filler ranges must be ordered".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let signature = words(&mut rng, "", cfg.signature_pool);
    let text_filler = words(&mut rng, "w", cfg.text_filler_pool);
    let code_filler = words(&mut rng, "x_", cfg.code_filler_pool);

    let mut used = BTreeSet::new();
    let mut records = Vec::with_capacity(cfg.pairs);
    let mut attempts = 0usize;
    while records.len() < cfg.pairs {
        attempts += 1;
        if attempts > cfg.pairs * 100 {
            return Err(Error::Config("signature pool too small for the requested pair count".into()));
        }
        let mut key: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.signature_pool, cfg.signature_len).into_vec();
        let mut sorted = key.clone();
        sorted.sort_unstable();
        if !used.insert(sorted) {
            continue;
        }
        key.shuffle(&mut rng);

        let sig: Vec<&str> = key.iter().map(|&i| signature[i].as_str()).collect();

        let n_text = rng.random_range(cfg.text_filler.0..=cfg.text_filler.1);
        let mut text = sig.clone();
        text.extend((0..n_text).map(|_| text_filler.choose(&mut rng).expect("non-empty").as_str()));
        text.shuffle(&mut rng);

        let n_code = rng.random_range(cfg.code_filler.0..=cfg.code_filler.1);
        let mut code: Vec<&str> = Vec::new();
        let mut idents = sig;
        idents.extend((0..n_code).map(|_| code_filler.choose(&mut rng).expect("non-empty").as_str()));
        idents.shuffle(&mut rng);
        for (k, id) in idents.into_iter().enumerate() {
            if k > 0 {
                code.push(SYNTAX.choose(&mut rng).expect("non-empty"));
            }
            code.push(id);
        }
        code.push(";");

        records.push(PairRecord {
            id: format!("{}-{:04}", cfg.lang, records.len()),
            text: text.join(" "),
            code: code.join(" "),
            lang: cfg.lang.clone(),
        });
    }
    Ok(records)
}
