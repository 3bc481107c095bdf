use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, PAD};
use super::{PairRecord, TokenMode};
use crate::error::{Error, Result};

/// Right-padded id sequences, `rows × cols` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
}

impl IdMatrix {
    /// Pads every sequence with [`PAD`] to the longest one.
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Data("no sequences to batch".into()));
        }
        let cols = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * cols);
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, cols - s.len()));
        }
        Ok(Self {
            rows: seqs.len(),
            cols,
            ids,
        })
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.cols..(i + 1) * self.cols]
    }

    /// 1 exactly on non-PAD positions.
    pub fn mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD).collect()
    }
}

/// One training micro-batch: row `i` of `text` and `code` form a pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub pair_ids: Vec<String>,
    pub text: IdMatrix,
    pub code: IdMatrix,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }
}

/// A pair already mapped to ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub id: String,
    pub text: Vec<u32>,
    pub code: Vec<u32>,
}

impl EncodedPair {
    pub fn new(r: &PairRecord, vocab: &Vocab, max_text: usize, max_code: usize) -> Self {
        Self {
            id: r.id.clone(),
            text: vocab.encode_str(&r.text, TokenMode::Text, max_text),
            code: vocab.encode_str(&r.code, TokenMode::Code, max_code),
        }
    }
}

impl Batch {
    pub fn from_pairs(pairs: &[&EncodedPair]) -> Result<Self> {
        Ok(Self {
            pair_ids: pairs.iter().map(|p| p.id.clone()).collect(),
            text: IdMatrix::from_sequences(&pairs.iter().map(|p| p.text.as_slice()).collect::<Vec<_>>())?,
            code: IdMatrix::from_sequences(&pairs.iter().map(|p| p.code.as_slice()).collect::<Vec<_>>())?,
        })
    }
}

/// Shuffles the split for `epoch` (a distinct stream of the seeded generator
/// per epoch) and cuts it into batches padded to their own maximum lengths.
pub fn make_batches(
    split: &[EncodedPair],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    drop_last: bool,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be ≥ 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(|c| Batch::from_pairs(&c.iter().map(|&i| &split[i]).collect::<Vec<_>>()))
        .collect()
}
