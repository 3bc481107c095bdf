use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_CUTOFF: usize = 1000;
pub const DEFAULT_CHUNK_SIZE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MrrProtocol {
    AllPairs,
    Chunked,
}

impl fmt::Display for MrrProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MrrProtocol::AllPairs => "all-pairs",
            MrrProtocol::Chunked => "chunked",
        })
    }
}

impl std::str::FromStr for MrrProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-pairs" => Ok(MrrProtocol::AllPairs),
            "chunked" => Ok(MrrProtocol::Chunked),
            other => Err(Error::Config(format!("unknown MRR protocol {other:?}"))),
        }
    }
}

/// How queries ranked past the cutoff enter the mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutoffRule {
    /// They contribute a reciprocal rank of 0 (CodeBERT evaluation code).
    #[default]
    Zero,
    /// They are left out of the denominator.
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrrReport {
    pub protocol: MrrProtocol,
    pub cutoff: Option<usize>,
    pub chunk_size: Option<usize>,
    pub n_evaluated: usize,
    pub mrr: f64,
    pub ranks: Vec<usize>,
}

impl MrrReport {
    /// Mean recomputed from the stored ranks.
    pub fn recompute(&self) -> f64 {
        match self.protocol {
            MrrProtocol::AllPairs => mean_rr(&self.ranks, self.cutoff.unwrap_or(usize::MAX), CutoffRule::Zero),
            MrrProtocol::Chunked => {
                let chunk = self.chunk_size.unwrap_or(self.ranks.len()).max(1);
                let per: Vec<f64> = self
                    .ranks
                    .chunks(chunk)
                    .map(|c| mean_rr(c, usize::MAX, CutoffRule::Zero))
                    .collect();
                per.iter().sum::<f64>() / per.len().max(1) as f64
            }
        }
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        format!(
            "{:<12} {}\n{:<12} {}\n{:<12} {}\n{:<12} {}\n{:<12} {:.6}\n",
            "protocol",
            self.protocol,
            "cutoff",
            opt(self.cutoff),
            "chunk_size",
            opt(self.chunk_size),
            "n_evaluated",
            self.n_evaluated,
            "mrr",
            self.mrr
        )
    }
}

/// `1 + |{j ≠ i : S_ij > S_ii}|`; ties never hurt the match.
pub fn rank_of_match<T: Scalar>(i: usize, row: &[T]) -> usize {
    let target = row[i];
    1 + row.iter().enumerate().filter(|&(j, &s)| j != i && s > target).count()
}

fn mean_rr(ranks: &[usize], cutoff: usize, rule: CutoffRule) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &r in ranks {
        if r <= cutoff {
            sum += 1.0 / r as f64;
            n += 1;
        } else if rule == CutoffRule::Zero {
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn check_pair<T: Scalar>(hc: &Tensor<T>, ht: &Tensor<T>) -> Result<usize> {
    let [n, d] = hc.dims2()?;
    if ht.dims2()? != [n, d] {
        return Err(Error::Dimension(format!(
            "code embeddings {:?} vs text embeddings {:?}",
            hc.shape(),
            ht.shape()
        )));
    }
    Ok(n)
}

fn ranks_for<T: Scalar>(hc: &Tensor<T>, ht: &Tensor<T>) -> Result<Vec<usize>> {
    // Row i scores text query i against every code candidate.
    let scores = ops::matmul_bt(ht, hc)?;
    Ok(ranks_from_scores(&scores))
}

fn ranks_from_scores<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let n = scores.rows();
    (0..n).map(|i| rank_of_match(i, scores.row(i))).collect()
}

/// All-pairs MRR from a square query × candidate score matrix.
pub fn mrr_from_scores<T: Scalar>(scores: &Tensor<T>, cutoff: usize, rule: CutoffRule) -> Result<MrrReport> {
    let [n, m] = scores.dims2()?;
    if n != m {
        return Err(Error::Dimension(format!("score matrix {n}×{m} is not square")));
    }
    let ranks = ranks_from_scores(scores);
    Ok(MrrReport {
        protocol: MrrProtocol::AllPairs,
        cutoff: Some(cutoff),
        chunk_size: None,
        n_evaluated: n,
        mrr: mean_rr(&ranks, cutoff, rule),
        ranks,
    })
}

/// Every text query ranked against every code in the set.
pub fn mrr_all_pairs<T: Scalar>(hc: &Tensor<T>, ht: &Tensor<T>, cutoff: usize, rule: CutoffRule) -> Result<MrrReport> {
    if hc.numel() == 0 {
        return Err(Error::Data("empty evaluation set".into()));
    }
    check_pair(hc, ht)?;
    let ranks = ranks_for(hc, ht)?;
    Ok(MrrReport {
        protocol: MrrProtocol::AllPairs,
        cutoff: Some(cutoff),
        chunk_size: None,
        n_evaluated: ranks.len(),
        mrr: mean_rr(&ranks, cutoff, rule),
        ranks,
    })
}

/// Consecutive chunks of `chunk` pairs in dataset order, a trailing partial
/// chunk dropped, plain MRR within each chunk, averaged over chunks.
pub fn mrr_chunked<T: Scalar>(hc: &Tensor<T>, ht: &Tensor<T>, chunk: usize) -> Result<MrrReport> {
    let n = check_pair(hc, ht)?;
    if chunk == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    if n < chunk {
        return Err(Error::Data(format!(
            "chunked MRR needs at least one full chunk: {n} pairs < chunk size {chunk}"
        )));
    }
    let d = hc.cols();
    let mut ranks = Vec::with_capacity(n - n % chunk);
    let mut per_chunk = Vec::new();
    for c in 0..n / chunk {
        let span = c * chunk * d..(c + 1) * chunk * d;
        let hc_c = Tensor::new(&[chunk, d], hc.data()[span.clone()].to_vec())?;
        let ht_c = Tensor::new(&[chunk, d], ht.data()[span].to_vec())?;
        let r = ranks_for(&hc_c, &ht_c)?;
        per_chunk.push(mean_rr(&r, usize::MAX, CutoffRule::Zero));
        ranks.extend(r);
    }
    Ok(MrrReport {
        protocol: MrrProtocol::Chunked,
        cutoff: None,
        chunk_size: Some(chunk),
        n_evaluated: ranks.len(),
        mrr: per_chunk.iter().sum::<f64>() / per_chunk.len() as f64,
        ranks,
    })
}
