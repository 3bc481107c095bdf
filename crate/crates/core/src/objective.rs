//! Bimodal contrastive loss with temperature scaling.
//!
//! For a batch of `N` code/text embedding pairs the score matrix is
//! `S_ij = hc_i · ht_j / τ`. The code→text term of pair `i` is the negative log
//! softmax of row `i` at the diagonal, the text→code term is the same for
//! column `i`, and the batch loss averages both directions over `2N` terms.
//! Negatives are the non-matching cross-modal pairs of the batch only.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Temperature used during fine-tuning.
pub const DEFAULT_TEMPERATURE: f64 = 0.08;

/// Scaled pairwise scores between code rows and text rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    pub scores: Tensor<T>,
    pub temperature: T,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn n(&self) -> usize {
        self.scores.rows()
    }

    pub fn transposed(&self) -> Self {
        Self {
            scores: self.scores.transpose().expect("square matrix"),
            temperature: self.temperature,
        }
    }
}

fn check_pair<T: Scalar>(hc: &Tensor<T>, ht: &Tensor<T>) -> Result<usize> {
    let [n, d] = hc.dims2()?;
    if ht.dims2()? != [n, d] {
        return Err(Error::Dimension(format!(
            "code embeddings {:?} and text embeddings {:?} differ",
            hc.shape(),
            ht.shape()
        )));
    }
    Ok(n)
}

/// `S = Hc · Htᵀ / τ`.
pub fn similarity_matrix<T: Scalar>(hc: &Tensor<T>, ht: &Tensor<T>, temperature: T) -> Result<SimilarityMatrix<T>> {
    if !(temperature > T::zero()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    check_pair(hc, ht)?;
    let inv = T::one() / temperature;
    let scores = ops::matmul_bt(hc, ht)?.map(|x| x * inv);
    Ok(SimilarityMatrix { scores, temperature })
}

pub fn nt_xent<T: Scalar>(s: &SimilarityMatrix<T>) -> Result<T> {
    Ok(nt_xent_with_probs(&s.scores)?.0)
}

/// Loss plus the row-wise and column-wise softmax tables (both stored
/// row-major as `[i][j]`), which are exactly what the gradient needs.
pub(crate) fn nt_xent_with_probs<T: Scalar>(s: &Tensor<T>) -> Result<(T, Vec<T>, Vec<T>)> {
    let [n, m] = s.dims2()?;
    if n != m {
        return Err(Error::Dimension(format!("score matrix must be square, got {n}×{m}")));
    }
    let row_p = ops::softmax(s, 1)?.into_data();
    let col_p = ops::softmax(s, 0)?.into_data();
    let d = s.data();
    let mut total = T::zero();
    for i in 0..n {
        let row_lse = ops::log_sum_exp((0..n).map(|j| d[i * n + j]));
        let col_lse = ops::log_sum_exp((0..n).map(|j| d[j * n + i]));
        total += (row_lse - d[i * n + i]) + (col_lse - d[i * n + i]);
    }
    Ok((total / T::of_usize(2 * n), row_p, col_p))
}

/// Direct per-pair evaluation of the loss with explicit loops, used as an
/// independent check of [`nt_xent`].
pub fn brute_force_loss<T: Scalar>(hc: &Tensor<T>, ht: &Tensor<T>, temperature: T) -> Result<T> {
    if !(temperature > T::zero()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let n = check_pair(hc, ht)?;
    let delta = |c: usize, t: usize| {
        let mut dot = T::zero();
        for (a, b) in hc.row(c).iter().zip(ht.row(t)) {
            dot += *a * *b;
        }
        (dot / temperature).exp()
    };
    let mut total = T::zero();
    for i in 0..n {
        let positive = delta(i, i);
        let mut code_anchor = T::zero();
        let mut text_anchor = T::zero();
        for k in 0..n {
            code_anchor += delta(i, k);
            text_anchor += delta(k, i);
        }
        total += -(positive / code_anchor).ln() - (positive / text_anchor).ln();
    }
    Ok(total / T::of_usize(2 * n))
}
