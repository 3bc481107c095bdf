//! Forward kernels on plain tensors.
//!
//! The autodiff graph in [`crate::graph`] calls into these for its forward
//! pass, so every differentiable operation has exactly one forward definition.

use log::warn;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `out[m×n] += a[m×k] · b[k×n]` on raw row-major slices.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_at_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.dims2()?;
    let [k2, n] = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents disagree: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.dims2()?;
    let [n, k2] = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_bt inner extents disagree: {:?} · {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_bt_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// Splits a shape around `axis` into (outer, len, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| o * len * inner + i * inner + j;
            let max = (0..len).map(|i| src[at(i)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for i in 0..len {
                let e = (src[at(i)] - max).exp();
                out[at(i)] = e;
                total += e;
            }
            for i in 0..len {
                out[at(i)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Log-sum-exp of a slice with max subtraction.
pub fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let total: T = xs.map(|x| (x - max).exp()).sum();
    max + total.ln()
}

/// Scales `x` to unit Euclidean norm; returns zeros (and logs) when `‖x‖ ≤ eps`.
pub fn l2_normalize<T: Scalar>(x: &[T], eps: T) -> Vec<T> {
    let norm = dot(x, x).sqrt();
    if norm <= eps {
        warn!("l2_normalize: near-zero vector (norm {norm}) mapped to zero");
        return vec![T::zero(); x.len()];
    }
    x.iter().map(|&v| v / norm).collect()
}

/// Row-wise layer normalization over the last axis.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &[T], bias: &[T], eps: T) -> Result<Tensor<T>> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::Dimension(format!(
            "layer_norm gain/bias of length {}/{} for width {c}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = vec![T::zero(); x.numel()];
    for (src, dst) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        let (mean, inv_std) = row_moments(src, eps);
        for i in 0..c {
            dst[i] = (src[i] - mean) * inv_std * gain[i] + bias[i];
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of_usize(row.len());
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gathers rows of `table` by id.
pub fn embedding_lookup<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let [rows, d] = table.dims2()?;
    if ids.is_empty() {
        return Err(Error::Dimension("embedding lookup of zero ids".into()));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= rows {
            return Err(Error::Index(format!("id {id} outside table of {rows} rows")));
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(&[ids.len(), d], out)
}

/// Elementwise binary op; `b` is either the same shape as `a` or a vector
/// matching `a`'s last axis.
pub fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    if b.shape().len() == 1 && b.numel() == a.cols() {
        let c = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % c]))
            .collect();
        return Tensor::new(a.shape(), data);
    }
    Err(Error::Dimension(format!(
        "cannot broadcast {:?} against {:?}",
        b.shape(),
        a.shape()
    )))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip(a, b, |x, y| x + y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip(a, b, |x, y| x * y)
}
