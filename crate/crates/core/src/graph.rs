//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is built fresh for each forward pass. Every operation appends a
//! node holding its output value plus whatever it needs for the backward pass.
//! [`Graph::backward`] walks the list in reverse and returns [`Gradients`],
//! which can then be accumulated into the parameters that were read.
//!
//! Nodes that do not depend on any trainable leaf are marked as not requiring
//! gradients and are skipped during the backward sweep, so a frozen base with
//! a small adapter only pays for activation gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, gemm_acc, gemm_at_acc, gemm_bt_acc};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

/// Additive logit applied to masked attention keys.
pub const ATTENTION_MASK_VALUE: f64 = -1e9;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Packing of `n_seq` sequences of `seq_len` rows each into one matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub n_seq: usize,
    pub seq_len: usize,
    /// `n_seq * seq_len` flags, true for real (non-pad) positions.
    pub mask: Vec<bool>,
}

impl SeqLayout {
    pub fn new(n_seq: usize, seq_len: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != n_seq * seq_len {
            return Err(Error::Dimension(format!(
                "mask of length {} for {n_seq}×{seq_len} layout",
                mask.len()
            )));
        }
        Ok(Self { n_seq, seq_len, mask })
    }

    pub fn rows(&self) -> usize {
        self.n_seq * self.seq_len
    }

    fn seq_mask(&self, s: usize) -> &[bool] {
        &self.mask[s * self.seq_len..(s + 1) * self.seq_len]
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    ScaleBy { x: Var, s: Var },
    Relu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax { x: Var, axis: usize },
    Embedding { table: Var, ids: Vec<usize> },
    L2NormalizeRows { x: Var, norms: Vec<T>, eps: T },
    Attention { q: Var, k: Var, v: Var, layout: SeqLayout, heads: usize, probs: Vec<T> },
    MaskedMeanPool { x: Var, layout: SeqLayout, counts: Vec<usize> },
    PrependRows { x: Var, prefix: Var, n_seq: usize, seq_len: usize },
    Sum { x: Var },
    NtXent { s: Var, row_p: Vec<T>, col_p: Vec<T> },
    GramDeviation { m: Var, rows_orthonormal: bool, dev: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Reads a parameter into the graph. Repeated reads of the same id share
    /// one leaf, so gradients from every use are summed.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id) {
            return v;
        }
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.params.insert(p.id.clone(), v);
        v
    }

    pub fn param_var(&self, id: &str) -> Option<Var> {
        self.params.get(id).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul_bt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulBt { a, b }, rg))
    }

    /// Elementwise sum; `b` may be a vector broadcast over `a`'s last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product; `b` may be a vector broadcast over `a`'s last axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dimension("scale_by expects a one-element tensor".into()));
        }
        let factor = self.value(s).data()[0];
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::ScaleBy { x, s }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = ops::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != c || b.numel() != c {
            return Err(Error::Dimension(format!("layer_norm parameters do not match width {c}")));
        }
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let (mean, is) = ops::row_moments(row, eps);
            inv_std.push(is);
            for ((&v, &gi), &bi) in row.iter().zip(g.data()).zip(b.data()) {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gi + bi);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = ops::softmax(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = ops::embedding_lookup(self.value(table), ids)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Normalizes each row to unit length; rows with norm ≤ `eps` become zero.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            norms.push(ops::dot(row, row).sqrt());
            out.extend(ops::l2_normalize(row, eps));
        }
        let value = Tensor::new(xv.shape(), out).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, Op::L2NormalizeRows { x, norms, eps }, rg)
    }

    /// Multi-head scaled dot-product self-attention within each packed
    /// sequence. Keys at masked positions get an additive
    /// [`ATTENTION_MASK_VALUE`] before the softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &SeqLayout, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let [rows, d] = qv.dims2()?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() || rows != layout.rows() {
            return Err(Error::Dimension(format!(
                "attention inputs {:?}/{:?}/{:?} for layout {}×{}",
                qv.shape(),
                kv.shape(),
                vv.shape(),
                layout.n_seq,
                layout.seq_len
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("width {d} not divisible by {heads} heads")));
        }
        let (n, t, dh) = (layout.n_seq, layout.seq_len, d / heads);
        let scale = T::one() / T::of_usize(dh).sqrt();
        let masked = T::of(ATTENTION_MASK_VALUE);
        let mut probs = vec![T::zero(); n * heads * t * t];
        let mut out = vec![T::zero(); rows * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut logits = vec![T::zero(); t];
        for s in 0..n {
            let mask = layout.seq_mask(s);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qd[(s * t + i) * d + off..][..dh];
                    for j in 0..t {
                        let kj = &kd[(s * t + j) * d + off..][..dh];
                        logits[j] = ops::dot(qi, kj) * scale + if mask[j] { T::zero() } else { masked };
                    }
                    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                    let p = &mut probs[((s * heads + h) * t + i) * t..][..t];
                    let mut total = T::zero();
                    for j in 0..t {
                        p[j] = (logits[j] - max).exp();
                        total += p[j];
                    }
                    let o = &mut out[(s * t + i) * d + off..][..dh];
                    for j in 0..t {
                        p[j] /= total;
                        let vj = &vd[(s * t + j) * d + off..][..dh];
                        for (oo, &vv) in o.iter_mut().zip(vj) {
                            *oo += p[j] * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean over the unmasked rows of each packed sequence: `[n·t, d] → [n, d]`.
    pub fn masked_mean_pool(&mut self, x: Var, layout: &SeqLayout) -> Result<Var> {
        let xv = self.value(x);
        let [rows, d] = xv.dims2()?;
        if rows != layout.rows() {
            return Err(Error::Dimension(format!("pool over {rows} rows with layout of {}", layout.rows())));
        }
        let mut counts = Vec::with_capacity(layout.n_seq);
        let mut out = vec![T::zero(); layout.n_seq * d];
        for s in 0..layout.n_seq {
            let mask = layout.seq_mask(s);
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::Data(format!("sequence {s} has no unmasked positions")));
            }
            let inv = T::one() / T::of_usize(count);
            let dst = &mut out[s * d..(s + 1) * d];
            for (j, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                let src = xv.row(s * layout.seq_len + j);
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v * inv;
                }
            }
            counts.push(count);
        }
        let value = Tensor::new(&[layout.n_seq, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::MaskedMeanPool {
                x,
                layout: layout.clone(),
                counts,
            },
            rg,
        ))
    }

    /// Inserts the `m` rows of `prefix` in front of every packed sequence:
    /// `[n·t, d] → [n·(m+t), d]`.
    pub fn prepend_rows(&mut self, x: Var, prefix: Var, n_seq: usize, seq_len: usize) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(prefix));
        let [rows, d] = xv.dims2()?;
        let [m, d2] = pv.dims2()?;
        if rows != n_seq * seq_len || d != d2 {
            return Err(Error::Dimension(format!(
                "prepend {:?} onto {:?} as {n_seq}×{seq_len}",
                pv.shape(),
                xv.shape()
            )));
        }
        let mut out = Vec::with_capacity((rows + n_seq * m) * d);
        for s in 0..n_seq {
            out.extend_from_slice(pv.data());
            out.extend_from_slice(&xv.data()[s * seq_len * d..(s + 1) * seq_len * d]);
        }
        let value = Tensor::new(&[n_seq * (m + seq_len), d], out)?;
        let rg = self.rg(&[x, prefix]);
        Ok(self.push(
            value,
            Op::PrependRows {
                x,
                prefix,
                n_seq,
                seq_len,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[1], vec![total]).expect("scalar"), Op::Sum { x }, rg)
    }

    /// Symmetric in-batch contrastive loss over a square score matrix.
    pub fn nt_xent(&mut self, s: Var) -> Result<Var> {
        let sv = self.value(s);
        let (loss, row_p, col_p) = crate::objective::nt_xent_with_probs(sv)?;
        let rg = self.rg(&[s]);
        Ok(self.push(Tensor::new(&[1], vec![loss])?, Op::NtXent { s, row_p, col_p }, rg))
    }

    /// `‖MᵀM − I‖²_F` (columns orthonormal) or `‖MMᵀ − I‖²_F` when
    /// `rows_orthonormal` is set.
    pub fn gram_deviation(&mut self, m: Var, rows_orthonormal: bool) -> Result<Var> {
        let mv = self.value(m);
        let [r, c] = mv.dims2()?;
        let (k, gram) = if rows_orthonormal {
            let mut g = vec![T::zero(); r * r];
            gemm_bt_acc(mv.data(), mv.data(), &mut g, r, c, r);
            (r, g)
        } else {
            let mut g = vec![T::zero(); c * c];
            gemm_at_acc(mv.data(), mv.data(), &mut g, r, c, c);
            (c, g)
        };
        let mut dev = gram;
        for i in 0..k {
            dev[i * k + i] -= T::one();
        }
        let total = dev.iter().map(|&x| x * x).sum();
        let rg = self.rg(&[m]);
        Ok(self.push(
            Tensor::new(&[1], vec![total])?,
            Op::GramDeviation {
                m,
                rows_orthonormal,
                dev,
            },
            rg,
        ))
    }

    /// Back-propagates from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backward_node(node, &dy, &mut grads)?;
            }
            grads[idx] = Some(dy);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let zeros = |v: Var| vec![T::zero(); self.value(v).numel()];
        let acc = |v: Var, delta: Vec<T>, grads: &mut [Option<Vec<T>>]| match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let [m, k] = self.value(*a).dims2()?;
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    let mut da = zeros(*a);
                    gemm_bt_acc(dy, self.value(*b).data(), &mut da, m, n, k);
                    acc(*a, da, grads);
                }
                if self.needs(*b) {
                    let mut db = zeros(*b);
                    gemm_at_acc(self.value(*a).data(), dy, &mut db, m, k, n);
                    acc(*b, db, grads);
                }
            }
            Op::MatMulBt { a, b } => {
                let [m, k] = self.value(*a).dims2()?;
                let n = self.value(*b).rows();
                if self.needs(*a) {
                    let mut da = zeros(*a);
                    gemm_acc(dy, self.value(*b).data(), &mut da, m, n, k);
                    acc(*a, da, grads);
                }
                if self.needs(*b) {
                    let mut db = zeros(*b);
                    gemm_at_acc(dy, self.value(*a).data(), &mut db, m, n, k);
                    acc(*b, db, grads);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(*a, dy.to_vec(), grads);
                }
                if self.needs(*b) {
                    let db = reduce_broadcast(dy, self.value(*b).numel());
                    acc(*b, db, grads);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bn = bv.len();
                if self.needs(*a) {
                    let da = dy.iter().enumerate().map(|(i, &g)| g * bv[i % bn]).collect();
                    acc(*a, da, grads);
                }
                if self.needs(*b) {
                    let prod: Vec<T> = dy.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    acc(*b, reduce_broadcast(&prod, bn), grads);
                }
            }
            Op::Scale { x, factor } => {
                acc(*x, dy.iter().map(|&g| g * *factor).collect(), grads);
            }
            Op::ScaleBy { x, s } => {
                let factor = self.value(*s).data()[0];
                if self.needs(*x) {
                    acc(*x, dy.iter().map(|&g| g * factor).collect(), grads);
                }
                if self.needs(*s) {
                    acc(*s, vec![ops::dot(dy, self.value(*x).data())], grads);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                acc(*x, dx, grads);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = self.value(*x).cols();
                let g = self.value(*gain).data();
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(dy.len());
                    let cn = T::of_usize(c);
                    for (r, (dyr, xh)) in dy.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let gh: Vec<T> = dyr.iter().zip(g).map(|(&a, &b)| a * b).collect();
                        let mean_gh = gh.iter().copied().sum::<T>() / cn;
                        let mean_ghx = ops::dot(&gh, xh) / cn;
                        for i in 0..c {
                            dx.push(inv_std[r] * (gh[i] - mean_gh - xh[i] * mean_ghx));
                        }
                    }
                    acc(*x, dx, grads);
                }
                if self.needs(*gain) {
                    let prod: Vec<T> = dy.iter().zip(xhat).map(|(&a, &b)| a * b).collect();
                    acc(*gain, reduce_broadcast(&prod, c), grads);
                }
                if self.needs(*bias) {
                    acc(*bias, reduce_broadcast(dy, c), grads);
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = ops::axis_split(node.value.shape(), *axis)?;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * len * inner + i * inner + j;
                        let inner_prod: T = (0..len).map(|i| y[at(i)] * dy[at(i)]).sum();
                        for i in 0..len {
                            dx[at(i)] = y[at(i)] * (dy[at(i)] - inner_prod);
                        }
                    }
                }
                acc(*x, dx, grads);
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                let mut dt = zeros(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for (a, &b) in dt[id * d..(id + 1) * d].iter_mut().zip(&dy[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                acc(*table, dt, grads);
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    if n <= *eps {
                        continue;
                    }
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &dy[r * c..(r + 1) * c];
                    let proj = ops::dot(yr, gr);
                    for i in 0..c {
                        dx[r * c + i] = (gr[i] - yr[i] * proj) / n;
                    }
                }
                acc(*x, dx, grads);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => {
                let d = self.value(*q).cols();
                let (n, t, dh) = (layout.n_seq, layout.seq_len, d / heads);
                let scale = T::one() / T::of_usize(dh).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let (mut dq, mut dk, mut dv) = (zeros(*q), zeros(*k), zeros(*v));
                let mut dp = vec![T::zero(); t];
                for s in 0..n {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..t {
                            let p = &probs[((s * heads + h) * t + i) * t..][..t];
                            let go = &dy[(s * t + i) * d + off..][..dh];
                            for j in 0..t {
                                let vj = &vd[(s * t + j) * d + off..][..dh];
                                dp[j] = ops::dot(go, vj);
                                let dvj = &mut dv[(s * t + j) * d + off..][..dh];
                                for (a, &g) in dvj.iter_mut().zip(go) {
                                    *a += p[j] * g;
                                }
                            }
                            let pdp: T = (0..t).map(|j| p[j] * dp[j]).sum();
                            for j in 0..t {
                                let ds = p[j] * (dp[j] - pdp) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let qrow = (s * t + i) * d + off;
                                let krow = (s * t + j) * d + off;
                                for e in 0..dh {
                                    dq[qrow + e] += ds * kd[krow + e];
                                    dk[krow + e] += ds * qd[qrow + e];
                                }
                            }
                        }
                    }
                }
                for (var, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(var) {
                        acc(var, g, grads);
                    }
                }
            }
            Op::MaskedMeanPool { x, layout, counts } => {
                let d = node.value.cols();
                let mut dx = zeros(*x);
                for s in 0..layout.n_seq {
                    let inv = T::one() / T::of_usize(counts[s]);
                    for (j, _) in layout.seq_mask(s).iter().enumerate().filter(|(_, &m)| m) {
                        let row = (s * layout.seq_len + j) * d;
                        for e in 0..d {
                            dx[row + e] = dy[s * d + e] * inv;
                        }
                    }
                }
                acc(*x, dx, grads);
            }
            Op::PrependRows {
                x,
                prefix,
                n_seq,
                seq_len,
            } => {
                let d = node.value.cols();
                let m = self.value(*prefix).rows();
                let block = (m + seq_len) * d;
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(n_seq * seq_len * d);
                    for s in 0..*n_seq {
                        dx.extend_from_slice(&dy[s * block + m * d..(s + 1) * block]);
                    }
                    acc(*x, dx, grads);
                }
                if self.needs(*prefix) {
                    let mut dp = vec![T::zero(); m * d];
                    for s in 0..*n_seq {
                        for (a, &b) in dp.iter_mut().zip(&dy[s * block..s * block + m * d]) {
                            *a += b;
                        }
                    }
                    acc(*prefix, dp, grads);
                }
            }
            Op::Sum { x } => {
                acc(*x, vec![dy[0]; self.value(*x).numel()], grads);
            }
            Op::NtXent { s, row_p, col_p } => {
                let n = self.value(*s).rows();
                let w = dy[0] / T::of_usize(2 * n);
                let mut ds = Vec::with_capacity(n * n);
                for i in 0..n {
                    for j in 0..n {
                        let diag = if i == j { T::of(2.0) } else { T::zero() };
                        ds.push(w * (row_p[i * n + j] + col_p[i * n + j] - diag));
                    }
                }
                acc(*s, ds, grads);
            }
            Op::GramDeviation {
                m,
                rows_orthonormal,
                dev,
            } => {
                let mv = self.value(*m);
                let [r, c] = mv.dims2()?;
                let mut dm = vec![T::zero(); r * c];
                if *rows_orthonormal {
                    // 4 (MMᵀ − I) M
                    gemm_acc(dev, mv.data(), &mut dm, r, r, c);
                } else {
                    // 4 M (MᵀM − I)
                    gemm_acc(mv.data(), dev, &mut dm, r, c, c);
                }
                let f = T::of(4.0) * dy[0];
                acc(*m, dm.into_iter().map(|x| x * f).collect(), grads);
            }
        }
        Ok(())
    }

    /// Adds this graph's gradients into the matching trainable parameters.
    pub fn accumulate_into<'a>(
        &self,
        grads: &Gradients<T>,
        params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    ) -> Result<()> {
        for p in params {
            if !p.trainable {
                continue;
            }
            if let Some(g) = self.param_var(&p.id).and_then(|v| grads.wrt(v)) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Sums a full-shape gradient down to a last-axis vector of length `n`
/// (identity when the sizes already agree).
fn reduce_broadcast<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for row in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
