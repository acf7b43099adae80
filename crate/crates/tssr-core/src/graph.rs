//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] is the computation record of one forward pass: ops evaluate
//! eagerly, values stay in the record, and [`Graph::backward`] replays the
//! record in reverse. Backward is a pure function of the record, so two
//! replays produce bit-identical gradients.

use std::rc::Rc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, matmul, matmul_nt, matmul_tn, transpose, Real, Tensor};

/// Handle to a node in the record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Key/query validity for attention: which positions of each batch row are
/// real (non-PAD), plus whether query `q` may only attend to keys `<= q`.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub batch: usize,
    pub heads: usize,
    pub t: usize,
    /// Row-major `batch x t`; true = real position.
    pub key_valid: Vec<bool>,
    pub causal: bool,
}

impl AttnMask {
    fn allowed(&self, outer: usize, q: usize, k: usize) -> bool {
        let b = outer / self.heads;
        (!self.causal || k <= q) && self.key_valid[b * self.t + k]
    }
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `x (m x n) + bias (n)` broadcast over rows.
    AddBias(Var, Var),
    MatMul(Var, Var),
    /// `a (m x k) @ b^T`, b stored `(n x k)`.
    MatMulNT(Var, Var),
    /// Batched `(B,m,k) @ (B,k,n)`.
    Bmm(Var, Var),
    /// Batched `(B,m,k) @ (B,n,k)^T`.
    BmmNT(Var, Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    AttnMaskedSoftmax(Var),
    LogSumExpRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    GatherRows(Var, Rc<Vec<usize>>),
    /// `out[i] = x[i, cols[i]]`.
    PickPerRow(Var, Rc<Vec<usize>>),
    /// `(batch*t) x d` -> `batch x d`, mean over mask-true positions.
    MaskedMeanPool {
        x: Var,
        mask: Rc<Vec<bool>>,
        batch: usize,
        t: usize,
    },
    ConcatCols(Var, Var),
    Transpose(Var),
    L2NormalizeRows(Var),
    /// Cosine of paired rows of two `m x d` inputs -> `m`.
    CosineRows(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    /// `(batch*t) x d` -> `(batch*heads, t, d/heads)`.
    SplitHeads {
        x: Var,
        batch: usize,
        t: usize,
        heads: usize,
    },
    /// Inverse of `SplitHeads`.
    MergeHeads {
        x: Var,
        batch: usize,
        t: usize,
        heads: usize,
    },
    Dropout(Var, Rc<Vec<T>>),
    Reshape(Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward replay, indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

/// One forward pass's computation record.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register an input. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.cols();
        assert_eq!(vb.numel(), n, "add_bias: bias width mismatch");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        self.push(t, Op::AddBias(x, bias), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (kb, n) = (vb.rows(), vb.cols());
        assert_eq!(k, kb, "matmul: inner dims differ");
        let data = matmul(va.data(), vb.data(), m, k, n);
        let t = Tensor::new(vec![m, n], data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (n, kb) = (vb.rows(), vb.cols());
        assert_eq!(k, kb, "matmul_nt: inner dims differ");
        let data = matmul_nt(va.data(), vb.data(), m, k, n);
        let t = Tensor::new(vec![m, n], data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMulNT(a, b), rg)
    }

    fn bmm_shapes(&self, a: Var, b: Var) -> (usize, usize, usize, usize) {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape().len(), 3, "bmm expects 3-D lhs");
        assert_eq!(vb.shape().len(), 3, "bmm expects 3-D rhs");
        assert_eq!(va.shape()[0], vb.shape()[0], "bmm: batch dims differ");
        (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2])
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (bs, m, k, n) = self.bmm_shapes(a, b);
        assert_eq!(self.value(b).shape()[1], k, "bmm: inner dims differ");
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); bs * m * n];
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
            let av = &va.data()[i * m * k..(i + 1) * m * k];
            let bv = &vb.data()[i * k * n..(i + 1) * k * n];
            c.copy_from_slice(&matmul(av, bv, m, k, n));
        });
        let t = Tensor::new(vec![bs, m, n], out);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Bmm(a, b), rg)
    }

    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape().len(), 3, "bmm_nt expects 3-D lhs");
        assert_eq!(vb.shape().len(), 3, "bmm_nt expects 3-D rhs");
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let n = vb.shape()[1];
        assert_eq!(vb.shape()[0], bs, "bmm_nt: batch dims differ");
        assert_eq!(vb.shape()[2], k, "bmm_nt: inner dims differ");
        let mut out = vec![T::zero(); bs * m * n];
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
            let av = &va.data()[i * m * k..(i + 1) * m * k];
            let bv = &vb.data()[i * n * k..(i + 1) * n * k];
            c.copy_from_slice(&matmul_nt(av, bv, m, k, n));
        });
        let t = Tensor::new(vec![bs, m, n], out);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::BmmNT(a, b), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Row softmax with max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        va.ensure_finite("softmax input")?;
        let n = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(t, Op::SoftmaxRows(a), rg))
    }

    /// Softmax over the allowed entries of attention score slices
    /// `(batch*heads, t, t)`; fully-masked query rows come out all-zero.
    pub fn attn_masked_softmax(&mut self, a: Var, mask: Rc<AttnMask>) -> Result<Var> {
        let va = self.value(a);
        va.ensure_finite("attention scores")?;
        let sh = va.shape();
        assert_eq!(sh.len(), 3, "attention scores must be 3-D");
        let (outer, tq, tk) = (sh[0], sh[1], sh[2]);
        assert_eq!(outer, mask.batch * mask.heads);
        assert_eq!(tq, mask.t);
        assert_eq!(tk, mask.t);
        let mut data = va.data().to_vec();
        for o in 0..outer {
            for q in 0..tq {
                let row = &mut data[(o * tq + q) * tk..(o * tq + q + 1) * tk];
                let mut mx = T::neg_infinity();
                for (k, &v) in row.iter().enumerate() {
                    if mask.allowed(o, q, k) && v > mx {
                        mx = v;
                    }
                }
                if mx == T::neg_infinity() {
                    for v in row.iter_mut() {
                        *v = T::zero();
                    }
                    continue;
                }
                let mut sum = T::zero();
                for (k, v) in row.iter_mut().enumerate() {
                    if mask.allowed(o, q, k) {
                        *v = (*v - mx).exp();
                        sum += *v;
                    } else {
                        *v = T::zero();
                    }
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        let t = Tensor::new(sh.to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(t, Op::AttnMaskedSoftmax(a), rg))
    }

    /// Per-row `log(sum(exp(x)))` with max-subtraction.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            out.push(logsumexp(&va.data()[i * n..(i + 1) * n]));
        }
        let t = Tensor::new(vec![m], out);
        let rg = self.rg(a);
        self.push(t, Op::LogSumExpRows(a), rg)
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = vx.cols();
        if vg.numel() != n || vb.numel() != n {
            return Err(Error::Shape(format!(
                "layer_norm: gamma/beta length {}/{} does not match width {}",
                vg.numel(),
                vb.numel(),
                n
            )));
        }
        if eps <= T::zero() {
            return Err(Error::Numeric("layer_norm: eps must be positive".into()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            let (mean, var) = mean_var(row);
            let inv = T::one() / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = vg.data()[j] * ((*v - mean) * inv) + vb.data()[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNormRows { x, gamma, beta, eps }, rg))
    }

    /// Row lookup: `out[i] = table[indices[i]]`. The embedding primitive.
    pub fn gather_rows(&mut self, table: Var, indices: Rc<Vec<usize>>) -> Var {
        let vt = self.value(table);
        let (rows, d) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &idx in indices.iter() {
            assert!(idx < rows, "gather_rows: index {idx} out of range {rows}");
            data.extend_from_slice(vt.row(idx));
        }
        let t = Tensor::new(vec![indices.len(), d], data);
        let rg = self.rg(table);
        self.push(t, Op::GatherRows(table, indices), rg)
    }

    pub fn pick_per_row(&mut self, x: Var, cols: Rc<Vec<usize>>) -> Var {
        let vx = self.value(x);
        let (m, n) = (vx.rows(), vx.cols());
        assert_eq!(cols.len(), m, "pick_per_row: one column per row");
        let mut data = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            assert!(c < n, "pick_per_row: column {c} out of range {n}");
            data.push(vx.data()[i * n + c]);
        }
        let t = Tensor::new(vec![m], data);
        let rg = self.rg(x);
        self.push(t, Op::PickPerRow(x, cols), rg)
    }

    /// Mean over mask-true positions of each batch row
    /// (`x` is `(batch*t) x d`, `mask` is `batch*t` bools).
    pub fn masked_mean_pool(
        &mut self,
        x: Var,
        mask: Rc<Vec<bool>>,
        batch: usize,
        t: usize,
    ) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        assert_eq!(vx.rows(), batch * t, "masked_mean_pool: row count mismatch");
        assert_eq!(mask.len(), batch * t, "masked_mean_pool: mask length mismatch");
        let mut data = vec![T::zero(); batch * d];
        for b in 0..batch {
            let mut cnt = 0usize;
            for l in 0..t {
                if mask[b * t + l] {
                    cnt += 1;
                    let row = vx.row(b * t + l);
                    for (o, &v) in data[b * d..(b + 1) * d].iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            if cnt == 0 {
                return Err(Error::Data(format!(
                    "masked_mean_pool: batch row {b} has no valid positions"
                )));
            }
            let inv = T::one() / T::from_f64(cnt as f64);
            for o in data[b * d..(b + 1) * d].iter_mut() {
                *o *= inv;
            }
        }
        let t_out = Tensor::new(vec![batch, d], data);
        let rg = self.rg(x);
        Ok(self.push(t_out, Op::MaskedMeanPool { x, mask, batch, t }, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, na) = (va.rows(), va.cols());
        let nb = vb.cols();
        assert_eq!(vb.rows(), m, "concat_cols: row count mismatch");
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let t = Tensor::new(vec![m, na + nb], data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::ConcatCols(a, b), rg)
    }

    pub fn transpose2d(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        let t = Tensor::new(vec![n, m], transpose(va.data(), m, n));
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let n = va.cols();
        let mut data = va.data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            let norm = l2_norm(row);
            if norm == T::zero() {
                return Err(Error::Numeric(format!(
                    "l2_normalize: row {i} has zero norm"
                )));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(t, Op::L2NormalizeRows(a), rg))
    }

    /// Cosine similarity of paired rows: two `m x d` inputs -> `m`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "cosine_rows: shape mismatch");
        let (m, n) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(m);
        for i in 0..m {
            let (ra, rb) = (va.row(i), vb.row(i));
            let (na, nb) = (l2_norm(ra), l2_norm(rb));
            if na == T::zero() || nb == T::zero() {
                return Err(Error::Numeric(format!(
                    "cosine: row {i} has zero norm"
                )));
            }
            data.push(dot(ra, rb) / (na * nb));
        }
        let _ = n;
        let t = Tensor::new(vec![m], data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::CosineRows(a, b), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(a).data() {
            acc += v;
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(acc), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.numel();
        let mut acc = T::zero();
        for &v in va.data() {
            acc += v;
        }
        let t = Tensor::scalar(acc / T::from_f64(n as f64));
        let rg = self.rg(a);
        self.push(t, Op::MeanAll(a), rg)
    }

    pub fn split_heads(&mut self, x: Var, batch: usize, t: usize, heads: usize) -> Var {
        let vx = self.value(x);
        let d = vx.cols();
        assert_eq!(vx.rows(), batch * t);
        assert_eq!(d % heads, 0, "model width must divide by head count");
        let dh = d / heads;
        let mut data = vec![T::zero(); batch * t * d];
        for b in 0..batch {
            for q in 0..t {
                let src = vx.row(b * t + q);
                for h in 0..heads {
                    let dst = ((b * heads + h) * t + q) * dh;
                    data[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let tn = Tensor::new(vec![batch * heads, t, dh], data);
        let rg = self.rg(x);
        self.push(tn, Op::SplitHeads { x, batch, t, heads }, rg)
    }

    pub fn merge_heads(&mut self, x: Var, batch: usize, t: usize, heads: usize) -> Var {
        let vx = self.value(x);
        let sh = vx.shape();
        assert_eq!(sh.len(), 3);
        assert_eq!(sh[0], batch * heads);
        assert_eq!(sh[1], t);
        let dh = sh[2];
        let d = dh * heads;
        let mut data = vec![T::zero(); batch * t * d];
        for b in 0..batch {
            for q in 0..t {
                for h in 0..heads {
                    let src = ((b * heads + h) * t + q) * dh;
                    let dst = (b * t + q) * d + h * dh;
                    data[dst..dst + dh].copy_from_slice(&vx.data()[src..src + dh]);
                }
            }
        }
        let tn = Tensor::new(vec![batch * t, d], data);
        let rg = self.rg(x);
        self.push(tn, Op::MergeHeads { x, batch, t, heads }, rg)
    }

    /// Inverted dropout; `p = 0` is the identity (no node recorded).
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p == 0.0 {
            return x;
        }
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0,1)");
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let keep: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| v * k)
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Dropout(x, Rc::new(keep)), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().to_vec()).reshaped(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Reverse replay from a scalar root. Pure: replaying twice yields
    /// bit-identical gradients.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward root must be a scalar"
        );
        assert!(
            self.rg(root),
            "backward root does not depend on any differentiable input"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            // Inputs always precede their consumers in the record.
            let (lower, upper) = grads.split_at_mut(id);
            let g = upper[0].as_ref().unwrap();
            self.backprop_node(id, g, lower);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, n) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += *n;
                    }
                }
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let da = g
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    acc(grads, *a, Tensor::new(va.shape().to_vec(), da));
                }
                if self.rg(*b) {
                    let db = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    acc(grads, *b, Tensor::new(vb.shape().to_vec(), db));
                }
            }
            Op::Scale(a, s) => {
                acc(grads, *a, g.map(|v| v * *s));
            }
            Op::AddBias(x, bias) => {
                acc(grads, *x, g.clone());
                if self.rg(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    acc(grads, *bias, Tensor::new(vec![n], db));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                if self.rg(*a) {
                    let da = matmul_nt(g.data(), vb.data(), m, n, k);
                    acc(grads, *a, Tensor::new(vec![m, k], da));
                }
                if self.rg(*b) {
                    let db = matmul_tn(va.data(), g.data(), m, k, n);
                    acc(grads, *b, Tensor::new(vec![k, n], db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = vb.rows();
                if self.rg(*a) {
                    let da = matmul(g.data(), vb.data(), m, n, k);
                    acc(grads, *a, Tensor::new(vec![m, k], da));
                }
                if self.rg(*b) {
                    let db = matmul_tn(g.data(), va.data(), m, n, k);
                    acc(grads, *b, Tensor::new(vec![n, k], db));
                }
            }
            Op::Bmm(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                if self.rg(*a) {
                    let mut da = vec![T::zero(); bs * m * k];
                    da.par_chunks_mut(m * k).enumerate().for_each(|(i, c)| {
                        let gv = &g.data()[i * m * n..(i + 1) * m * n];
                        let bv = &vb.data()[i * k * n..(i + 1) * k * n];
                        let bt = transpose(bv, k, n);
                        c.copy_from_slice(&matmul(gv, &bt, m, n, k));
                    });
                    acc(grads, *a, Tensor::new(vec![bs, m, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); bs * k * n];
                    db.par_chunks_mut(k * n).enumerate().for_each(|(i, c)| {
                        let gv = &g.data()[i * m * n..(i + 1) * m * n];
                        let av = &va.data()[i * m * k..(i + 1) * m * k];
                        c.copy_from_slice(&matmul_tn(av, gv, m, k, n));
                    });
                    acc(grads, *b, Tensor::new(vec![bs, k, n], db));
                }
            }
            Op::BmmNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[1];
                if self.rg(*a) {
                    let mut da = vec![T::zero(); bs * m * k];
                    da.par_chunks_mut(m * k).enumerate().for_each(|(i, c)| {
                        let gv = &g.data()[i * m * n..(i + 1) * m * n];
                        let bv = &vb.data()[i * n * k..(i + 1) * n * k];
                        c.copy_from_slice(&matmul(gv, bv, m, n, k));
                    });
                    acc(grads, *a, Tensor::new(vec![bs, m, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); bs * n * k];
                    db.par_chunks_mut(n * k).enumerate().for_each(|(i, c)| {
                        let gv = &g.data()[i * m * n..(i + 1) * m * n];
                        let av = &va.data()[i * m * k..(i + 1) * m * k];
                        c.copy_from_slice(&matmul_tn(gv, av, m, n, k));
                    });
                    acc(grads, *b, Tensor::new(vec![bs, n, k], db));
                }
            }
            Op::Exp(a) => {
                let y = &node.value;
                let da = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv)
                    .collect();
                acc(grads, *a, Tensor::new(y.shape().to_vec(), da));
            }
            Op::Log(a) => {
                let va = self.value(*a);
                let da = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                acc(grads, *a, Tensor::new(va.shape().to_vec(), da));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let da = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                acc(grads, *a, Tensor::new(y.shape().to_vec(), da));
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let da = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(grads, *a, Tensor::new(va.shape().to_vec(), da));
            }
            Op::SoftmaxRows(a) | Op::AttnMaskedSoftmax(a) => {
                // dx = y * (g - sum(g*y)) per row; masked entries have y = 0.
                let y = &node.value;
                let n = y.cols();
                let mut da = vec![T::zero(); y.numel()];
                for (i, drow) in da.chunks_mut(n).enumerate() {
                    let yrow = &y.data()[i * n..(i + 1) * n];
                    let grow = &g.data()[i * n..(i + 1) * n];
                    let s = dot(grow, yrow);
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = yv * (gv - s);
                    }
                }
                acc(grads, *a, Tensor::new(y.shape().to_vec(), da));
            }
            Op::LogSumExpRows(a) => {
                let va = self.value(*a);
                let (m, n) = (va.rows(), va.cols());
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    let xrow = va.row(i);
                    let drow = &mut da[i * n..(i + 1) * n];
                    drow.copy_from_slice(xrow);
                    softmax_in_place(drow);
                    let gv = g.data()[i];
                    for d in drow.iter_mut() {
                        *d *= gv;
                    }
                }
                acc(grads, *a, Tensor::new(vec![m, n], da));
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (vx, vg) = (self.value(*x), self.value(*gamma));
                let n = vx.cols();
                let m = vx.rows();
                let mut dx = vec![T::zero(); m * n];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let inv_n = T::one() / T::from_f64(n as f64);
                for i in 0..m {
                    let xrow = vx.row(i);
                    let grow = &g.data()[i * n..(i + 1) * n];
                    let (mean, var) = mean_var(xrow);
                    let inv_std = T::one() / (var + *eps).sqrt();
                    // xhat, d_xhat, and the two row means the backward needs.
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    let mut xhat = vec![T::zero(); n];
                    let mut dxhat = vec![T::zero(); n];
                    for j in 0..n {
                        xhat[j] = (xrow[j] - mean) * inv_std;
                        dxhat[j] = grow[j] * vg.data()[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    let mean_dxhat = sum_dxhat * inv_n;
                    let mean_dxhat_xhat = sum_dxhat_xhat * inv_n;
                    for j in 0..n {
                        dx[i * n + j] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                acc(grads, *x, Tensor::new(vx.shape().to_vec(), dx));
                acc(grads, *gamma, Tensor::new(vec![n], dgamma));
                acc(grads, *beta, Tensor::new(vec![n], dbeta));
            }
            Op::GatherRows(table, indices) => {
                let vt = self.value(*table);
                let d = vt.cols();
                let mut dt = vec![T::zero(); vt.numel()];
                for (i, &idx) in indices.iter().enumerate() {
                    let grow = &g.data()[i * d..(i + 1) * d];
                    for (dst, &gv) in dt[idx * d..(idx + 1) * d].iter_mut().zip(grow) {
                        *dst += gv;
                    }
                }
                acc(grads, *table, Tensor::new(vt.shape().to_vec(), dt));
            }
            Op::PickPerRow(x, cols) => {
                let vx = self.value(*x);
                let n = vx.cols();
                let mut dx = vec![T::zero(); vx.numel()];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * n + c] += g.data()[i];
                }
                acc(grads, *x, Tensor::new(vx.shape().to_vec(), dx));
            }
            Op::MaskedMeanPool { x, mask, batch, t } => {
                let vx = self.value(*x);
                let d = vx.cols();
                let mut dx = vec![T::zero(); vx.numel()];
                for b in 0..*batch {
                    let cnt = (0..*t).filter(|&l| mask[b * t + l]).count();
                    let inv = T::one() / T::from_f64(cnt as f64);
                    for l in 0..*t {
                        if mask[b * t + l] {
                            let grow = &g.data()[b * d..(b + 1) * d];
                            let drow = &mut dx[(b * t + l) * d..(b * t + l + 1) * d];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += gv * inv;
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::new(vx.shape().to_vec(), dx));
            }
            Op::ConcatCols(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, na, nb) = (va.rows(), va.cols(), vb.cols());
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * na];
                    for i in 0..m {
                        da[i * na..(i + 1) * na]
                            .copy_from_slice(&g.data()[i * (na + nb)..i * (na + nb) + na]);
                    }
                    acc(grads, *a, Tensor::new(vec![m, na], da));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); m * nb];
                    for i in 0..m {
                        db[i * nb..(i + 1) * nb].copy_from_slice(
                            &g.data()[i * (na + nb) + na..(i + 1) * (na + nb)],
                        );
                    }
                    acc(grads, *b, Tensor::new(vec![m, nb], db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = {
                    let va = self.value(*a);
                    (va.rows(), va.cols())
                };
                let da = transpose(g.data(), n, m);
                acc(grads, *a, Tensor::new(vec![m, n], da));
            }
            Op::L2NormalizeRows(a) => {
                let va = self.value(*a);
                let y = &node.value;
                let n = va.cols();
                let m = va.rows();
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    let xrow = va.row(i);
                    let yrow = y.row(i);
                    let grow = &g.data()[i * n..(i + 1) * n];
                    let norm = l2_norm(xrow);
                    let gy = dot(grow, yrow);
                    for j in 0..n {
                        da[i * n + j] = (grow[j] - yrow[j] * gy) / norm;
                    }
                }
                acc(grads, *a, Tensor::new(va.shape().to_vec(), da));
            }
            Op::CosineRows(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = va.cols();
                let m = va.rows();
                let mut da = vec![T::zero(); m * n];
                let mut db = vec![T::zero(); m * n];
                for i in 0..m {
                    let (ra, rb) = (va.row(i), vb.row(i));
                    let (na_, nb_) = (l2_norm(ra), l2_norm(rb));
                    let c = dot(ra, rb) / (na_ * nb_);
                    let gv = g.data()[i];
                    for j in 0..n {
                        da[i * n + j] = gv * (rb[j] / (na_ * nb_) - c * ra[j] / (na_ * na_));
                        db[i * n + j] = gv * (ra[j] / (na_ * nb_) - c * rb[j] / (nb_ * nb_));
                    }
                }
                acc(grads, *a, Tensor::new(va.shape().to_vec(), da));
                acc(grads, *b, Tensor::new(vb.shape().to_vec(), db));
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                let gv = g.scalar_value();
                acc(grads, *a, Tensor::full(va.shape().to_vec(), gv));
            }
            Op::MeanAll(a) => {
                let va = self.value(*a);
                let gv = g.scalar_value() / T::from_f64(va.numel() as f64);
                acc(grads, *a, Tensor::full(va.shape().to_vec(), gv));
            }
            Op::SplitHeads { x, batch, t, heads } => {
                let vx = self.value(*x);
                let d = vx.cols();
                let dh = d / heads;
                let mut dx = vec![T::zero(); vx.numel()];
                for b in 0..*batch {
                    for q in 0..*t {
                        for h in 0..*heads {
                            let src = ((b * heads + h) * t + q) * dh;
                            let dst = (b * t + q) * d + h * dh;
                            dx[dst..dst + dh].copy_from_slice(&g.data()[src..src + dh]);
                        }
                    }
                }
                acc(grads, *x, Tensor::new(vx.shape().to_vec(), dx));
            }
            Op::MergeHeads { x, batch, t, heads } => {
                let vx = self.value(*x);
                let dh = vx.shape()[2];
                let d = dh * heads;
                let mut dx = vec![T::zero(); vx.numel()];
                for b in 0..*batch {
                    for q in 0..*t {
                        for h in 0..*heads {
                            let dst = ((b * heads + h) * t + q) * dh;
                            let src = (b * t + q) * d + h * dh;
                            dx[dst..dst + dh].copy_from_slice(&g.data()[src..src + dh]);
                        }
                    }
                }
                acc(grads, *x, Tensor::new(vx.shape().to_vec(), dx));
            }
            Op::Dropout(x, keep) => {
                let vx = self.value(*x);
                let da = g
                    .data()
                    .iter()
                    .zip(keep.iter())
                    .map(|(&gv, &kv)| gv * kv)
                    .collect();
                acc(grads, *x, Tensor::new(vx.shape().to_vec(), da));
            }
            Op::Reshape(x) => {
                let vx = self.value(*x);
                let da = Tensor::new(g.shape().to_vec(), g.data().to_vec())
                    .reshaped(vx.shape().to_vec());
                acc(grads, *x, da);
            }
        }
    }
}

/// Overflow-safe in-place softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut mx = T::neg_infinity();
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Overflow-safe `log(sum(exp(row)))`.
pub fn logsumexp<T: Real>(row: &[T]) -> T {
    let mut mx = T::neg_infinity();
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for &v in row.iter() {
        sum += (v - mx).exp();
    }
    mx + sum.ln()
}

fn mean_var<T: Real>(row: &[T]) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mean = T::zero();
    for &v in row {
        mean += v;
    }
    mean /= n;
    let mut var = T::zero();
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    (mean, var)
}
