//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation in the order it is executed. Values are
//! computed eagerly; [`Tape::backward`] then walks the record in reverse and
//! accumulates adjoints into the leaves that asked for gradients.
//!
//! Leaves can borrow their value (`Cow::Borrowed`), which is how frozen
//! backbone weights enter a training step without being copied.
//!
//! ```
//! use progressive_lora::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(&[1.0, 2.0, 3.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

use std::borrow::Cow;

use super::tensor::{
    check_finite, compensated_sum, dot, matmul_dims, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, softmax_axis,
    Tensor,
};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivScalar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Abs(Var),
    Sqrt(Var),
    Softmax(Var, usize),
    CausalSoftmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Dot(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    tracked: bool,
    grad: Option<Vec<f64>>,
}

/// Operation record plus leaf gradients. Single-threaded; independent tapes
/// may live on separate threads.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Records a borrowed leaf that never receives gradients.
    pub fn constant(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    /// Records a borrowed leaf that receives gradients.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracked: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad: false,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, `None` for leaves that do not require
    /// gradients or have not been reached by a backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- forward operations -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, p, n) = matmul_dims("matmul", va, vb)?;
        let mut out = vec![0.0; m * n];
        matmul_kernel(va.data(), vb.data(), &mut out, m, p, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a[m×p]`, `b[n×p]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[1] {
            return Err(Error::shape("matmul_t", va.shape(), vb.shape()));
        }
        let (m, p, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_kernel(va.data(), vb.data(), &mut out, m, p, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulT(a, b), &[a, b]))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise sum of equally shaped tensors, compensated per entry.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("add_n needs at least one input".into()))?;
        let shape = self.shape(first).to_vec();
        for p in parts {
            if self.shape(*p) != shape.as_slice() {
                return Err(Error::shape("add_n", &shape, self.shape(*p)));
            }
        }
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| compensated_sum(parts.iter().map(|p| self.value(*p).data()[i])))
            .collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::AddN(parts.to_vec()), parts))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[1×n]` (or `[n]`) row to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        let n = va.cols();
        if vr.numel() != n {
            return Err(Error::shape("add_row", va.shape(), vr.shape()));
        }
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, r) in chunk.iter_mut().zip(vr.data()) {
                *d += r;
            }
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    /// Scales row `i` of `a[m×n]` by `col[i]`, where `col` has `m` entries.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(col));
        let (m, n) = (va.rows(), va.cols());
        if vc.numel() != m {
            return Err(Error::shape("mul_col", va.shape(), vc.shape()));
        }
        let mut data = va.data().to_vec();
        for (i, chunk) in data.chunks_mut(n).enumerate() {
            let s = vc.data()[i];
            chunk.iter_mut().for_each(|d| *d *= s);
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulCol(a, col), &[a, col]))
    }

    /// Divides every entry of `a` by the scalar `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (va, vs) = (self.value(a), self.value(s));
        if vs.numel() != 1 {
            return Err(Error::shape("div_scalar", va.shape(), vs.shape()));
        }
        let d = vs.item();
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x / d).collect())?;
        Ok(self.push(t, Op::DivScalar(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).scale(c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x + c).collect()).expect("shape preserved");
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| x * sigmoid(x)).collect())
            .expect("shape preserved");
        self.push(t, Op::Silu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x.abs()).collect()).expect("shape preserved");
        self.push(t, Op::Abs(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if let Some(x) = va.data().iter().find(|x| !(**x > 0.0)) {
            return Err(Error::Numeric {
                op: "sqrt",
                detail: format!("non-positive input {x}"),
            });
        }
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x.sqrt()).collect())?;
        Ok(self.push(t, Op::Sqrt(a), &[a]))
    }

    /// Softmax along `axis`, stabilized by max subtraction. NaN or infinite
    /// input is rejected.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a).softmax(axis)?;
        Ok(self.push(t, Op::Softmax(a, axis), &[a]))
    }

    /// Softmax over the last axis of the `[T×T]` matrix `a` where row `i`
    /// only sees columns `j ≤ i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 || va.shape()[0] != va.shape()[1] {
            return Err(Error::shape("causal_softmax", va.shape(), &[va.rows(), va.rows()]));
        }
        check_finite("causal_softmax", va.data())?;
        let n = va.cols();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let row = &va.data()[i * n..i * n + i + 1];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..i * n + i + 1];
            let mut sum = 0.0;
            for (o, x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            out.iter_mut().for_each(|o| *o /= sum);
        }
        let t = Tensor::new(vec![n, n], data)?;
        Ok(self.push(t, Op::CausalSoftmax(a), &[a]))
    }

    /// Row-wise RMS normalization with a learned gain of width `n`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let n = vx.cols();
        if vg.numel() != n {
            return Err(Error::shape("rms_norm", vx.shape(), vg.shape()));
        }
        let mut data = Vec::with_capacity(vx.numel());
        let mut inv_rms = Vec::with_capacity(vx.rows());
        for row in vx.data().chunks(n) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(vg.data()).map(|(v, g)| v * inv * g));
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Gathers rows of `table[V×d]` into `[ids.len()×d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (v, d) = (vt.rows(), vt.cols());
        if ids.is_empty() {
            return Err(Error::Contract("gather needs at least one index".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "gather",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = (vx.rows(), vx.cols());
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", vx.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for row in vx.data().chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(vec![m, len], data)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = (vx.rows(), vx.cols());
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_rows", vx.shape(), &[start, len]));
        }
        let data = vx.data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(vec![len, n], data)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one part".into()))?;
        let m = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let vp = self.value(*p);
            if vp.rows() != m {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), vp.shape()));
            }
            total += vp.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Column means of `x[m×n]` as a `[1×n]` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (m, n) = (vx.rows(), vx.cols());
        let mut data = vec![0.0; n];
        for row in vx.data().chunks(n) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let t = Tensor::new(vec![1, n], data).expect("nonempty");
        self.push(t, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = compensated_sum(self.value(x).data().iter().copied());
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Inner product of two tensors with the same number of entries.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.numel() != vb.numel() {
            return Err(Error::shape("dot", va.shape(), vb.shape()));
        }
        let s = dot(va.data(), vb.data());
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (t, v) = (vl.rows(), vl.cols());
        if targets.len() != t || t == 0 {
            return Err(Error::shape("cross_entropy", vl.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                size: v,
            });
        }
        check_finite("cross_entropy", vl.data())?;
        let mut probs = vl.data().to_vec();
        softmax_axis(&mut probs, &[t, v], 1);
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = vl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= t as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ----- reverse pass -------------------------------------------------------

    /// Accumulates d`loss`/d`leaf` into every leaf that requires gradients.
    /// Gradients add up across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if self.nodes[i].requires_grad {
                    match &mut self.nodes[i].grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, p, n) = (va.rows(), va.cols(), vb.cols());
                if let Some(ga) = slot(nodes, adj, *a) {
                    // dA = dC · Bᵀ
                    matmul_nt_kernel(g, vb.data(), ga, m, n, p);
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    // dB = Aᵀ · dC
                    matmul_tn_kernel(va.data(), g, gb, p, m, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, p, n) = (va.rows(), va.cols(), vb.rows());
                if let Some(ga) = slot(nodes, adj, *a) {
                    // dA = dC · B
                    matmul_kernel(g, vb.data(), ga, m, n, p);
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    // dB = dCᵀ · A
                    matmul_tn_kernel(g, va.data(), gb, n, m, p);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = slot(nodes, adj, *v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddN(parts) => {
                for v in parts {
                    if let Some(gv) = slot(nodes, adj, *v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot(nodes, adj, *a) {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(vb.data()) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(va.data()) {
                        *x += gy * av;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    add_into(ga, g);
                }
                if let Some(gr) = slot(nodes, adj, *row) {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::MulCol(a, col) => {
                let (va, vc) = (val(*a), val(*col));
                let n = va.cols();
                if let Some(ga) = slot(nodes, adj, *a) {
                    for (i, (gchunk, ochunk)) in ga.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let s = vc.data()[i];
                        gchunk.iter_mut().zip(ochunk).for_each(|(x, y)| *x += y * s);
                    }
                }
                if let Some(gc) = slot(nodes, adj, *col) {
                    for (i, (achunk, ochunk)) in va.data().chunks(n).zip(g.chunks(n)).enumerate() {
                        gc[i] += dot(achunk, ochunk);
                    }
                }
            }
            Op::DivScalar(a, s) => {
                let (va, vs) = (val(*a), val(*s));
                let d = vs.item();
                if let Some(ga) = slot(nodes, adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y / d);
                }
                if let Some(gs) = slot(nodes, adj, *s) {
                    gs[0] -= dot(g, va.data()) / (d * d);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    add_into(ga, g);
                }
            }
            Op::Silu(a) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    for ((x, gy), &z) in ga.iter_mut().zip(g).zip(val(*a).data()) {
                        let s = sigmoid(z);
                        *x += gy * (s + z * s * (1.0 - s));
                    }
                }
            }
            Op::Abs(a) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    for ((x, gy), &z) in ga.iter_mut().zip(g).zip(val(*a).data()) {
                        *x += gy * sign(z);
                    }
                }
            }
            Op::Sqrt(a) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    for ((x, gy), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += gy * 0.5 / y;
                    }
                }
            }
            Op::Softmax(a, axis) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    softmax_backward(out.data(), g, ga, out.shape(), *axis);
                }
            }
            Op::CausalSoftmax(a) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    let n = out.cols();
                    for i in 0..n {
                        let y = &out.data()[i * n..i * n + i + 1];
                        let gy = &g[i * n..i * n + i + 1];
                        let inner = dot(y, gy);
                        let gx = &mut ga[i * n..i * n + i + 1];
                        for ((x, yv), gv) in gx.iter_mut().zip(y).zip(gy) {
                            *x += yv * (gv - inner);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (val(*x), val(*gain));
                let n = vx.cols();
                if let Some(gx) = slot(nodes, adj, *x) {
                    for (r, (xrow, grow)) in vx.data().chunks(n).zip(g.chunks(n)).enumerate() {
                        let inv = inv_rms[r];
                        // y = x·inv·w ;  dx = inv·(w⊙g) − x·inv³/n · Σ(w⊙g⊙x)
                        let wg_x: f64 = xrow
                            .iter()
                            .zip(grow)
                            .zip(vg.data())
                            .map(|((xv, gv), wv)| xv * gv * wv)
                            .sum();
                        let coef = inv * inv * inv * wg_x / n as f64;
                        let dst = &mut gx[r * n..(r + 1) * n];
                        for (((d, xv), gv), wv) in dst.iter_mut().zip(xrow).zip(grow).zip(vg.data()) {
                            *d += inv * wv * gv - xv * coef;
                        }
                    }
                }
                if let Some(gw) = slot(nodes, adj, *gain) {
                    for (r, (xrow, grow)) in vx.data().chunks(n).zip(g.chunks(n)).enumerate() {
                        let inv = inv_rms[r];
                        for ((d, xv), gv) in gw.iter_mut().zip(xrow).zip(grow) {
                            *d += gv * xv * inv;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = slot(nodes, adj, *table) {
                    let d = val(*table).cols();
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    let n = val(*x).cols();
                    let len = out.cols();
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * n + start..r * n + start + len], grow);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    let n = out.cols();
                    add_into(&mut gx[start * n..start * n + g.len()], g);
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if let Some(gp) = slot(nodes, adj, *p) {
                        for (r, grow) in g.chunks(total).enumerate() {
                            add_into(&mut gp[r * w..(r + 1) * w], &grow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::MeanRows(x) => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    let vx = val(*x);
                    let (m, n) = (vx.rows(), vx.cols());
                    for chunk in gx.chunks_mut(n) {
                        chunk.iter_mut().zip(g).for_each(|(d, gv)| *d += gv / m as f64);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Dot(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot(nodes, adj, *a) {
                    ga.iter_mut().zip(vb.data()).for_each(|(d, bv)| *d += g[0] * bv);
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    gb.iter_mut().zip(va.data()).for_each(|(d, av)| *d += g[0] * av);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(gl) = slot(nodes, adj, *logits) {
                    let v = val(*logits).cols();
                    let scale = g[0] / targets.len() as f64;
                    for (r, &y) in targets.iter().enumerate() {
                        let prow = &probs[r * v..(r + 1) * v];
                        let dst = &mut gl[r * v..(r + 1) * v];
                        dst.iter_mut().zip(prow).for_each(|(d, p)| *d += scale * p);
                        dst[y] -= scale;
                    }
                }
            }
        }
    }
}

/// Adjoint buffer for `v`, allocated on first use; `None` when no gradient
/// needs to flow into `v`.
fn slot<'b>(nodes: &[Node<'_>], adj: &'b mut [Option<Vec<f64>>], v: Var) -> Option<&'b mut Vec<f64>> {
    if !nodes[v.0].tracked {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softmax_backward(y: &[f64], g: &[f64], dst: &mut [f64], shape: &[usize], axis: usize) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let inner_prod: f64 = (0..n).map(|j| y[base + j * inner] * g[base + j * inner]).sum();
            for j in 0..n {
                let k = base + j * inner;
                dst[k] += y[k] * (g[k] - inner_prod);
            }
        }
    }
}
