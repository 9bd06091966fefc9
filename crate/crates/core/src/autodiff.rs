//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records each operation as it is evaluated. Nodes are appended
//! in evaluation order, so walking the tape backwards is a valid topological
//! order for the chain rule. Parameters can be borrowed into the graph
//! without copying.

use std::borrow::Cow;

use crate::error::{Result, StormError};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    SumSquares(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<T>,
    },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. `'p` is the lifetime of borrowed parameter tensors.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> StormError {
    StormError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Owned leaf tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Borrowed leaf tensor, typically a model parameter.
    pub fn borrowed(&mut self, value: &'p Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err("add", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p + *q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err("sub", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p - *q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let n = x.cols();
        if b.len() != n || x.shape().len() != 2 {
            return Err(dim_err("add_row_bias", x, b));
        }
        let mut data = x.data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::AddRowBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.derived(out, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::gelu);
        self.derived(out, Op::Gelu(a), &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let out = tensor::row_softmax(self.value(a))?;
        Ok(self.derived(out, Op::Softmax(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let d = xv.cols();
        if xv.shape().len() != 2 || d == 0 || g.len() != d || b.len() != d {
            return Err(dim_err("layer_norm", xv, g));
        }
        let m = xv.rows();
        let parts = tensor::layer_norm_parts(xv.data(), m, d, g.data(), b.data(), eps);
        let out = Tensor::new(vec![m, d], parts.out)?;
        Ok(self.derived(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: parts.xhat,
                rstd: parts.rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Multi-head causal attention. `q` holds the last `m` positions of a
    /// length-`n` history whose keys and values are `k`, `v` (`n×d` each);
    /// query row `r` sees keys `0..=n-m+r`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (m, d) = (qv.rows(), qv.cols());
        let n = kv.rows();
        if kv.cols() != d || vv.shape() != kv.shape() || n < m || heads == 0 || d % heads != 0 {
            return Err(dim_err("causal_attention", qv, kv));
        }
        let offset = n - m;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * m * n];
        let mut out = vec![T::zero(); m * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for h in 0..heads {
            let c0 = h * dh;
            for r in 0..m {
                let visible = offset + r + 1;
                let prow = &mut probs[(h * m + r) * n..(h * m + r) * n + visible];
                let qrow = &qd[r * d + c0..r * d + c0 + dh];
                for (j, p) in prow.iter_mut().enumerate() {
                    let krow = &kd[j * d + c0..j * d + c0 + dh];
                    let mut acc = T::zero();
                    for (a, b) in qrow.iter().zip(krow) {
                        acc += *a * *b;
                    }
                    *p = acc * scale;
                }
                tensor::softmax_in_place(prow);
                let orow = &mut out[r * d + c0..r * d + c0 + dh];
                for (j, &p) in prow.iter().enumerate() {
                    let vrow = &vd[j * d + c0..j * d + c0 + dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
        let out = Tensor::new(vec![m, d], out)?;
        Ok(self.derived(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        Ok(self.derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.rows() || x.shape().len() != 2 {
            return Err(StormError::Dimension {
                op: "slice_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let out = x.slice_rows(start, end);
        Ok(self.derived(out, Op::SliceRows(a, start), &[a]))
    }

    /// Row lookup into a `V×d` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (size, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= size {
                return Err(StormError::Vocab { id, size });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.derived(out, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Sum of squared entries, as a 1-element tensor.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v * v);
        self.derived(Tensor::scalar(s), Op::SumSquares(a), &[a])
    }

    /// Summed negative log-likelihood of `(row, class)` targets under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let l = self.value(logits);
        let (rows, classes) = (l.rows(), l.cols());
        let mut probs = Vec::with_capacity(targets.len() * classes);
        let mut total = T::zero();
        for &(r, c) in targets {
            if r >= rows {
                return Err(StormError::Dimension {
                    op: "cross_entropy",
                    lhs: l.shape().to_vec(),
                    rhs: vec![r],
                });
            }
            if c >= classes {
                return Err(StormError::Vocab {
                    id: c,
                    size: classes,
                });
            }
            let row = l.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
            let lse = max + sum.ln();
            total += lse - row[c];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        Ok(self.derived(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(StormError::Dimension {
                op: "backward",
                lhs: out.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot =
            grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let da = tensor::matmul_nt(g, bv.data(), m, n, k);
                    self.accumulate(grads, *a, |s| add_into(s, &da));
                }
                if self.requires_grad(*b) {
                    let db = tensor::matmul_tn(av.data(), g, m, k, n);
                    self.accumulate(grads, *b, |s| add_into(s, &db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| {
                    for (o, &v) in s.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::AddRowBias(a, bias) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                let n = self.value(*bias).len();
                self.accumulate(grads, *bias, |s| {
                    if n > 0 {
                        for row in g.chunks(n) {
                            add_into(s, row);
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |s| {
                    for (o, &v) in s.iter_mut().zip(g) {
                        *o += v * c;
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for ((o, &v), &xi) in s.iter_mut().zip(g).zip(x) {
                        *o += v * tensor::gelu_grad(xi);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                self.accumulate(grads, *a, |s| {
                    if n == 0 {
                        return;
                    }
                    for ((srow, yrow), grow) in s.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot = yrow.iter().zip(grow).fold(T::zero(), |a, (p, q)| a + *p * *q);
                        for ((o, &yi), &gi) in srow.iter_mut().zip(yrow).zip(grow) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                let inv_d = T::one() / T::of(d as f64);
                self.accumulate(grads, *x, |s| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dx = T::zero();
                        let mut mean_dx_xh = T::zero();
                        for c in 0..d {
                            let dxh = gr[c] * gv[c];
                            mean_dx += dxh;
                            mean_dx_xh += dxh * xh[c];
                        }
                        mean_dx *= inv_d;
                        mean_dx_xh *= inv_d;
                        for c in 0..d {
                            let dxh = gr[c] * gv[c];
                            s[r * d + c] += rs * (dxh - mean_dx - xh[c] * mean_dx_xh);
                        }
                    }
                });
                self.accumulate(grads, *gain, |s| {
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gi), &xi) in s.iter_mut().zip(grow).zip(xrow) {
                            *o += gi * xi;
                        }
                    }
                });
                self.accumulate(grads, *bias, |s| {
                    for grow in g.chunks(d) {
                        add_into(s, grow);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.value.cols();
                let off = start * c;
                self.accumulate(grads, *a, |s| add_into(&mut s[off..off + g.len()], g));
            }
            Op::Gather(table, ids) => {
                let d = node.value.cols();
                self.accumulate(grads, *table, |s| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::SumSquares(a) => {
                let x = self.value(*a).data();
                let two = T::of(2.0) * g[0];
                self.accumulate(grads, *a, |s| {
                    for (o, &xi) in s.iter_mut().zip(x) {
                        *o += two * xi;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let classes = self.value(*logits).cols();
                self.accumulate(grads, *logits, |s| {
                    for (t, &(r, c)) in targets.iter().enumerate() {
                        let p = &probs[t * classes..(t + 1) * classes];
                        let srow = &mut s[r * classes..(r + 1) * classes];
                        for (o, &pi) in srow.iter_mut().zip(p) {
                            *o += g[0] * pi;
                        }
                        srow[c] -= g[0];
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (m, d, n) = (qv.rows(), qv.cols(), kv.rows());
        let offset = n - m;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = vec![T::zero(); m * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut ds = vec![T::zero(); n];
        for h in 0..heads {
            let c0 = h * dh;
            for r in 0..m {
                let visible = offset + r + 1;
                let prow = &probs[(h * m + r) * n..(h * m + r) * n + visible];
                let grow = &g[r * d + c0..r * d + c0 + dh];
                let mut dot = T::zero();
                for j in 0..visible {
                    let vrow = &vv.data()[j * d + c0..j * d + c0 + dh];
                    let mut dp = T::zero();
                    for (a, b) in grow.iter().zip(vrow) {
                        dp += *a * *b;
                    }
                    ds[j] = dp;
                    dot += prow[j] * dp;
                    let dvrow = &mut dv[j * d + c0..j * d + c0 + dh];
                    for (o, &gi) in dvrow.iter_mut().zip(grow) {
                        *o += prow[j] * gi;
                    }
                }
                let qrow = &qv.data()[r * d + c0..r * d + c0 + dh];
                for j in 0..visible {
                    let dsj = prow[j] * (ds[j] - dot) * scale;
                    let krow = &kv.data()[j * d + c0..j * d + c0 + dh];
                    let dqrow = &mut dq[r * d + c0..r * d + c0 + dh];
                    for (o, &kx) in dqrow.iter_mut().zip(krow) {
                        *o += dsj * kx;
                    }
                    let dkrow = &mut dk[j * d + c0..j * d + c0 + dh];
                    for (o, &qx) in dkrow.iter_mut().zip(qrow) {
                        *o += dsj * qx;
                    }
                }
            }
        }
        self.accumulate(grads, q, |s| add_into(s, &dq));
        self.accumulate(grads, k, |s| add_into(s, &dk));
        self.accumulate(grads, v, |s| add_into(s, &dv));
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Raw gradient buffer, `None` when no gradient reached the node.
    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient shaped like the node's value; zeros if nothing flowed into it.
    pub fn get(&self, graph: &Graph<'_, T>, v: Var) -> Tensor<T> {
        let shape = graph.value(v).shape().to_vec();
        match self.raw(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}
