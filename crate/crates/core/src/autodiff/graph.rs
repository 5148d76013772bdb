//! Tape of recorded operations and reverse-mode differentiation over it.

use std::collections::BTreeMap;

use rand::Rng;

use super::store::{ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce down the rows (one result per column).
    Rows,
    /// Reduce across the columns (one result per row).
    Cols,
}

enum Slot<S> {
    Owned(Tensor<S>),
    Param(ParamId),
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, S),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var, Axis),
    LogSoftmax(Var, Axis),
    Dropout(Var, Vec<S>),
    Embedding(ParamId, Vec<usize>),
    Max(Var, Vec<usize>),
    Lstm(Var, Var, bool, Box<LstmCache<S>>),
    Reshape(Var),
    SegmentMax(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>, Tensor<S>),
    Sum(Var),
    Unfold(Var, usize),
    SumColGroups(Var, usize),
}

struct LstmCache<S> {
    /// Activated gates per step, `[n×4H]` in order i, f, g, o.
    gates: Vec<S>,
    cells: Vec<S>,
}

struct Node<S> {
    value: Slot<S>,
    op: Op<S>,
    tracked: bool,
}

/// One forward pass. Parameters are read from the borrowed store;
/// [`Graph::backward`] consumes the graph and returns gradients.
pub struct Graph<'s, S: Scalar> {
    store: Option<&'s ParameterStore<S>>,
    nodes: Vec<Node<S>>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<S> {
    nodes: Vec<Option<Tensor<S>>>,
    params: BTreeMap<ParamId, Tensor<S>>,
    leaf_of: Vec<Option<ParamId>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a tracked node of the consumed graph.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        if let Some(Some(id)) = self.leaf_of.get(v.0) {
            return self.params.get(id);
        }
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

fn bcast_index(i: usize, j: usize, br: usize, bc: usize) -> usize {
    let r = if br == 1 { 0 } else { i };
    let c = if bc == 1 { 0 } else { j };
    r * bc + c
}

/// Visit each reduction lane: `(offset, stride, len)`.
fn lanes(rows: usize, cols: usize, axis: Axis) -> impl Iterator<Item = (usize, usize, usize)> {
    let (count, stride, len) = match axis {
        Axis::Cols => (rows, 1, cols),
        Axis::Rows => (cols, cols, rows),
    };
    (0..count).map(move |k| {
        let offset = match axis {
            Axis::Cols => k * cols,
            Axis::Rows => k,
        };
        (offset, stride, len)
    })
}

impl<'s, S: Scalar> Graph<'s, S> {
    pub fn new(store: &'s ParameterStore<S>) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
        }
    }

    /// A graph with no parameters; only leaves and constants.
    pub fn detached() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParameterStore<S> {
        self.store.expect("graph has no parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        match &self.nodes[v.0].value {
            Slot::Owned(t) => t,
            Slot::Param(id) => self.store().value(*id),
        }
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value: Slot::Owned(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims()
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked input that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Stored parameter; tracked iff trainable.
    pub fn param(&mut self, id: ParamId) -> Var {
        let tracked = self.store().is_trainable(id);
        self.nodes.push(Node {
            value: Slot::Param(id),
            op: Op::Param(id),
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}×{k}] · [{k2}×{n}]"),
            ));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == S::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), tracked))
    }

    fn check_bcast(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize, usize, usize)> {
        let (m, n) = self.dims(a);
        let (br, bc) = self.dims(b);
        if (br != m && br != 1) || (bc != n && bc != 1) {
            return Err(Error::shape(op, format!("[{m}×{n}] with [{br}×{bc}]")));
        }
        Ok((m, n, br, bc))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<(Tensor<S>, bool)> {
        let (m, n, br, bc) = self.check_bcast(op, a, b)?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(f(ad[i * n + j], bd[bcast_index(i, j, br, bc)]));
            }
        }
        let shape = self.value(a).shape().to_vec();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok((Tensor::new(shape, out)?, tracked))
    }

    /// `a + b`; `b` may broadcast along rows and/or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), tr))
    }

    /// Elementwise product; `b` may broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), tr))
    }

    /// `scale · x + shift`.
    pub fn affine_const(&mut self, x: Var, scale: S, shift: S) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let tr = self.is_tracked(x);
        self.push(t, Op::Affine(x, scale), tr)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        let tr = self.is_tracked(x);
        self.push(t, Op::Transpose(x), tr)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.dims(*xs.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?).0;
        if xs.iter().any(|&x| self.dims(x).0 != rows) {
            let shapes: Vec<_> = xs.iter().map(|&x| self.dims(x)).collect();
            return Err(Error::shape("concat_cols", format!("row mismatch {shapes:?}")));
        }
        let total: usize = xs.iter().map(|&x| self.dims(x).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        let tr = xs.iter().any(|&x| self.is_tracked(x));
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(xs.to_vec()), tr))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.dims(*xs.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?).1;
        if xs.iter().any(|&x| self.dims(x).1 != cols) {
            let shapes: Vec<_> = xs.iter().map(|&x| self.dims(x)).collect();
            return Err(Error::shape("concat_rows", format!("column mismatch {shapes:?}")));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
            rows += self.dims(x).0;
        }
        let tr = xs.iter().any(|&x| self.is_tracked(x));
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(xs.to_vec()), tr))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n} columns")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&src.row(i)[start..end]);
        }
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::matrix(m, end - start, out)?, Op::SliceCols(x, start), tr))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > m {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {m} rows")));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::matrix(end - start, n, out)?, Op::SliceRows(x, start), tr))
    }

    /// Gather rows by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("select_rows", format!("row {bad} of {m}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(src.row(i));
        }
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::matrix(idx.len(), n, out)?, Op::SelectRows(x, idx.to_vec()), tr))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(S::tanh);
        let tr = self.is_tracked(x);
        self.push(t, Op::Tanh(x), tr)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| S::one() / (S::one() + (-v).exp()));
        let tr = self.is_tracked(x);
        self.push(t, Op::Sigmoid(x), tr)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(S::zero()));
        let tr = self.is_tracked(x);
        self.push(t, Op::Relu(x), tr)
    }

    fn softmax_values(t: &Tensor<S>, axis: Axis, log: bool) -> Tensor<S> {
        let (m, n) = t.dims();
        let src = t.data();
        let mut out = vec![S::zero(); src.len()];
        for (off, stride, len) in lanes(m, n, axis) {
            let mx = (0..len)
                .map(|k| src[off + k * stride])
                .fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for k in 0..len {
                z += (src[off + k * stride] - mx).exp();
            }
            let lz = z.ln();
            for k in 0..len {
                let i = off + k * stride;
                out[i] = if log {
                    src[i] - mx - lz
                } else {
                    (src[i] - mx).exp() / z
                };
            }
        }
        Tensor::new(t.shape().to_vec(), out).expect("same shape")
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let t = Self::softmax_values(self.value(x), axis, false);
        let tr = self.is_tracked(x);
        self.push(t, Op::Softmax(x, axis), tr)
    }

    pub fn log_softmax(&mut self, x: Var, axis: Axis) -> Var {
        let t = Self::softmax_values(self.value(x), axis, true);
        let tr = self.is_tracked(x);
        self.push(t, Op::LogSoftmax(x, axis), tr)
    }

    /// Inverted dropout: kept units are scaled by `1/(1-p)`. Identity when
    /// not training or `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<S> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &k)| v * k).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let tr = self.is_tracked(x);
        Ok(self.push(t, Op::Dropout(x, mask), tr))
    }

    /// Rows of the embedding table `table` for each index.
    pub fn embedding(&mut self, table: ParamId, idx: &[usize]) -> Result<Var> {
        let t = self.store().value(table);
        let (rows, dim) = t.dims();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("embedding", format!("index {bad} of {rows}")));
        }
        let mut out = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let tr = self.store().is_trainable(table);
        Ok(self.push(Tensor::matrix(idx.len(), dim, out)?, Op::Embedding(table, idx.to_vec()), tr))
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn max_over(&mut self, x: Var, axis: Axis) -> Var {
        let src = self.value(x);
        let (m, n) = src.dims();
        let d = src.data();
        let mut vals = Vec::new();
        let mut arg = Vec::new();
        for (off, stride, len) in lanes(m, n, axis) {
            let mut best = off;
            for k in 1..len {
                if d[off + k * stride] > d[best] {
                    best = off + k * stride;
                }
            }
            vals.push(d[best]);
            arg.push(best);
        }
        let shape = match axis {
            Axis::Rows => vec![1, n],
            Axis::Cols => vec![m, 1],
        };
        let tr = self.is_tracked(x);
        self.push(Tensor::new(shape, vals).unwrap(), Op::Max(x, arg), tr)
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Contract(format!("cross_entropy target {bad} of {n} classes")));
        }
        let logp = Self::softmax_values(self.value(logits), Axis::Cols, true);
        let mut loss = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            loss -= logp.at(i, t);
        }
        loss /= S::lit(m.max(1) as f64);
        let probs = logp.map(S::exp);
        let tr = self.is_tracked(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, targets.to_vec(), probs), tr))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let tr = self.is_tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tr)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.affine_const(s, S::lit(1.0 / n as f64), S::zero())
    }

    /// Sliding windows of `k` consecutive rows, each flattened into one row:
    /// `[L×d] → [(L-k+1)×(k·d)]`.
    pub fn unfold_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let (l, d) = self.dims(x);
        if k == 0 || l < k {
            return Err(Error::shape("unfold_rows", format!("window {k} over {l} rows")));
        }
        let src = self.value(x).data();
        let out_rows = l - k + 1;
        let mut out = Vec::with_capacity(out_rows * k * d);
        for t in 0..out_rows {
            out.extend_from_slice(&src[t * d..(t + k) * d]);
        }
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::matrix(out_rows, k * d, out)?, Op::Unfold(x, k), tr))
    }

    /// Sum consecutive column groups of width `g`: `[m×(G·g)] → [m×G]`.
    pub fn sum_col_groups(&mut self, x: Var, g: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if g == 0 || n % g != 0 {
            return Err(Error::shape("sum_col_groups", format!("{n} columns in groups of {g}")));
        }
        let src = self.value(x).data();
        let groups = n / g;
        let mut out = Vec::with_capacity(m * groups);
        for i in 0..m {
            for q in 0..groups {
                out.push(src[i * n + q * g..i * n + (q + 1) * g].iter().copied().sum());
            }
        }
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::matrix(m, groups, out)?, Op::SumColGroups(x, g), tr))
    }

    /// LSTM recurrence over precomputed input projections.
    ///
    /// `xw` is `[n×4H]` (input times weights plus bias, gate order i, f, g, o),
    /// `w_hh` is `[H×4H]`. Returns hidden states `[n×H]` in input order; with
    /// `reverse` the recurrence runs from the last row to the first.
    pub fn lstm(&mut self, xw: Var, w_hh: Var, reverse: bool) -> Result<Var> {
        let (n, four_h) = self.dims(xw);
        let (h, wc) = self.dims(w_hh);
        if wc != 4 * h || four_h != 4 * h {
            return Err(Error::shape(
                "lstm",
                format!("projections {n}×{four_h} with recurrent weights {h}×{wc}"),
            ));
        }
        let x = self.value(xw).data();
        let w = self.value(w_hh).data();
        let mut gates = vec![S::zero(); n * 4 * h];
        let mut cells = vec![S::zero(); n * h];
        let mut out = vec![S::zero(); n * h];
        let mut h_prev = vec![S::zero(); h];
        let mut c_prev = vec![S::zero(); h];
        let mut pre = vec![S::zero(); 4 * h];
        for step in 0..n {
            let t = if reverse { n - 1 - step } else { step };
            pre.copy_from_slice(&x[t * 4 * h..(t + 1) * 4 * h]);
            for (p, &hv) in h_prev.iter().enumerate() {
                if hv == S::zero() {
                    continue;
                }
                for (acc, &wv) in pre.iter_mut().zip(&w[p * 4 * h..(p + 1) * 4 * h]) {
                    *acc += hv * wv;
                }
            }
            let gt = &mut gates[t * 4 * h..(t + 1) * 4 * h];
            for j in 0..h {
                let i = sigmoid(pre[j]);
                let f = sigmoid(pre[h + j]);
                let g = pre[2 * h + j].tanh();
                let o = sigmoid(pre[3 * h + j]);
                let c = f * c_prev[j] + i * g;
                gt[j] = i;
                gt[h + j] = f;
                gt[2 * h + j] = g;
                gt[3 * h + j] = o;
                cells[t * h + j] = c;
                out[t * h + j] = o * c.tanh();
            }
            c_prev.copy_from_slice(&cells[t * h..(t + 1) * h]);
            h_prev.copy_from_slice(&out[t * h..(t + 1) * h]);
        }
        let tr = self.is_tracked(xw) || self.is_tracked(w_hh);
        let cache = Box::new(LstmCache { gates, cells });
        Ok(self.push(Tensor::matrix(n, h, out)?, Op::Lstm(xw, w_hh, reverse, cache), tr))
    }

    /// Same data viewed with a new row/column split.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x);
        if t.len() != rows * cols {
            return Err(Error::shape(
                "reshape",
                format!("{:?} into [{rows}×{cols}]", t.shape()),
            ));
        }
        let out = Tensor::matrix(rows, cols, t.data().to_vec())?;
        let tr = self.is_tracked(x);
        Ok(self.push(out, Op::Reshape(x), tr))
    }

    /// Column-wise maximum over consecutive row segments of the given
    /// lengths: `[Σlens × d] → [|lens| × d]`. Ties resolve to the lowest row.
    pub fn max_over_segments(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if lens.iter().sum::<usize>() != m || lens.contains(&0) {
            return Err(Error::shape(
                "max_over_segments",
                format!("{m} rows split as {lens:?}"),
            ));
        }
        let d = self.value(x).data();
        let mut vals = Vec::with_capacity(lens.len() * n);
        let mut arg = Vec::with_capacity(lens.len() * n);
        let mut start = 0;
        for &len in lens {
            for j in 0..n {
                let mut best = start * n + j;
                for r in start + 1..start + len {
                    if d[r * n + j] > d[best] {
                        best = r * n + j;
                    }
                }
                vals.push(d[best]);
                arg.push(best);
            }
            start += len;
        }
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::matrix(lens.len(), n, vals)?, Op::SegmentMax(x, arg), tr))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.is_tracked(loss) {
            return Err(Error::Contract("loss does not depend on any tracked input".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        let mut params: BTreeMap<ParamId, Tensor<S>> = BTreeMap::new();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads, &mut params);
            grads[idx] = Some(dy);
        }

        let mut leaf_of = vec![None; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                leaf_of[i] = Some(id);
                if let Some(g) = grads[i].take() {
                    match params.get_mut(&id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            let mut t = g;
                            // keep the parameter's own shape
                            t = Tensor::new(self.store().value(id).shape().to_vec(), t.into_data())?;
                            params.insert(id, t);
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
            leaf_of,
        })
    }

    fn propagate(
        &self,
        idx: usize,
        dy: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        params: &mut BTreeMap<ParamId, Tensor<S>>,
    ) {
        let g = dy.data();
        let acc = |grads: &mut [Option<Tensor<S>>], v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(self.value(v).shape()));
            }
            f(slot.as_mut().unwrap().data_mut());
        };
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                acc(grads, *a, &mut |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut s = S::zero();
                            for (x, y) in grow.iter().zip(brow) {
                                s += *x * *y;
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                acc(grads, *b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == S::zero() {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[idx].op, Op::Sub(..)) {
                    -S::one()
                } else {
                    S::one()
                };
                let (m, n) = self.dims(*a);
                let (br, bc) = self.dims(*b);
                acc(grads, *a, &mut |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                acc(grads, *b, &mut |db| {
                    for i in 0..m {
                        for j in 0..n {
                            db[bcast_index(i, j, br, bc)] += sign * g[i * n + j];
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (m, n) = self.dims(*a);
                let (br, bc) = self.dims(*b);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                acc(grads, *a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[i * n + j] * bd[bcast_index(i, j, br, bc)];
                        }
                    }
                });
                acc(grads, *b, &mut |db| {
                    for i in 0..m {
                        for j in 0..n {
                            db[bcast_index(i, j, br, bc)] += g[i * n + j] * ad[i * n + j];
                        }
                    }
                });
            }
            Op::Affine(x, scale) => {
                let s = *scale;
                acc(grads, *x, &mut |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += s * gv;
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = self.dims(*x);
                acc(grads, *x, &mut |dx| {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let rows = dy.rows();
                let total = dy.cols();
                let mut off = 0;
                for &x in xs {
                    let w = self.dims(x).1;
                    acc(grads, x, &mut |dx| {
                        for i in 0..rows {
                            for j in 0..w {
                                dx[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    acc(grads, x, &mut |dx| {
                        for (d, &gv) in dx.iter_mut().zip(&g[off..off + len]) {
                            *d += gv;
                        }
                    });
                    off += len;
                }
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.dims(*x);
                let w = dy.cols();
                acc(grads, *x, &mut |dx| {
                    for i in 0..m {
                        for j in 0..w {
                            dx[i * n + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let n = self.dims(*x).1;
                acc(grads, *x, &mut |dx| {
                    for (d, &gv) in dx[start * n..].iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::SelectRows(x, idxs) => {
                let n = self.dims(*x).1;
                acc(grads, *x, &mut |dx| {
                    for (r, &i) in idxs.iter().enumerate() {
                        for j in 0..n {
                            dx[i * n + j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = self.value(Var(idx)).data();
                acc(grads, *x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * (S::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.value(Var(idx)).data();
                acc(grads, *x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * y[i] * (S::one() - y[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(grads, *x, &mut |dx| {
                    for i in 0..dx.len() {
                        if xv[i] > S::zero() {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let y = self.value(Var(idx));
                let (m, n) = y.dims();
                let yd = y.data();
                acc(grads, *x, &mut |dx| {
                    for (off, stride, len) in lanes(m, n, *axis) {
                        let mut dot = S::zero();
                        for k in 0..len {
                            let i = off + k * stride;
                            dot += g[i] * yd[i];
                        }
                        for k in 0..len {
                            let i = off + k * stride;
                            dx[i] += yd[i] * (g[i] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x, axis) => {
                let y = self.value(Var(idx));
                let (m, n) = y.dims();
                let yd = y.data();
                acc(grads, *x, &mut |dx| {
                    for (off, stride, len) in lanes(m, n, *axis) {
                        let mut total = S::zero();
                        for k in 0..len {
                            total += g[off + k * stride];
                        }
                        for k in 0..len {
                            let i = off + k * stride;
                            dx[i] += g[i] - yd[i].exp() * total;
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                acc(grads, *x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Embedding(table, idxs) => {
                if !self.nodes[idx].tracked {
                    return;
                }
                let t = self.store().value(*table);
                let dim = t.cols();
                let dt = params
                    .entry(*table)
                    .or_insert_with(|| Tensor::zeros(t.shape()));
                let dd = dt.data_mut();
                for (r, &i) in idxs.iter().enumerate() {
                    for j in 0..dim {
                        dd[i * dim + j] += g[r * dim + j];
                    }
                }
            }
            Op::Reshape(x) => {
                acc(grads, *x, &mut |dx| {
                    for (a, b) in dx.iter_mut().zip(g) {
                        *a += *b;
                    }
                });
            }
            Op::SegmentMax(x, arg) | Op::Max(x, arg) => {
                acc(grads, *x, &mut |dx| {
                    for (k, &i) in arg.iter().enumerate() {
                        dx[i] += g[k];
                    }
                });
            }
            Op::CrossEntropy(x, targets, probs) => {
                let (m, n) = probs.dims();
                let scale = g[0] / S::lit(m.max(1) as f64);
                let pd = probs.data();
                acc(grads, *x, &mut |dx| {
                    for i in 0..m {
                        for j in 0..n {
                            let onehot = if targets[i] == j { S::one() } else { S::zero() };
                            dx[i * n + j] += scale * (pd[i * n + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                acc(grads, *x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Unfold(x, k) => {
                let d = self.dims(*x).1;
                let out_rows = dy.rows();
                acc(grads, *x, &mut |dx| {
                    for t in 0..out_rows {
                        let grow = &g[t * k * d..(t + 1) * k * d];
                        for (dv, &gv) in dx[t * d..(t + k) * d].iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Lstm(xw, w_hh, reverse, cache) => {
                let (n, h) = dy.dims();
                let w = self.value(*w_hh).data();
                let out = self.value(Var(idx)).data();
                let (gates, cells) = (&cache.gates, &cache.cells);
                let mut dxw = vec![S::zero(); n * 4 * h];
                let mut dw = vec![S::zero(); h * 4 * h];
                let mut dh_next = vec![S::zero(); h];
                let mut dc_next = vec![S::zero(); h];
                let one = S::one();
                for step in (0..n).rev() {
                    let t = if *reverse { n - 1 - step } else { step };
                    let prev = if step == 0 {
                        None
                    } else if *reverse {
                        Some(t + 1)
                    } else {
                        Some(t - 1)
                    };
                    let gt = &gates[t * 4 * h..(t + 1) * 4 * h];
                    let da = &mut dxw[t * 4 * h..(t + 1) * 4 * h];
                    for j in 0..h {
                        let (i, f, gg, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                        let c = cells[t * h + j];
                        let c_prev = prev.map_or(S::zero(), |p| cells[p * h + j]);
                        let tc = c.tanh();
                        let dh = g[t * h + j] + dh_next[j];
                        let dc = dc_next[j] + dh * o * (one - tc * tc);
                        da[j] = dc * gg * i * (one - i);
                        da[h + j] = dc * c_prev * f * (one - f);
                        da[2 * h + j] = dc * i * (one - gg * gg);
                        da[3 * h + j] = dh * tc * o * (one - o);
                        dc_next[j] = dc * f;
                    }
                    for (p, dh) in dh_next.iter_mut().enumerate() {
                        let wrow = &w[p * 4 * h..(p + 1) * 4 * h];
                        let mut s = S::zero();
                        for (a, b) in da.iter().zip(wrow) {
                            s += *a * *b;
                        }
                        *dh = s;
                    }
                    if let Some(p) = prev {
                        for (q, &hv) in out[p * h..(p + 1) * h].iter().enumerate() {
                            for (acc, &a) in dw[q * 4 * h..(q + 1) * 4 * h].iter_mut().zip(da.iter()) {
                                *acc += hv * a;
                            }
                        }
                    }
                }
                acc(grads, *xw, &mut |d| {
                    for (a, b) in d.iter_mut().zip(&dxw) {
                        *a += *b;
                    }
                });
                acc(grads, *w_hh, &mut |d| {
                    for (a, b) in d.iter_mut().zip(&dw) {
                        *a += *b;
                    }
                });
            }
            Op::SumColGroups(x, width) => {
                let (m, n) = self.dims(*x);
                let groups = n / width;
                acc(grads, *x, &mut |dx| {
                    for i in 0..m {
                        for q in 0..groups {
                            let gv = g[i * groups + q];
                            for j in 0..*width {
                                dx[i * n + q * width + j] += gv;
                            }
                        }
                    }
                });
            }
        }
    }
}
