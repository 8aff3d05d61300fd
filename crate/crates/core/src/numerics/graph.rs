//! Single-use reverse-mode differentiation tape.
//!
//! A `Graph` records every primitive operation of one forward pass as a
//! node holding its output value. `backward` replays the record in reverse
//! and accumulates gradients into every node on a path from the loss to a
//! `requires_grad` leaf. The tape is single-use: a second `backward` call
//! is an error, and a fresh graph is built per forward pass.

use super::mat::{Mat, NumericsError};
use super::params::ParamStore;

/// Handle to a tensor recorded on one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Elementwise nonlinearity.
///
/// `Gelu` is the tanh-based smooth gate
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

const GELU_A: f64 = 0.044715;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Reduction applied per segment of consecutive rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    MulElem(TensorId, TensorId),
    Scale(TensorId, f64),
    AddRow(TensorId, TensorId),
    MulCol(TensorId, TensorId),
    RowSum(TensorId),
    SumAll(TensorId),
    GatherRows {
        src: TensorId,
        idx: Vec<usize>,
    },
    SegmentReduce {
        src: TensorId,
        offsets: Vec<usize>,
        kind: Reduce,
        // winning source row per output element, Max only
        winners: Vec<usize>,
    },
    Reshape(TensorId),
    SliceCols {
        src: TensorId,
        start: usize,
    },
    ConcatCols(Vec<TensorId>),
    SoftmaxRows(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    Act(TensorId, Activation),
    CrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Mat,
    },
}

struct Node {
    value: Mat,
    grad: Option<Mat>,
    requires_grad: bool,
    op: Op,
    param_path: Option<String>,
}

/// Reverse-mode tape. See the module docs.
pub struct Graph {
    nodes: Vec<Node>,
    leased: Vec<(String, TensorId)>,
    consumed: bool,
    alloc_elems: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leased: Vec::new(),
            consumed: false,
            alloc_elems: 0,
        }
    }

    fn push(&mut self, value: Mat, requires_grad: bool, op: Op) -> TensorId {
        self.alloc_elems += value.len();
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            param_path: None,
        });
        id
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; no gradient is tracked through it.
    pub fn leaf(&mut self, value: Mat) -> TensorId {
        self.push(value, false, Op::Leaf)
    }

    /// Input that participates in differentiation.
    pub fn var(&mut self, value: Mat) -> TensorId {
        self.push(value, true, Op::Leaf)
    }

    /// Constant all-zeros tensor.
    pub fn zeros(&mut self, rows: usize, cols: usize) -> TensorId {
        self.leaf(Mat::zeros(rows, cols))
    }

    /// Lease a named parameter from the store as a differentiable leaf.
    ///
    /// Leasing the same path twice returns the original node, so shared
    /// parameters accumulate one combined gradient.
    pub fn param(&mut self, store: &ParamStore, path: &str) -> Result<TensorId, NumericsError> {
        if let Some((_, id)) = self.leased.iter().find(|(p, _)| p == path) {
            return Ok(*id);
        }
        let value = store.value(path)?.clone();
        let id = self.push(value, true, Op::Leaf);
        self.nodes[id.0].param_path = Some(path.to_string());
        self.leased.push((path.to_string(), id));
        Ok(id)
    }

    pub fn value(&self, id: TensorId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss w.r.t. this tensor, once `backward` has run.
    pub fn grad(&self, id: TensorId) -> Option<&Mat> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Total `f64` elements recorded on the tape so far. Peak memory of a
    /// single-use tape equals this total, so deltas around a subcomputation
    /// measure its footprint.
    pub fn alloc_elems(&self) -> usize {
        self.alloc_elems
    }

    pub fn check_finite(&self, id: TensorId, what: &str) -> Result<(), NumericsError> {
        if self.nodes[id.0].value.is_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { what: what.to_string() })
        }
    }

    // ── forward primitives ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(NumericsError::DimMismatch {
                op: "matmul",
                left: (m, ka),
                right: (kb, n),
            });
        }
        let mut out = Mat::zeros(m, n);
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        self.zip("mul", a, b, |x, y| x * y, Op::MulElem(a, b))
    }

    fn zip(
        &mut self,
        opname: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::DimMismatch {
                op: opname,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Mat::from_vec(r, c, data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, rg, op))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let v = &self.nodes[a.0].value;
        let out = Mat::from_vec(
            v.rows(),
            v.cols(),
            v.data().iter().map(|x| x * factor).collect(),
        )
        .expect("same shape");
        let rg = self.requires(a);
        self.push(out, rg, Op::Scale(a, factor))
    }

    /// `x + b` with `b` a `1xn` row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        let (m, n) = self.shape(x);
        let bs = self.shape(b);
        if bs != (1, n) {
            return Err(NumericsError::DimMismatch {
                op: "add_row",
                left: (m, n),
                right: bs,
            });
        }
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..m {
            let row = out.row_mut(i);
            for (v, bj) in row.iter_mut().zip(self.nodes[b.0].value.data()) {
                *v += bj;
            }
        }
        let rg = self.requires(x) || self.requires(b);
        Ok(self.push(out, rg, Op::AddRow(x, b)))
    }

    /// `x * s` with `s` an `rx1` column broadcast over the columns of `x`.
    pub fn mul_col(&mut self, x: TensorId, s: TensorId) -> Result<TensorId, NumericsError> {
        let (m, n) = self.shape(x);
        let ss = self.shape(s);
        if ss != (m, 1) {
            return Err(NumericsError::DimMismatch {
                op: "mul_col",
                left: (m, n),
                right: ss,
            });
        }
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..m {
            let f = self.nodes[s.0].value.get(i, 0);
            for v in out.row_mut(i) {
                *v *= f;
            }
        }
        let rg = self.requires(x) || self.requires(s);
        Ok(self.push(out, rg, Op::MulCol(x, s)))
    }

    /// Per-row sum, `rxn -> rx1`.
    pub fn row_sum(&mut self, x: TensorId) -> TensorId {
        let (m, _) = self.shape(x);
        let mut out = Mat::zeros(m, 1);
        for i in 0..m {
            out.set(i, 0, self.nodes[x.0].value.row(i).iter().sum());
        }
        let rg = self.requires(x);
        self.push(out, rg, Op::RowSum(x))
    }

    /// Sum of all elements, `-> 1x1`.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        let rg = self.requires(x);
        self.push(Mat::scalar(total), rg, Op::SumAll(x))
    }

    /// Select rows of `src` by index, duplicates allowed.
    pub fn gather_rows(&mut self, src: TensorId, idx: &[usize]) -> Result<TensorId, NumericsError> {
        let (n, d) = self.shape(src);
        let mut out = Mat::zeros(idx.len(), d);
        for (t, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            out.row_mut(t).copy_from_slice(self.nodes[src.0].value.row(i));
        }
        let rg = self.requires(src);
        Ok(self.push(
            out,
            rg,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Reduce consecutive row segments. `offsets` has one more entry than
    /// there are segments, starts at 0, ends at `src.rows`, and every
    /// segment must be non-empty.
    pub fn segment_reduce(
        &mut self,
        src: TensorId,
        offsets: &[usize],
        kind: Reduce,
    ) -> Result<TensorId, NumericsError> {
        let (rows, d) = self.shape(src);
        let valid = offsets.len() >= 2
            && offsets[0] == 0
            && *offsets.last().unwrap() == rows
            && offsets.windows(2).all(|w| w[0] < w[1]);
        if !valid {
            return Err(NumericsError::BadShape {
                op: "segment_reduce",
                shape: (rows, d),
                detail: "offsets must cover all rows with non-empty segments",
            });
        }
        let s = offsets.len() - 1;
        let mut out = Mat::zeros(s, d);
        let mut winners = Vec::new();
        let src_val = &self.nodes[src.0].value;
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for g in 0..s {
                    for r in offsets[g]..offsets[g + 1] {
                        let row = src_val.row(r);
                        let acc = out.row_mut(g);
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    if kind == Reduce::Mean {
                        let len = (offsets[g + 1] - offsets[g]) as f64;
                        for a in out.row_mut(g) {
                            *a /= len;
                        }
                    }
                }
            }
            Reduce::Max => {
                winners = vec![0; s * d];
                for g in 0..s {
                    for j in 0..d {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_row = offsets[g];
                        for r in offsets[g]..offsets[g + 1] {
                            let v = src_val.get(r, j);
                            if v > best {
                                best = v;
                                best_row = r;
                            }
                        }
                        out.set(g, j, best);
                        winners[g * d + j] = best_row;
                    }
                }
            }
        }
        let rg = self.requires(src);
        Ok(self.push(
            out,
            rg,
            Op::SegmentReduce {
                src,
                offsets: offsets.to_vec(),
                kind,
                winners,
            },
        ))
    }

    /// Reduce fixed-size groups of `k` consecutive rows.
    pub fn group_reduce(
        &mut self,
        src: TensorId,
        k: usize,
        kind: Reduce,
    ) -> Result<TensorId, NumericsError> {
        let (rows, d) = self.shape(src);
        if k == 0 || rows % k != 0 {
            return Err(NumericsError::BadShape {
                op: "group_reduce",
                shape: (rows, d),
                detail: "row count must be a positive multiple of the group size",
            });
        }
        let offsets: Vec<usize> = (0..=rows / k).map(|g| g * k).collect();
        self.segment_reduce(src, &offsets, kind)
    }

    /// Reinterpret the same row-major data under a new shape.
    pub fn reshape(
        &mut self,
        src: TensorId,
        rows: usize,
        cols: usize,
    ) -> Result<TensorId, NumericsError> {
        let out = self.nodes[src.0].value.reshaped(rows, cols)?;
        let rg = self.requires(src);
        Ok(self.push(out, rg, Op::Reshape(src)))
    }

    /// Columns `[start, start+width)` of `src`.
    pub fn slice_cols(
        &mut self,
        src: TensorId,
        start: usize,
        width: usize,
    ) -> Result<TensorId, NumericsError> {
        let (m, n) = self.shape(src);
        if start + width > n || width == 0 {
            return Err(NumericsError::BadShape {
                op: "slice_cols",
                shape: (m, n),
                detail: "column slice out of range",
            });
        }
        let mut out = Mat::zeros(m, width);
        for i in 0..m {
            out.row_mut(i)
                .copy_from_slice(&self.nodes[src.0].value.row(i)[start..start + width]);
        }
        let rg = self.requires(src);
        Ok(self.push(out, rg, Op::SliceCols { src, start }))
    }

    /// Concatenate along the channel axis; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::BadShape {
                op: "concat_cols",
                shape: (0, 0),
                detail: "no inputs",
            });
        }
        let (m, _) = self.shape(parts[0]);
        let mut width = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != m {
                return Err(NumericsError::DimMismatch {
                    op: "concat_cols",
                    left: (m, width),
                    right: (r, c),
                });
            }
            width += c;
        }
        let mut out = Mat::zeros(m, width);
        for i in 0..m {
            let mut at = 0;
            for &p in parts {
                let row = self.nodes[p.0].value.row(i);
                out.row_mut(i)[at..at + row.len()].copy_from_slice(row);
                at += row.len();
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId, NumericsError> {
        let (m, n) = self.shape(x);
        if n == 0 {
            return Err(NumericsError::BadShape {
                op: "softmax_rows",
                shape: (m, n),
                detail: "empty rows",
            });
        }
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let row = self.nodes[x.0].value.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - max).exp();
                denom += *o;
            }
            for o in out.row_mut(i) {
                *o /= denom;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(out, rg, Op::SoftmaxRows(x)))
    }

    /// Row-wise layer normalization: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, NumericsError> {
        let (m, n) = self.shape(x);
        if self.shape(gamma) != (1, n) || self.shape(beta) != (1, n) {
            return Err(NumericsError::DimMismatch {
                op: "layer_norm",
                left: (m, n),
                right: self.shape(gamma),
            });
        }
        if eps <= 0.0 {
            return Err(NumericsError::InvalidConfig {
                what: "layer_norm eps must be positive".to_string(),
            });
        }
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let row = self.nodes[x.0].value.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * inv;
                out.set(
                    i,
                    j,
                    self.nodes[gamma.0].value.get(0, j) * xhat + self.nodes[beta.0].value.get(0, j),
                );
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(out, rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn activation(&mut self, x: TensorId, kind: Activation) -> TensorId {
        let v = &self.nodes[x.0].value;
        let out = Mat::from_vec(
            v.rows(),
            v.cols(),
            v.data().iter().map(|&t| kind.apply(t)).collect(),
        )
        .expect("same shape");
        let rg = self.requires(x);
        self.push(out, rg, Op::Act(x, kind))
    }

    /// Mean of `-log softmax(logits)[i, labels[i]]` over rows.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId, NumericsError> {
        let (m, c) = self.shape(logits);
        if labels.len() != m {
            return Err(NumericsError::BadShape {
                op: "cross_entropy",
                shape: (m, c),
                detail: "one label per logit row required",
            });
        }
        for &y in labels {
            if y >= c {
                return Err(NumericsError::LabelOutOfRange { label: y, classes: c });
            }
        }
        let mut probs = Mat::zeros(m, c);
        let mut loss = 0.0;
        for i in 0..m {
            let row = self.nodes[logits.0].value.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            for p in probs.row_mut(i) {
                *p /= denom;
            }
            loss -= probs.get(i, labels[i]).ln();
        }
        loss /= m as f64;
        let rg = self.requires(logits);
        Ok(self.push(
            Mat::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `x @ w + bias`, the shared linear-layer primitive.
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, NumericsError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, bias)
    }

    // ── reverse pass ───────────────────────────────────────────────────

    /// Reverse accumulation from a scalar loss. Single use per graph.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), NumericsError> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(NumericsError::NotScalar { shape });
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(Mat::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = self.nodes[i].grad.as_ref().unwrap().clone();
            self.propagate(i, &grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: &Mat) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let shape = self.nodes[id.0].value.shape();
        let slot = self
            .nodes[id.0]
            .grad
            .get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
        debug_assert_eq!(slot.shape(), delta.shape());
        for (g, d) in slot.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
    }

    fn propagate(&mut self, i: usize, grad: &Mat) {
        // Ops are taken apart by value where cheap; Mats are cloned only
        // when the backward rule needs simultaneous access.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let bv = &self.nodes[b.0].value;
                    let mut da = Mat::zeros(self.shape(a).0, self.shape(a).1);
                    matmul_nt_into(grad, bv, &mut da);
                    self.accumulate(a, &da);
                }
                if self.requires(b) {
                    let av = &self.nodes[a.0].value;
                    let mut db = Mat::zeros(self.shape(b).0, self.shape(b).1);
                    matmul_tn_into(av, grad, &mut db);
                    self.accumulate(b, &db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad);
                self.accumulate(b, grad);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad);
                let neg = Mat::from_vec(
                    grad.rows(),
                    grad.cols(),
                    grad.data().iter().map(|g| -g).collect(),
                )
                .expect("same shape");
                self.accumulate(b, &neg);
            }
            Op::MulElem(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let bv = self.nodes[b.0].value.clone();
                    let da = hadamard(grad, &bv);
                    self.accumulate(a, &da);
                }
                if self.requires(b) {
                    let av = self.nodes[a.0].value.clone();
                    let db = hadamard(grad, &av);
                    self.accumulate(b, &db);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let da = Mat::from_vec(
                    grad.rows(),
                    grad.cols(),
                    grad.data().iter().map(|g| g * c).collect(),
                )
                .expect("same shape");
                self.accumulate(a, &da);
            }
            Op::AddRow(x, b) => {
                let (x, b) = (*x, *b);
                self.accumulate(x, grad);
                if self.requires(b) {
                    let n = grad.cols();
                    let mut db = Mat::zeros(1, n);
                    for i in 0..grad.rows() {
                        for (acc, g) in db.row_mut(0).iter_mut().zip(grad.row(i)) {
                            *acc += g;
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::MulCol(x, s) => {
                let (x, s) = (*x, *s);
                if self.requires(x) {
                    let sv = self.nodes[s.0].value.clone();
                    let mut dx = grad.clone();
                    for i in 0..dx.rows() {
                        let f = sv.get(i, 0);
                        for v in dx.row_mut(i) {
                            *v *= f;
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.requires(s) {
                    let xv = self.nodes[x.0].value.clone();
                    let mut ds = Mat::zeros(grad.rows(), 1);
                    for i in 0..grad.rows() {
                        let dot: f64 = grad.row(i).iter().zip(xv.row(i)).map(|(g, v)| g * v).sum();
                        ds.set(i, 0, dot);
                    }
                    self.accumulate(s, &ds);
                }
            }
            Op::RowSum(x) => {
                let x = *x;
                let (m, n) = self.shape(x);
                let mut dx = Mat::zeros(m, n);
                for i in 0..m {
                    let g = grad.get(i, 0);
                    for v in dx.row_mut(i) {
                        *v = g;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::SumAll(x) => {
                let x = *x;
                let (m, n) = self.shape(x);
                let dx = Mat::filled(m, n, grad.get(0, 0));
                self.accumulate(x, &dx);
            }
            Op::GatherRows { src, idx } => {
                let src = *src;
                let idx = idx.clone();
                let (n, d) = self.shape(src);
                let mut dsrc = Mat::zeros(n, d);
                for (t, &i) in idx.iter().enumerate() {
                    for (acc, g) in dsrc.row_mut(i).iter_mut().zip(grad.row(t)) {
                        *acc += g;
                    }
                }
                self.accumulate(src, &dsrc);
            }
            Op::SegmentReduce {
                src,
                offsets,
                kind,
                winners,
            } => {
                let src = *src;
                let kind = *kind;
                let offsets = offsets.clone();
                let winners = winners.clone();
                let (rows, d) = self.shape(src);
                let mut dsrc = Mat::zeros(rows, d);
                match kind {
                    Reduce::Sum => {
                        for g in 0..offsets.len() - 1 {
                            for r in offsets[g]..offsets[g + 1] {
                                dsrc.row_mut(r).copy_from_slice(grad.row(g));
                            }
                        }
                    }
                    Reduce::Mean => {
                        for g in 0..offsets.len() - 1 {
                            let inv = 1.0 / (offsets[g + 1] - offsets[g]) as f64;
                            for r in offsets[g]..offsets[g + 1] {
                                for (acc, gv) in dsrc.row_mut(r).iter_mut().zip(grad.row(g)) {
                                    *acc = gv * inv;
                                }
                            }
                        }
                    }
                    Reduce::Max => {
                        for g in 0..offsets.len() - 1 {
                            for j in 0..d {
                                let r = winners[g * d + j];
                                let cur = dsrc.get(r, j);
                                dsrc.set(r, j, cur + grad.get(g, j));
                            }
                        }
                    }
                }
                self.accumulate(src, &dsrc);
            }
            Op::Reshape(src) => {
                let src = *src;
                let (r, c) = self.shape(src);
                let dsrc = Mat::from_vec(r, c, grad.data().to_vec()).expect("same numel");
                self.accumulate(src, &dsrc);
            }
            Op::SliceCols { src, start } => {
                let (src, start) = (*src, *start);
                let (m, n) = self.shape(src);
                let mut dsrc = Mat::zeros(m, n);
                for i in 0..m {
                    let g = grad.row(i);
                    dsrc.row_mut(i)[start..start + g.len()].copy_from_slice(g);
                }
                self.accumulate(src, &dsrc);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let (m, c) = self.shape(p);
                    if self.requires(p) {
                        let mut dp = Mat::zeros(m, c);
                        for i in 0..m {
                            dp.row_mut(i).copy_from_slice(&grad.row(i)[at..at + c]);
                        }
                        self.accumulate(p, &dp);
                    }
                    at += c;
                }
            }
            Op::SoftmaxRows(x) => {
                let x = *x;
                let y = self.nodes[i].value.clone();
                let (m, n) = y.shape();
                let mut dx = Mat::zeros(m, n);
                for r in 0..m {
                    let dot: f64 = grad.row(r).iter().zip(y.row(r)).map(|(g, v)| g * v).sum();
                    for j in 0..n {
                        dx.set(r, j, y.get(r, j) * (grad.get(r, j) - dot));
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gamma.0].value.clone();
                let (m, n) = xv.shape();
                let mut dx = Mat::zeros(m, n);
                let mut dgamma = Mat::zeros(1, n);
                let mut dbeta = Mat::zeros(1, n);
                for r in 0..m {
                    let row = xv.row(r);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dyh: Vec<f64> = (0..n).map(|j| grad.get(r, j) * gv.get(0, j)).collect();
                    let mean_dyh = dyh.iter().sum::<f64>() / n as f64;
                    let mean_dyh_xhat =
                        dyh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx.set(r, j, inv * (dyh[j] - mean_dyh - xhat[j] * mean_dyh_xhat));
                        let dg = dgamma.get(0, j) + grad.get(r, j) * xhat[j];
                        dgamma.set(0, j, dg);
                        let db = dbeta.get(0, j) + grad.get(r, j);
                        dbeta.set(0, j, db);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::Act(x, kind) => {
                let (x, kind) = (*x, *kind);
                let xv = self.nodes[x.0].value.clone();
                let dx = Mat::from_vec(
                    xv.rows(),
                    xv.cols(),
                    xv.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&v, &g)| g * kind.derivative(v))
                        .collect(),
                )
                .expect("same shape");
                self.accumulate(x, &dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                let labels = labels.clone();
                let probs = probs.clone();
                let (m, c) = probs.shape();
                let g = grad.get(0, 0) / m as f64;
                let mut dl = Mat::zeros(m, c);
                for r in 0..m {
                    for j in 0..c {
                        let ind = if labels[r] == j { 1.0 } else { 0.0 };
                        dl.set(r, j, (probs.get(r, j) - ind) * g);
                    }
                }
                self.accumulate(logits, &dl);
            }
        }
    }

    /// Add every leased parameter's gradient into the store's accumulators.
    /// Parameters untouched by the loss contribute zeros.
    pub fn write_grads(&self, store: &mut ParamStore) -> Result<(), NumericsError> {
        for (path, id) in &self.leased {
            match &self.nodes[id.0].grad {
                Some(g) => store.add_grad(path, g)?,
                None => {
                    let (r, c) = self.shape(*id);
                    store.add_grad(path, &Mat::zeros(r, c))?;
                }
            }
        }
        Ok(())
    }
}

// ── raw matmul kernels (also the backward workhorses) ──────────────────

fn matmul_into(a: &Mat, b: &Mat, out: &mut Mat) {
    let (m, k) = a.shape();
    let n = b.cols();
    debug_assert_eq!(out.shape(), (m, n));
    for i in 0..m {
        for p in 0..k {
            let aip = a.get(i, p);
            if aip == 0.0 {
                continue;
            }
            let brow = b.row(p);
            let orow = out.row_mut(i);
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// `out += a @ b^T` shape (m,k)x(n,k) -> (m,n).
fn matmul_nt_into(a: &Mat, b: &Mat, out: &mut Mat) {
    let m = a.rows();
    let n = b.rows();
    debug_assert_eq!(a.cols(), b.cols());
    debug_assert_eq!(out.shape(), (m, n));
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..n {
            let dot: f64 = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            orow[j] += dot;
        }
    }
}

/// `out += a^T @ d` shape (m,k)^T x (m,n) -> (k,n).
fn matmul_tn_into(a: &Mat, d: &Mat, out: &mut Mat) {
    let (m, k) = a.shape();
    let n = d.cols();
    debug_assert_eq!(out.shape(), (k, n));
    for i in 0..m {
        let arow = a.row(i);
        let drow = d.row(i);
        for p in 0..k {
            let aip = arow[p];
            if aip == 0.0 {
                continue;
            }
            let orow = out.row_mut(p);
            for j in 0..n {
                orow[j] += aip * drow[j];
            }
        }
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    Mat::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
    .expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Mat {
        Mat::from_rows(rows).unwrap()
    }

    /// Brute-force triple-loop matmul oracle, independent of `matmul_into`.
    fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn linear_identity_weight() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![1.0, 2.0]]));
        let w = g.leaf(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = g.leaf(Mat::zeros(1, 2));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_sum() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![1.0, 1.0]]));
        let w = g.leaf(mat(&[vec![2.0], vec![3.0]]));
        let b = g.leaf(mat(&[vec![1.0]]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_matches_naive_oracle() {
        let mut rng = crate::numerics::rng::stream(11, "matmul-oracle");
        use rand::Rng;
        let a = Mat::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Mat::from_vec(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let expect = naive_matmul(&a, &b);
        let mut g = Graph::new();
        let (ai, bi) = (g.leaf(a), g.leaf(b));
        let y = g.matmul(ai, bi).unwrap();
        assert_eq!(g.value(y), &expect);
    }

    #[test]
    fn linear_shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(Mat::zeros(2, 3));
        let w = g.leaf(Mat::zeros(4, 2));
        let err = g.matmul(x, w).unwrap_err();
        match err {
            NumericsError::DimMismatch { left, right, .. } => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (4, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_inputs() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![0.0, 0.0, 0.0]]));
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_inputs_no_overflow() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![1000.0, 1000.0]]));
        let y = g.softmax_rows(x).unwrap();
        assert!((g.value(y).get(0, 0) - 0.5).abs() < 1e-12);
        assert!((g.value(y).get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_closed_form() {
        // softmax([0, ln 3]) = [1/(1+3), 3/(1+3)]
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![0.0, 3.0_f64.ln()]]));
        let y = g.softmax_rows(x).unwrap();
        assert!((g.value(y).get(0, 0) - 0.25).abs() < 1e-12);
        assert!((g.value(y).get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![5.0, 5.0, 5.0]]));
        let gamma = g.leaf(Mat::filled(1, 3, 1.0));
        let beta = g.leaf(Mat::zeros(1, 3));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_symmetric_row() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![-1.0, 1.0]]));
        let gamma = g.leaf(Mat::filled(1, 2, 1.0));
        let beta = g.leaf(Mat::zeros(1, 2));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!((g.value(y).get(0, 0) + 1.0).abs() < 1e-4);
        assert!((g.value(y).get(0, 1) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_statistics_oracle() {
        let mut rng = crate::numerics::rng::stream(3, "ln-oracle");
        use rand::Rng;
        let row: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut g = Graph::new();
        let x = g.leaf(mat(&[row]));
        let gamma = g.leaf(Mat::filled(1, 16, 1.0));
        let beta = g.leaf(Mat::zeros(1, 16));
        let y = g.layer_norm(x, gamma, beta, 1e-9).unwrap();
        let out = g.value(y);
        let mean = out.data().iter().sum::<f64>() / 16.0;
        let var = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Mat::zeros(2, 4));
        let y = g.cross_entropy(x, &[0, 3]).unwrap();
        assert!((g.value(y).item().unwrap() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_peaked_logits() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![20.0, 0.0, 0.0]]));
        let y = g.cross_entropy(x, &[0]).unwrap();
        assert!(g.value(y).item().unwrap() < 0.01);
    }

    #[test]
    fn cross_entropy_matches_manual_rows() {
        let mut rng = crate::numerics::rng::stream(5, "ce-oracle");
        use rand::Rng;
        let logits = Mat::from_vec(5, 3, (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let labels = [0usize, 2, 1, 1, 0];
        // Scalar oracle: per-row log-sum-exp computed directly.
        let mut expect = 0.0;
        for i in 0..5 {
            let row = logits.row(i);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += lse - row[labels[i]];
        }
        expect /= 5.0;
        let mut g = Graph::new();
        let x = g.leaf(logits);
        let y = g.cross_entropy(x, &labels).unwrap();
        assert!((g.value(y).item().unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let x = g.leaf(Mat::zeros(1, 3));
        assert!(matches!(
            g.cross_entropy(x, &[3]),
            Err(NumericsError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.var(mat(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let mut g = Graph::new();
        let x = g.var(mat(&[vec![1.0, -2.0, 0.5]]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad of a*f + b*g equals a*grad(f) + b*grad(g)
        let x0 = mat(&[vec![0.3, -1.2, 0.7]]);
        let (a, b) = (2.5, -0.75);

        let run = |wa: f64, wb: f64| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.var(x0.clone());
            let sq = g.mul(x, x).unwrap();
            let f = g.sum_all(sq);
            let sm = g.softmax_rows(x).unwrap();
            let first = g.slice_cols(sm, 0, 1).unwrap();
            let gg = g.sum_all(first);
            let fa = g.scale(f, wa);
            let gb = g.scale(gg, wb);
            let loss = g.add(fa, gb).unwrap();
            g.backward(loss).unwrap();
            g.grad(x).unwrap().data().to_vec()
        };

        let combined = run(a, b);
        let only_f = run(1.0, 0.0);
        let only_g = run(0.0, 1.0);
        for i in 0..3 {
            let lin = a * only_f[i] + b * only_g[i];
            assert!((combined[i] - lin).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.var(Mat::scalar(2.0));
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(NumericsError::TapeConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.var(Mat::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(NumericsError::NotScalar { .. })));
    }

    #[test]
    fn gather_rows_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.var(mat(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let y = g.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        // row 2 picked twice, row 1 never
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn segment_reduce_max_routes_gradient_to_winner() {
        let mut g = Graph::new();
        let x = g.var(mat(&[vec![1.0], vec![5.0], vec![2.0], vec![7.0]]));
        let y = g.segment_reduce(x, &[0, 2, 4], Reduce::Max).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 7.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn segment_reduce_mean_spreads_gradient() {
        let mut g = Graph::new();
        let x = g.var(mat(&[vec![2.0], vec![4.0], vec![9.0]]));
        let y = g.segment_reduce(x, &[0, 2, 3], Reduce::Mean).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 9.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.5, 0.5, 1.0]);
    }

    #[test]
    fn segment_reduce_rejects_empty_segment() {
        let mut g = Graph::new();
        let x = g.var(Mat::zeros(3, 1));
        assert!(g.segment_reduce(x, &[0, 0, 3], Reduce::Sum).is_err());
        assert!(g.segment_reduce(x, &[0, 2], Reduce::Sum).is_err());
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let mut g = Graph::new();
        let a = g.var(mat(&[vec![1.0], vec![2.0]]));
        let b = g.var(mat(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let mid = g.slice_cols(c, 1, 2).unwrap();
        let loss = g.sum_all(mid);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn reshape_keeps_gradient_layout() {
        let mut g = Graph::new();
        let x = g.var(mat(&[vec![1.0, 2.0, 3.0, 4.0]]));
        let r = g.reshape(x, 2, 2).unwrap();
        let first_col = g.slice_cols(r, 0, 1).unwrap();
        let loss = g.sum_all(first_col);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
    }
}
