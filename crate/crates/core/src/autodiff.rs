//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep. Parameters
//! live in a [`ParamStore`] that the tape borrows; gradients come back as a
//! [`Gradients`] value which the caller folds into the store in whatever order
//! it chooses.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape was created without recording; backward is unavailable")]
    NotRecording,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors with a gradient accumulator per tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Simultaneous mutable access to a parameter and its gradient.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        (&mut self.values[id.0], &self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Adds `grads` into the accumulators. Callers fix the accumulation order.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.dense {
            let acc = self.grads[id.0].data_mut();
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        for (id, rows) in &grads.rows {
            let acc = &mut self.grads[id.0];
            for (&r, vals) in rows {
                for (a, v) in acc.row_mut(r).iter_mut().zip(vals) {
                    *a += v;
                }
            }
        }
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Gather {
        param: ParamId,
        rows: Vec<usize>,
    },
    MatMul(Var, Var),
    MatVec(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
    Slice(Var, usize),
    Index(Var, usize),
    Reshape(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    MeanRows(Var, Range<usize>),
    MaxPool {
        input: Var,
        argmax: Vec<Option<usize>>,
    },
    Cosine {
        a: Var,
        b: Var,
        norm_a: f64,
        norm_b: f64,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
}

#[derive(Debug)]
enum Slot {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    slot: Slot,
    op: Op,
}

/// Gradients produced by one backward sweep, keyed by parameter.
///
/// Parameters read through [`Tape::gather_rows`] are stored row-sparse so a
/// large embedding table does not cost a dense buffer per example.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    dense: BTreeMap<ParamId, Tensor>,
    rows: BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>>,
}

impl Gradients {
    /// Dense gradient for `id`; zeros if the parameter was unreachable.
    pub fn to_dense(&self, id: ParamId, params: &ParamStore) -> Tensor {
        let mut out = self
            .dense
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.value(id).shape()));
        if let Some(rows) = self.rows.get(&id) {
            for (&r, vals) in rows {
                for (a, v) in out.row_mut(r).iter_mut().zip(vals) {
                    *a += v;
                }
            }
        }
        out
    }

    pub fn touches(&self, id: ParamId) -> bool {
        self.dense.contains_key(&id) || self.rows.contains_key(&id)
    }

    pub fn is_finite(&self) -> bool {
        self.dense.values().all(Tensor::is_finite)
            && self
                .rows
                .values()
                .all(|m| m.values().all(|r| r.iter().all(|v| v.is_finite())))
    }
}

/// Records primitive applications for one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    recording: bool,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that computes values only; [`Tape::backward`] is rejected.
    pub fn inference(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].slot {
            Slot::Owned(t) => t,
            Slot::Param(id) => self.params.value(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let op = if self.recording { op } else { Op::Const };
        self.nodes.push(Node {
            slot: Slot::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let op = if self.recording {
            Op::Param(id)
        } else {
            Op::Const
        };
        self.nodes.push(Node {
            slot: Slot::Param(id),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Embedding lookup: rows `rows` of a rank-2 parameter, as a `len × cols` matrix.
    pub fn gather_rows(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = self.params.value(id);
        if table.rank() != 2 {
            return Err(invalid(
                "gather_rows",
                format!("table has shape {:?}", table.shape()),
            ));
        }
        let cols = table.cols();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= table.rows() {
                return Err(invalid(
                    "gather_rows",
                    format!(
                        "row {r} out of range for table of shape {:?}",
                        table.shape()
                    ),
                ));
            }
            out.extend_from_slice(table.row(r));
        }
        let value = Tensor::matrix(rows.len(), cols, out);
        Ok(self.push(
            value,
            Op::Gather {
                param: id,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Single row of a rank-2 parameter as a vector.
    pub fn param_row(&mut self, id: ParamId, row: usize) -> Result<Var> {
        let m = self.gather_rows(id, &[row])?;
        let cols = self.value(m).cols();
        self.reshape(m, &[cols])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                let brow = &tb.data()[p * n..(p + 1) * n];
                for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b)))
    }

    /// `[h, d] × [d] → [h]`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (self.value(a), self.value(x));
        if ta.rank() != 2 || tx.rank() != 1 || ta.cols() != tx.numel() {
            return Err(mismatch("matvec", ta.shape(), tx.shape()));
        }
        let out: Vec<f64> = (0..ta.rows())
            .map(|i| ta.row(i).iter().zip(tx.data()).map(|(p, q)| p * q).sum())
            .collect();
        Ok(self.push(Tensor::vector(out), Op::MatVec(a, x)))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(Tensor::new(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|v| v * c).collect(),
        );
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(mismatch("scale_by", self.value(a).shape(), ts.shape()));
        }
        let c = ts.item();
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|v| v * c).collect(),
        );
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_cols", "no inputs"))?;
        let rows = self.value(*first).shape().first().copied().unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(mismatch(
                    "concat_cols",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(
            Tensor::matrix(rows, total, out),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let cols = self.value(*first).shape().get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != cols {
                return Err(mismatch(
                    "concat_rows",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        Ok(self.push(
            Tensor::matrix(rows, cols, out),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Joins scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() > 1 {
                return Err(mismatch("concat", &[], t.shape()));
            }
            out.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::vector(out), Op::Concat(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || range.start > range.end || range.end > t.rows() {
            return Err(invalid(
                "slice_rows",
                format!("rows {range:?} of tensor with shape {:?}", t.shape()),
            ));
        }
        let c = t.cols();
        let data = t.data()[range.start * c..range.end * c].to_vec();
        let out = Tensor::matrix(range.len(), c, data);
        Ok(self.push(out, Op::SliceRows(a, range.start)))
    }

    pub fn slice(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || range.start > range.end || range.end > t.numel() {
            return Err(invalid(
                "slice",
                format!("range {range:?} of tensor with shape {:?}", t.shape()),
            ));
        }
        let out = Tensor::vector(t.data()[range.clone()].to_vec());
        Ok(self.push(out, Op::Slice(a, range.start)))
    }

    /// Element `i` of the flattened tensor, as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.numel() {
            return Err(invalid(
                "index",
                format!("{i} out of range for shape {:?}", t.shape()),
            ));
        }
        let out = Tensor::scalar(t.data()[i]);
        Ok(self.push(out, Op::Index(a, i)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(mismatch("reshape", t.shape(), shape));
        }
        let out = t.clone().reshaped(shape.to_vec());
        Ok(self.push(out, Op::Reshape(a)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect());
        self.push(out, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || t.numel() == 0 {
            return Err(invalid(
                "softmax",
                format!("needs a non-empty vector, got {:?}", t.shape()),
            ));
        }
        let out = Tensor::vector(softmax(t.data()));
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || t.numel() == 0 {
            return Err(invalid(
                "log_softmax",
                format!("needs a non-empty vector, got {:?}", t.shape()),
            ));
        }
        let out = Tensor::vector(log_softmax(t.data()));
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Column-wise mean over `rows` of a matrix; the zero vector for an empty range.
    pub fn mean_rows(&mut self, a: Var, rows: Range<usize>) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || rows.start > rows.end || rows.end > t.rows() {
            return Err(invalid(
                "mean_rows",
                format!("rows {rows:?} of tensor with shape {:?}", t.shape()),
            ));
        }
        let c = t.cols();
        let mut out = vec![0.0; c];
        if !rows.is_empty() {
            for r in rows.clone() {
                for (o, v) in out.iter_mut().zip(t.row(r)) {
                    *o += v;
                }
            }
            let n = rows.len() as f64;
            out.iter_mut().for_each(|v| *v /= n);
        }
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a, rows)))
    }

    /// Max over column ranges of a `[n, m]` matrix.
    ///
    /// Output has `n * ranges.len()` entries ordered row-major then range. An
    /// empty range yields 0; ties go to the first maximal column.
    pub fn max_pool_ranges(&mut self, a: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(invalid(
                "max_pool_ranges",
                format!("needs a matrix, got {:?}", t.shape()),
            ));
        }
        let (n, m) = (t.rows(), t.cols());
        if let Some(bad) = ranges.iter().find(|r| r.start > r.end || r.end > m) {
            return Err(invalid(
                "max_pool_ranges",
                format!("range {bad:?} exceeds {m} columns"),
            ));
        }
        let mut out = Vec::with_capacity(n * ranges.len());
        let mut argmax = Vec::with_capacity(n * ranges.len());
        for i in 0..n {
            let row = t.row(i);
            for r in ranges {
                let mut best: Option<usize> = None;
                for j in r.clone() {
                    match best {
                        Some(b) if row[j] <= row[b] => {}
                        _ => best = Some(j),
                    }
                }
                out.push(best.map_or(0.0, |b| row[b]));
                argmax.push(best.map(|b| i * m + b));
            }
        }
        Ok(self.push(Tensor::vector(out), Op::MaxPool { input: a, argmax }))
    }

    /// Cosine similarity; 0 with zero gradient when either side is all zeros.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(mismatch("cosine", ta.shape(), tb.shape()));
        }
        let norm_a = ta.l2_norm();
        let norm_b = tb.l2_norm();
        let value = if norm_a == 0.0 || norm_b == 0.0 {
            0.0
        } else {
            let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
            dot / (norm_a * norm_b)
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
        ))
    }

    /// Same-length 1-D convolution over the rows of `x`.
    ///
    /// `x` is `[m, k]`, `w` is `[n, width, k]`, `b` is `[n]`; the output is
    /// `[n, m]`. The input is zero-padded with `(width-1)/2` rows on the left
    /// and the remainder on the right.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 2 || tw.rank() != 3 || tw.shape()[2] != tx.cols() {
            return Err(mismatch("conv1d_same", tx.shape(), tw.shape()));
        }
        if tb.rank() != 1 || tb.numel() != tw.shape()[0] {
            return Err(mismatch("conv1d_same", tw.shape(), tb.shape()));
        }
        let out = conv1d_same_forward(tx, tw, tb);
        Ok(self.push(out, Op::Conv1d { x, w, b }))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The tape is left untouched, so calling this twice yields identical
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(AutodiffError::NotRecording);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(AutodiffError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = match &node.slot {
                Slot::Owned(t) => t,
                Slot::Param(id) => self.params.value(*id),
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    let entry = out
                        .dense
                        .entry(*id)
                        .or_insert_with(|| Tensor::zeros(y.shape()));
                    for (a, v) in entry.data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                Op::Gather { param, rows } => {
                    let cols = y.cols();
                    let table = out.rows.entry(*param).or_default();
                    for (k, &r) in rows.iter().enumerate() {
                        let acc = table.entry(r).or_insert_with(|| vec![0.0; cols]);
                        for (a, v) in acc.iter_mut().zip(&g[k * cols..(k + 1) * cols]) {
                            *a += v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            let mut acc = 0.0;
                            for j in 0..n {
                                let gv = g[i * n + j];
                                acc += gv * tb.data()[p * n + j];
                                gb[p * n + j] += av * gv;
                            }
                            ga[i * k + p] = acc;
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::MatVec(a, x) => {
                    let (ta, tx) = (self.value(*a), self.value(*x));
                    let (h, d) = (ta.rows(), ta.cols());
                    let mut ga = vec![0.0; h * d];
                    let mut gx = vec![0.0; d];
                    for i in 0..h {
                        let row = ta.row(i);
                        for j in 0..d {
                            ga[i * d + j] = g[i] * tx.data()[j];
                            gx[j] += row[j] * g[i];
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::ScaleBy(a, s) => {
                    let c = self.value(*s).item();
                    let ta = self.value(*a);
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    let gs: f64 = g.iter().zip(ta.data()).map(|(x, y)| x * y).sum();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *s, &[gs]);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = (y.rows(), y.cols());
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(&mut grads, *p, &gp);
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) | Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).numel();
                        accumulate(&mut grads, *p, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let ta = self.value(*a);
                    let c = ta.cols();
                    accumulate_at(&mut grads, *a, ta.numel(), start * c, &g);
                }
                Op::Slice(a, start) => {
                    let n = self.value(*a).numel();
                    accumulate_at(&mut grads, *a, n, *start, &g);
                }
                Op::Index(a, i) => {
                    let n = self.value(*a).numel();
                    accumulate_at(&mut grads, *a, n, *i, &g);
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, &g),
                Op::Tanh(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(y.data())
                        .map(|(gv, t)| gv * (1.0 - t * t))
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = g.iter().zip(y.data()).map(|(gv, e)| gv * e).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Log(a) => {
                    let ta = self.value(*a);
                    let ga: Vec<f64> = g.iter().zip(ta.data()).map(|(gv, x)| gv / x).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Softmax(a) => {
                    let dot: f64 = g.iter().zip(y.data()).map(|(gv, s)| gv * s).sum();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(y.data())
                        .map(|(gv, s)| s * (gv - dot))
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(y.data())
                        .map(|(gv, l)| gv - l.exp() * total)
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::MeanRows(a, rows) => {
                    if !rows.is_empty() {
                        let ta = self.value(*a);
                        let c = ta.cols();
                        let n = rows.len() as f64;
                        let mut ga = vec![0.0; ta.numel()];
                        for r in rows.clone() {
                            for (dst, gv) in ga[r * c..(r + 1) * c].iter_mut().zip(&g) {
                                *dst = gv / n;
                            }
                        }
                        accumulate(&mut grads, *a, &ga);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let n = self.value(*input).numel();
                    let mut ga = vec![0.0; n];
                    for (gv, am) in g.iter().zip(argmax) {
                        if let Some(pos) = am {
                            ga[*pos] += gv;
                        }
                    }
                    accumulate(&mut grads, *input, &ga);
                }
                Op::Cosine {
                    a,
                    b,
                    norm_a,
                    norm_b,
                } => {
                    if *norm_a > 0.0 && *norm_b > 0.0 {
                        let (ta, tb) = (self.value(*a), self.value(*b));
                        let c = y.item();
                        let inv = 1.0 / (norm_a * norm_b);
                        let ga: Vec<f64> = ta
                            .data()
                            .iter()
                            .zip(tb.data())
                            .map(|(x, z)| g[0] * (z * inv - c * x / (norm_a * norm_a)))
                            .collect();
                        let gb: Vec<f64> = ta
                            .data()
                            .iter()
                            .zip(tb.data())
                            .map(|(x, z)| g[0] * (x * inv - c * z / (norm_b * norm_b)))
                            .collect();
                        accumulate(&mut grads, *a, &ga);
                        accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::Conv1d { x, w, b } => {
                    let (gx, gw, gb) = conv1d_same_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *w, &gw);
                    accumulate(&mut grads, *b, &gb);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, x)| *a += x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_at(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, offset: usize, g: &[f64]) {
    let acc = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    acc[offset..offset + g.len()]
        .iter_mut()
        .zip(g)
        .for_each(|(a, x)| *a += x);
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn conv_padding(width: usize) -> usize {
    (width - 1) / 2
}

fn conv1d_same_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (x.rows(), x.cols());
    let (n, width) = (w.shape()[0], w.shape()[1]);
    let left = conv_padding(width);
    let mut out = vec![0.0; n * m];
    for f in 0..n {
        let filt = &w.data()[f * width * k..(f + 1) * width * k];
        for t in 0..m {
            let mut acc = b.data()[f];
            for o in 0..width {
                let Some(src) = (t + o).checked_sub(left).filter(|s| *s < m) else {
                    continue;
                };
                let xr = x.row(src);
                let wr = &filt[o * k..(o + 1) * k];
                acc += xr.iter().zip(wr).map(|(p, q)| p * q).sum::<f64>();
            }
            out[f * m + t] = acc;
        }
    }
    Tensor::matrix(n, m, out)
}

fn conv1d_same_backward(x: &Tensor, w: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (m, k) = (x.rows(), x.cols());
    let (n, width) = (w.shape()[0], w.shape()[1]);
    let left = conv_padding(width);
    let mut gx = vec![0.0; m * k];
    let mut gw = vec![0.0; n * width * k];
    let mut gb = vec![0.0; n];
    for f in 0..n {
        let filt = &w.data()[f * width * k..(f + 1) * width * k];
        for t in 0..m {
            let gv = g[f * m + t];
            if gv == 0.0 {
                continue;
            }
            gb[f] += gv;
            for o in 0..width {
                let Some(src) = (t + o).checked_sub(left).filter(|s| *s < m) else {
                    continue;
                };
                let xr = x.row(src);
                let gw_row = &mut gw[(f * width + o) * k..(f * width + o + 1) * k];
                for (a, xv) in gw_row.iter_mut().zip(xr) {
                    *a += gv * xv;
                }
                let gx_row = &mut gx[src * k..(src + 1) * k];
                for (a, wv) in gx_row.iter_mut().zip(&filt[o * k..(o + 1) * k]) {
                    *a += gv * wv;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// One checked parameter element.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The loss was non-finite at one of the perturbed points.
    pub non_finite: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

/// Per-parameter summary of a [`GradCheckReport`].
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub param: String,
    pub checked: usize,
    pub failed: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn groups(&self) -> Vec<GroupSummary> {
        let mut out: Vec<GroupSummary> = Vec::new();
        for e in &self.entries {
            let group = match out.iter_mut().find(|g| g.param == e.param) {
                Some(g) => g,
                None => {
                    out.push(GroupSummary {
                        param: e.param.clone(),
                        checked: 0,
                        failed: 0,
                        max_rel_error: 0.0,
                    });
                    out.last_mut().unwrap()
                }
            };
            group.checked += 1;
            group.failed += usize::from(!e.passed);
            group.max_rel_error = group.max_rel_error.max(e.rel_error);
        }
        out
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences for every element
/// of every parameter.
pub fn grad_check<F>(
    params: &mut ParamStore,
    h: f64,
    tol: f64,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let elements: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|id| (0..params.value(id).numel()).map(move |i| (id, i)))
        .collect();
    grad_check_elements(params, &elements, h, tol, forward)
}

/// [`grad_check`] restricted to the listed `(parameter, flat index)` elements.
pub fn grad_check_elements<F>(
    params: &mut ParamStore,
    elements: &[(ParamId, usize)],
    h: f64,
    tol: f64,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic: BTreeMap<ParamId, Tensor> = {
        let mut tape = Tape::new(params);
        let loss = forward(&mut tape)?;
        let grads = tape.backward(loss)?;
        elements
            .iter()
            .map(|(id, _)| *id)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .map(|id| (id, grads.to_dense(id, params)))
            .collect()
    };

    let eval = |params: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference(params);
        let loss = forward(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let mut entries = Vec::with_capacity(elements.len());
    for &(id, i) in elements {
        let original = params.value(id).data()[i];
        params.value_mut(id).data_mut()[i] = original + h;
        let plus = eval(params);
        params.value_mut(id).data_mut()[i] = original - h;
        let minus = eval(params);
        params.value_mut(id).data_mut()[i] = original;
        let (plus, minus) = (plus?, minus?);

        let a = analytic[&id].data()[i];
        let non_finite = !plus.is_finite() || !minus.is_finite();
        let numeric = (plus - minus) / (2.0 * h);
        let rel_error = if non_finite {
            f64::INFINITY
        } else {
            relative_error(a, numeric)
        };
        entries.push(GradCheckEntry {
            param: params.name(id).to_string(),
            index: i,
            analytic: a,
            numeric,
            rel_error,
            non_finite,
            passed: !non_finite && rel_error <= tol,
        });
    }
    Ok(GradCheckReport { entries, tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut ps = ParamStore::new();
        let id = ps.insert(name, t).unwrap();
        (ps, id)
    }

    #[test]
    fn tanh_of_zero() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(Tensor::vector(vec![0.0]));
        let y = tape.tanh(x);
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn uniform_softmax() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(Tensor::vector(vec![0.0; 3]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn orthogonal_cosine_is_zero() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let c = tape.cosine(a, b).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
    }

    #[test]
    fn zero_vector_cosine_has_zero_gradient() {
        let (ps, id) = store_with("a", Tensor::vector(vec![0.0, 0.0]));
        let mut tape = Tape::new(&ps);
        let a = tape.param(id);
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.cosine(a, b).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
        let g = tape.backward(c).unwrap();
        assert_eq!(g.to_dense(id, &ps).data(), &[0.0, 0.0]);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let (ps, id) = store_with("x", Tensor::scalar(0.0));
        let mut tape = Tape::new(&ps);
        let x = tape.param(id);
        let y = tape.tanh(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.to_dense(id, &ps).item(), 1.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let (ps, id) = store_with("x", Tensor::vector(vec![0.3, -1.2]));
        let mut tape = Tape::new(&ps);
        let x = tape.param(id);
        let s = tape.softmax(x).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap().to_dense(id, &ps);
        assert!(g.data().iter().all(|v| v.abs() < 1e-16));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "add",
                left: vec![2],
                right: vec![3]
            }
        );
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            tape.backward(a).unwrap_err(),
            AutodiffError::NotScalar(vec![2])
        );
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let ps = ParamStore::new();
        let mut tape = Tape::inference(&ps);
        let a = tape.constant(Tensor::scalar(1.0));
        assert_eq!(tape.backward(a).unwrap_err(), AutodiffError::NotRecording);
    }

    #[test]
    fn unreachable_parameter_has_zero_gradient() {
        let mut ps = ParamStore::new();
        let used = ps.insert("used", Tensor::scalar(2.0)).unwrap();
        let unused = ps.insert("unused", Tensor::vector(vec![1.0, 1.0])).unwrap();
        let mut tape = Tape::new(&ps);
        let x = tape.param(used);
        let y = tape.tanh(x);
        let g = tape.backward(y).unwrap();
        assert!(!g.touches(unused));
        assert_eq!(g.to_dense(unused, &ps).data(), &[0.0, 0.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::scalar(1.0)).unwrap();
        assert_eq!(
            ps.insert("w", Tensor::scalar(2.0)).unwrap_err(),
            AutodiffError::DuplicateParam("w".into())
        );
    }

    #[test]
    fn max_pool_ties_route_to_first_index() {
        let (ps, id) = store_with("c", Tensor::matrix(1, 4, vec![2.0, 2.0, 1.0, 2.0]));
        let mut tape = Tape::new(&ps);
        let c = tape.param(id);
        let whole = [Range { start: 0, end: 4 }];
        let p = tape.max_pool_ranges(c, &whole).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap().to_dense(id, &ps);
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_gradient_is_row_sparse() {
        let (ps, id) = store_with("e", Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]));
        let mut tape = Tape::new(&ps);
        let rows = tape.gather_rows(id, &[2, 0, 2]).unwrap();
        let l = tape.sum(rows);
        let g = tape.backward(l).unwrap().to_dense(id, &ps);
        assert_eq!(g.data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn linear_model_grad_check() {
        let (mut ps, id) = store_with("w", Tensor::vector(vec![3.0]));
        let report = grad_check(&mut ps, 1e-5, 1e-10, |tape| {
            let w = tape.param(id);
            let x = tape.constant(Tensor::vector(vec![2.0]));
            let y = tape.mul(w, x)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        let e = &report.entries[0];
        assert!((e.analytic - 2.0).abs() < 1e-15);
        assert!((e.numeric - 2.0).abs() < 1e-9);
        assert!(e.rel_error < 1e-10, "{e:?}");
        assert!(report.passed());
    }

    #[test]
    fn constant_closure_has_zero_gradients() {
        let (mut ps, id) = store_with("w", Tensor::vector(vec![1.0, -2.0]));
        let report = grad_check(&mut ps, 1e-5, 1e-4, |tape| {
            let _ = tape.param(id);
            Ok(tape.constant(Tensor::scalar(4.2)))
        })
        .unwrap();
        for e in &report.entries {
            assert_eq!(e.analytic, 0.0);
            assert_eq!(e.numeric, 0.0);
        }
        assert!(report.passed());
    }

    #[test]
    fn non_finite_loss_is_reported_not_raised() {
        let (mut ps, id) = store_with("w", Tensor::scalar(0.0));
        let report = grad_check(&mut ps, 1e-5, 1e-4, |tape| {
            let w = tape.param(id);
            Ok(tape.ln(w))
        })
        .unwrap();
        assert!(report.entries[0].non_finite);
        assert!(!report.passed());
    }

    #[test]
    fn grad_check_restores_parameters() {
        let (mut ps, id) = store_with("w", Tensor::vector(vec![0.1, 0.2, 0.3]));
        let before = ps.value(id).clone();
        grad_check(&mut ps, 1e-5, 1e-6, |tape| {
            let w = tape.param(id);
            let t = tape.tanh(w);
            Ok(tape.sum(t))
        })
        .unwrap();
        assert_eq!(ps.value(id), &before);
    }
}
