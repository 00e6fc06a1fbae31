//! Minimal reverse-mode gradient engine over dense 2-d tensors.
//!
//! A [`Tape`] records every executed op in order; [`Tape::backward`] visits
//! the record in exact reverse and accumulates gradients with `+=` at
//! fan-out points. Evaluation order is fixed, so identical inputs produce
//! bit-identical values and gradients.
//!
//! The op set is exactly what the message-passing model needs: dense
//! matmul, elementwise arithmetic and activations, column concat/slice,
//! row gather/scatter for edge indexing, a per-segment softmax for
//! attention normalization, and inverted dropout.

mod tensor;

pub use tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

use crate::error::{Error, Result};
use rand::Rng;
use std::ops::Range;
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// Elementwise add; `row_broadcast` marks a 1xC right operand added to
    /// every row (the only broadcast the engine supports).
    Add {
        lhs: NodeId,
        rhs: NodeId,
        row_broadcast: bool,
    },
    /// Elementwise mul; `col_broadcast` marks an nx1 right operand scaling
    /// every column of the left operand (attention weights on messages).
    Mul {
        lhs: NodeId,
        rhs: NodeId,
        col_broadcast: bool,
    },
    Scale(NodeId, f64),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Softplus(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, Range<usize>),
    SumAll(NodeId),
    RowGather(NodeId, Rc<Vec<usize>>),
    RowScatterAdd(NodeId, Rc<Vec<usize>>),
    SegmentSoftmax(NodeId, Rc<Vec<usize>>),
    /// Mask holds the applied multiplier per entry: 0.0 or 1/(1-rate).
    Dropout(NodeId, Vec<f64>),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed ops. Single-threaded; one backward pass per
/// tape (backward frees interior values as it goes).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf. Leaves keep their values and gradients through
    /// backward; set `requires_grad` for trainable parameters.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives gradient (data, masks, fixed weights).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of a leaf after [`Tape::backward`]; `None` if the node never
    /// received gradient.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[NodeId], op: Op) -> NodeId {
        let requires = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.push(value, requires, op)
    }

    fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
        Error::ShapeError { op, left, right }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Self::shape_err("matmul", av.shape(), bv.shape()));
        }
        let out = matmul_nn(av, bv);
        Ok(self.push_op(out, &[a, b], Op::MatMul(a, b)))
    }

    /// Elementwise add. The right operand may also be a `1 x cols` row
    /// vector, in which case it is added to every row of the left operand.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let row_broadcast = if av.shape() == bv.shape() {
            false
        } else if bv.rows() == 1 && bv.cols() == av.cols() {
            true
        } else {
            return Err(Self::shape_err("add", av.shape(), bv.shape()));
        };
        let mut out = av.clone();
        if row_broadcast {
            let brow = bv.data();
            for i in 0..out.rows() {
                for (o, &b) in out.row_mut(i).iter_mut().zip(brow) {
                    *o += b;
                }
            }
        } else {
            for (o, &b) in out.data_mut().iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push_op(
            out,
            &[a, b],
            Op::Add {
                lhs: a,
                rhs: b,
                row_broadcast,
            },
        ))
    }

    /// Elementwise multiply. The right operand may also be an `n x 1`
    /// column, in which case each row of the left operand is scaled by it.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let col_broadcast = if av.shape() == bv.shape() {
            false
        } else if bv.cols() == 1 && bv.rows() == av.rows() {
            true
        } else {
            return Err(Self::shape_err("mul", av.shape(), bv.shape()));
        };
        let mut out = av.clone();
        if col_broadcast {
            let scale = bv.data();
            for i in 0..out.rows() {
                let s = scale[i];
                for o in out.row_mut(i) {
                    *o *= s;
                }
            }
        } else {
            for (o, &b) in out.data_mut().iter_mut().zip(bv.data()) {
                *o *= b;
            }
        }
        Ok(self.push_op(
            out,
            &[a, b],
            Op::Mul {
                lhs: a,
                rhs: b,
                col_broadcast,
            },
        ))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.value(a).map(|v| v * factor);
        self.push_op(out, &[a], Op::Scale(a, factor))
    }

    /// Subgradient at 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push_op(out, &[a], Op::Relu(a))
    }

    /// Subgradient at 0 is `slope`.
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push_op(out, &[a], Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(stable_sigmoid);
        self.push_op(out, &[a], Op::Sigmoid(a))
    }

    /// ln(1 + e^x), computed as max(x,0) + ln(1 + e^-|x|) so large logits
    /// neither overflow nor lose the tail.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(stable_softplus);
        self.push_op(out, &[a], Op::Softplus(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_cols of zero tensors");
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Self::shape_err(
                    "concat_cols",
                    (rows, cols),
                    v.shape(),
                ));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let w = v.cols();
            for i in 0..rows {
                out.row_mut(i)[offset..offset + w].copy_from_slice(v.row(i));
            }
            offset += w;
        }
        let op = Op::ConcatCols(parts.to_vec());
        Ok(self.push_op(out, parts, op))
    }

    pub fn slice_cols(&mut self, a: NodeId, range: Range<usize>) -> Result<NodeId> {
        let av = self.value(a);
        if range.end > av.cols() || range.start > range.end {
            return Err(Self::shape_err(
                "slice_cols",
                av.shape(),
                (range.start, range.end),
            ));
        }
        let rows = av.rows();
        let mut out = Tensor::zeros(rows, range.len());
        for i in 0..rows {
            out.row_mut(i).copy_from_slice(&av.row(i)[range.clone()]);
        }
        Ok(self.push_op(out, &[a], Op::SliceCols(a, range)))
    }

    /// Sum of every entry, as a 1x1 tensor.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut acc = 0.0;
        for &v in self.value(a).data() {
            acc += v;
        }
        self.push_op(Tensor::scalar(acc), &[a], Op::SumAll(a))
    }

    /// out[r] = X[idx[r]]; indices may repeat.
    pub fn row_gather(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> Result<NodeId> {
        let av = self.value(a);
        let cols = av.cols();
        for &i in idx.iter() {
            if i >= av.rows() {
                return Err(Error::IndexError {
                    what: "row_gather index",
                    index: i,
                    bound: av.rows(),
                });
            }
        }
        let mut out = Tensor::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        Ok(self.push_op(out, &[a], Op::RowGather(a, idx)))
    }

    /// out has `n_rows` rows, out[idx[r]] += X[r]; rows accumulate in input
    /// order.
    pub fn row_scatter_add(
        &mut self,
        a: NodeId,
        idx: Rc<Vec<usize>>,
        n_rows: usize,
    ) -> Result<NodeId> {
        let av = self.value(a);
        if idx.len() != av.rows() {
            return Err(Self::shape_err("row_scatter_add", av.shape(), (idx.len(), 1)));
        }
        for &i in idx.iter() {
            if i >= n_rows {
                return Err(Error::IndexError {
                    what: "row_scatter_add index",
                    index: i,
                    bound: n_rows,
                });
            }
        }
        let cols = av.cols();
        let mut out = Tensor::zeros(n_rows, cols);
        for (r, &i) in idx.iter().enumerate() {
            let src = av.row(r);
            for (o, &s) in out.row_mut(i).iter_mut().zip(src) {
                *o += s;
            }
        }
        Ok(self.push_op(out, &[a], Op::RowScatterAdd(a, idx)))
    }

    /// Softmax within each `[row_ptr[i], row_ptr[i+1])` segment of a column
    /// vector of scores, max-subtracted for stability. Empty segments are
    /// fine; they produce no output entries.
    pub fn segment_softmax(&mut self, scores: NodeId, row_ptr: Rc<Vec<usize>>) -> Result<NodeId> {
        let sv = self.value(scores);
        let total = *row_ptr.last().unwrap_or(&0);
        if sv.cols() != 1 || sv.rows() != total {
            return Err(Self::shape_err("segment_softmax", sv.shape(), (total, 1)));
        }
        let mut out = Tensor::zeros(sv.rows(), 1);
        let data = sv.data();
        let outd = out.data_mut();
        for w in row_ptr.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if lo == hi {
                continue;
            }
            let seg = &data[lo..hi];
            let max = seg.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut denom = 0.0;
            for (o, &v) in outd[lo..hi].iter_mut().zip(seg) {
                let e = (v - max).exp();
                *o = e;
                denom += e;
            }
            for o in &mut outd[lo..hi] {
                *o /= denom;
            }
        }
        Ok(self.push_op(out, &[scores], Op::SegmentSoftmax(scores, row_ptr)))
    }

    /// Inverted dropout: zero each entry with probability `rate` and scale
    /// survivors by 1/(1-rate); identity when not training.
    pub fn dropout(
        &mut self,
        a: NodeId,
        rate: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::ConfigError(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            let out = self.value(a).clone();
            let mask = Vec::new();
            return Ok(self.push_op(out, &[a], Op::Dropout(a, mask)));
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let av = self.value(a);
        let mask: Vec<f64> = (0..av.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let mut out = av.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.push_op(out, &[a], Op::Dropout(a, mask)))
    }

    /// Populate leaf gradients for a scalar loss. Visits ops in exact
    /// reverse execution order and accumulates with `+=`. Interior values
    /// and gradients are released as soon as they are dead, so a tape
    /// supports exactly one backward pass; leaf values/gradients and the
    /// loss value survive.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Self::shape_err("backward", self.value(loss).shape(), (1, 1)));
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for k in (0..self.nodes.len()).rev() {
            let Some(grad) = self.nodes[k].grad.take() else {
                continue;
            };
            self.propagate(k, &grad);
            let node = &mut self.nodes[k];
            if matches!(node.op, Op::Leaf) {
                node.grad = Some(grad);
            } else if k != loss.0 {
                node.value = Tensor::zeros(0, 0);
            }
        }
        Ok(())
    }

    // Takes the delta by value so the common fan-out-1 case moves the
    // freshly built tensor into the empty grad slot instead of copying it.
    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (o, &d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *o += d;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn propagate(&mut self, k: usize, grad: &Tensor) {
        // Ops whose backward needs input or output values read them before
        // mutating; values of inputs are still alive because inputs precede
        // k on the tape.
        match &self.nodes[k].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let da = matmul_nt(grad, &self.nodes[b.0].value);
                let db = matmul_tn(&self.nodes[a.0].value, grad);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Add {
                lhs,
                rhs,
                row_broadcast,
            } => {
                let (a, b, bc) = (*lhs, *rhs, *row_broadcast);
                self.accumulate(a, grad.clone());
                if bc {
                    let mut db = Tensor::zeros(1, grad.cols());
                    for i in 0..grad.rows() {
                        for (o, &g) in db.data_mut().iter_mut().zip(grad.row(i)) {
                            *o += g;
                        }
                    }
                    self.accumulate(b, db);
                } else {
                    self.accumulate(b, grad.clone());
                }
            }
            Op::Mul {
                lhs,
                rhs,
                col_broadcast,
            } => {
                let (a, b, bc) = (*lhs, *rhs, *col_broadcast);
                if bc {
                    let scale = self.nodes[b.0].value.data();
                    let mut da = grad.clone();
                    for i in 0..da.rows() {
                        let s = scale[i];
                        for o in da.row_mut(i) {
                            *o *= s;
                        }
                    }
                    let av = &self.nodes[a.0].value;
                    let mut db = Tensor::zeros(grad.rows(), 1);
                    for i in 0..grad.rows() {
                        let mut acc = 0.0;
                        for (&g, &x) in grad.row(i).iter().zip(av.row(i)) {
                            acc += g * x;
                        }
                        db.set(i, 0, acc);
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                } else {
                    let mut da = grad.clone();
                    for (o, &v) in
                        da.data_mut().iter_mut().zip(self.nodes[b.0].value.data())
                    {
                        *o *= v;
                    }
                    let mut db = grad.clone();
                    for (o, &v) in
                        db.data_mut().iter_mut().zip(self.nodes[a.0].value.data())
                    {
                        *o *= v;
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
            }
            Op::Scale(a, factor) => {
                let (a, f) = (*a, *factor);
                let da = grad.map(|g| g * f);
                self.accumulate(a, da);
            }
            Op::Relu(a) => {
                let a = *a;
                let mut da = grad.clone();
                for (o, &x) in da.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                    if x <= 0.0 {
                        *o = 0.0;
                    }
                }
                self.accumulate(a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let (a, s) = (*a, *slope);
                let mut da = grad.clone();
                for (o, &x) in da.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                    if x <= 0.0 {
                        *o *= s;
                    }
                }
                self.accumulate(a, da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let mut da = grad.clone();
                for (o, &y) in da.data_mut().iter_mut().zip(self.nodes[k].value.data()) {
                    *o *= y * (1.0 - y);
                }
                self.accumulate(a, da);
            }
            Op::Softplus(a) => {
                let a = *a;
                let mut da = grad.clone();
                for (o, &x) in da.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                    *o *= stable_sigmoid(x);
                }
                self.accumulate(a, da);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let mut dp = Tensor::zeros(grad.rows(), w);
                    for i in 0..grad.rows() {
                        dp.row_mut(i).copy_from_slice(&grad.row(i)[offset..offset + w]);
                    }
                    self.accumulate(p, dp);
                    offset += w;
                }
            }
            Op::SliceCols(a, range) => {
                let (a, range) = (*a, range.clone());
                let cols = self.nodes[a.0].value.cols();
                let mut da = Tensor::zeros(grad.rows(), cols);
                for i in 0..grad.rows() {
                    da.row_mut(i)[range.clone()].copy_from_slice(grad.row(i));
                }
                self.accumulate(a, da);
            }
            Op::SumAll(a) => {
                let a = *a;
                let g = grad.item();
                let shape = self.nodes[a.0].value.shape();
                let da = Tensor::from_vec(shape.0, shape.1, vec![g; shape.0 * shape.1]);
                self.accumulate(a, da);
            }
            Op::RowGather(a, idx) => {
                let (a, idx) = (*a, Rc::clone(idx));
                let shape = self.nodes[a.0].value.shape();
                let mut da = Tensor::zeros(shape.0, shape.1);
                for (r, &i) in idx.iter().enumerate() {
                    let src = grad.row(r);
                    for (o, &g) in da.row_mut(i).iter_mut().zip(src) {
                        *o += g;
                    }
                }
                self.accumulate(a, da);
            }
            Op::RowScatterAdd(a, idx) => {
                let (a, idx) = (*a, Rc::clone(idx));
                let cols = grad.cols();
                let mut da = Tensor::zeros(idx.len(), cols);
                for (r, &i) in idx.iter().enumerate() {
                    da.row_mut(r).copy_from_slice(grad.row(i));
                }
                self.accumulate(a, da);
            }
            Op::SegmentSoftmax(a, row_ptr) => {
                let (a, row_ptr) = (*a, Rc::clone(row_ptr));
                // d_score = alpha * (g - sum_j alpha_j g_j) per segment.
                let alpha = self.nodes[k].value.data();
                let mut da = Tensor::zeros(grad.rows(), 1);
                let g = grad.data();
                let dad = da.data_mut();
                for w in row_ptr.windows(2) {
                    let (lo, hi) = (w[0], w[1]);
                    let mut dot = 0.0;
                    for e in lo..hi {
                        dot += alpha[e] * g[e];
                    }
                    for e in lo..hi {
                        dad[e] = alpha[e] * (g[e] - dot);
                    }
                }
                self.accumulate(a, da);
            }
            Op::Dropout(a, mask) => {
                let a = *a;
                if mask.is_empty() {
                    self.accumulate(a, grad.clone());
                } else {
                    let mask = mask.clone();
                    let mut da = grad.clone();
                    for (o, &m) in da.data_mut().iter_mut().zip(&mask) {
                        *o *= m;
                    }
                    self.accumulate(a, da);
                }
            }
        }
    }
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
