//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node whose parents were created
//! before it, so node ids are already a topological order and the backward
//! pass is a single reverse sweep.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags, used for diagnostics and for backward-fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    MulConst,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Concat,
    ConcatRows,
    Slice,
    Row,
    Reshape,
    Transpose,
    Sum,
    Mean,
    SoftmaxMasked,
    WeightedSoftmax,
    Gather,
    ScatterCols,
    BceLogits,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MulConst => "mul_const",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Concat => "concat",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Slice => "slice",
            OpKind::Row => "row",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SoftmaxMasked => "softmax_masked",
            OpKind::WeightedSoftmax => "weighted_softmax",
            OpKind::Gather => "gather",
            OpKind::ScatterCols => "scatter_cols",
            OpKind::BceLogits => "bce_logits",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_OPS: [OpKind; 25] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::MulConst,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Tanh,
    OpKind::Exp,
    OpKind::Log,
    OpKind::Concat,
    OpKind::ConcatRows,
    OpKind::Slice,
    OpKind::Row,
    OpKind::Reshape,
    OpKind::Transpose,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::SoftmaxMasked,
    OpKind::WeightedSoftmax,
    OpKind::Gather,
    OpKind::ScatterCols,
    OpKind::BceLogits,
];

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Tensor),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Concat(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Slice { src: NodeId, start: usize },
    Row { src: NodeId, row: usize },
    Reshape(NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SoftmaxMasked(NodeId),
    WeightedSoftmax {
        logits: NodeId,
        weights: NodeId,
        // exp(l - row max) and the per-row normalizer; a zero normalizer marks a uniform fallback row
        shifted_exp: Vec<f64>,
        sums: Vec<f64>,
    },
    Gather { src: NodeId, index: Vec<Option<usize>> },
    ScatterCols { src: NodeId, index: Vec<Option<usize>> },
    BceLogits { logits: NodeId, targets: Tensor },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Concat(..) => OpKind::Concat,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Slice { .. } => OpKind::Slice,
            Op::Row { .. } => OpKind::Row,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SoftmaxMasked(..) => OpKind::SoftmaxMasked,
            Op::WeightedSoftmax { .. } => OpKind::WeightedSoftmax,
            Op::Gather { .. } => OpKind::Gather,
            Op::ScatterCols { .. } => OpKind::ScatterCols,
            Op::BceLogits { .. } => OpKind::BceLogits,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    // accumulated leaf gradients, indexed by node id
    accumulated: Vec<Option<Tensor>>,
    relu_signs: Vec<bool>,
    fallback_rows: usize,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the backward rule of `kind` deliberately wrong (scaled by 1.25).
    /// Used as a negative control for the gradient checker.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Sign pattern (`x > 0`) of every ReLU input seen so far, in creation order.
    pub fn relu_signs(&self) -> &[bool] {
        &self.relu_signs
    }

    /// Number of weighted-softmax rows that fell back to uniform weights.
    pub fn fallback_rows(&self) -> usize {
        self.fallback_rows
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers (once per graph) the named parameter from `store` as a gradient-tracking leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let id = self.leaf(value, true);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param_ids(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let y = tb.item();
            Ok(ta.map(|x| f(x, y)))
        } else if ta.is_scalar() {
            let x = ta.item();
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(dim_err(op, ta.shape(), tb.shape()))
        }
    }

    /// Elementwise sum; equal shapes or one scalar operand.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a constant tensor of the same shape (dropout masks, 0/1 masks).
    pub fn mul_const(&mut self, a: NodeId, c: Tensor) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(dim_err("mul_const", ta.shape(), c.shape()));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MulConst(a, c), rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        self.relu_signs.extend(ta.data().iter().map(|&x| x > 0.0));
        let value = ta.map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// `max{0, x}`; identical to [`Graph::relu`].
    pub fn max0(&mut self, a: NodeId) -> NodeId {
        self.relu(a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(libm::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(libm::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(libm::log);
        let rg = self.rg(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    /// Concatenation along the last axis. All parts share rank; 2-D parts share their row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rank = self.shape(*first).len();
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != rank || t.rows() != rows || rank > 2 {
                return Err(dim_err("concat", self.shape(*first), t.shape()));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if rank == 1 { vec![cols] } else { vec![rows, cols] };
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Stacks 2-D parts with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of zero tensors".into()))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(dim_err("concat_rows", self.shape(*first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` along the last axis.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(a);
        if len == 0 || start + len > t.cols() || t.shape().len() > 2 {
            return Err(dim_err("slice", t.shape(), &[start, len]));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let shape = if t.shape().len() == 1 { vec![len] } else { vec![rows, len] };
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Slice { src: a, start }, rg))
    }

    /// Row `row` of a matrix as a `1 × n` matrix.
    pub fn row(&mut self, a: NodeId, row: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 2 || row >= t.rows() {
            return Err(dim_err("row", t.shape(), &[row]));
        }
        let value = Tensor::new(vec![1, t.cols()], t.row(row).to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Row { src: a, row }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| dim_err("reshape", self.shape(a), shape))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Softmax restricted to `mask`, row-wise for matrices. Masked-out entries are exactly 0.
    pub fn softmax_masked(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let t = self.value(a);
        if mask.len() != t.len() || t.shape().len() > 2 {
            return Err(dim_err("softmax_masked", t.shape(), &[mask.len()]));
        }
        let cols = t.cols();
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let row = t.row(r);
            let m = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyNeighborhood);
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut s = 0.0;
            for j in 0..cols {
                if m[j] {
                    o[j] = libm::exp(row[j] - max);
                    s += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SoftmaxMasked(a), rg))
    }

    /// Row-wise `α_ij = w_ij·exp(l_ij) / Σ_j w_ij·exp(l_ij)` for non-negative weights `w`.
    ///
    /// A row whose weights are all zero gets uniform weights and contributes no gradient.
    pub fn weighted_softmax(&mut self, logits: NodeId, weights: NodeId) -> Result<NodeId> {
        let (l, w) = (self.value(logits), self.value(weights));
        if l.shape() != w.shape() || l.shape().len() != 2 {
            return Err(dim_err("weighted_softmax", l.shape(), w.shape()));
        }
        if w.data().iter().any(|&x| x < 0.0 || x.is_nan()) {
            return Err(Error::Contract("weighted_softmax weights must be non-negative".into()));
        }
        let (rows, cols) = (l.rows(), l.cols());
        let mut shifted_exp = vec![0.0; rows * cols];
        let mut sums = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        let mut fallbacks = 0;
        for r in 0..rows {
            let (lr, wr) = (l.row(r), w.row(r));
            let max = lr
                .iter()
                .zip(wr)
                .filter(|(_, &wv)| wv > 0.0)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            if max == f64::NEG_INFINITY {
                fallbacks += 1;
                o.fill(1.0 / cols as f64);
                continue;
            }
            let e = &mut shifted_exp[r * cols..(r + 1) * cols];
            let mut s = 0.0;
            for j in 0..cols {
                // clamp keeps zero-weight entries finite; they only enter the weight gradient
                e[j] = libm::exp((lr[j] - max).min(700.0));
                s += wr[j] * e[j];
            }
            if s == 0.0 {
                fallbacks += 1;
                o.fill(1.0 / cols as f64);
                continue;
            }
            for j in 0..cols {
                o[j] = wr[j] * e[j] / s;
            }
            sums[r] = s;
        }
        if fallbacks > 0 {
            log::debug!("weighted_softmax: {fallbacks} all-zero weight rows fell back to uniform");
        }
        self.fallback_rows += fallbacks;
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(&[logits, weights]);
        Ok(self.push(
            value,
            Op::WeightedSoftmax {
                logits,
                weights,
                shifted_exp,
                sums,
            },
            rg,
        ))
    }

    /// `out[p] = src[index[p]]`, or 0 where `index[p]` is `None`.
    pub fn gather(&mut self, src: NodeId, index: Vec<Option<usize>>, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(src);
        if index.iter().flatten().any(|&i| i >= t.len()) {
            return Err(Error::Contract("gather index out of range".into()));
        }
        let data = index.iter().map(|i| i.map_or(0.0, |i| t.data()[i])).collect();
        let value = Tensor::new(shape.to_vec(), data).map_err(|_| dim_err("gather", shape, &[index.len()]))?;
        let rg = self.rg(&[src]);
        Ok(self.push(value, Op::Gather { src, index }, rg))
    }

    /// For `src: [r×c]`, sums each entry into column `index[i·c + j]` of an `r × n_out` output.
    pub fn scatter_cols(&mut self, src: NodeId, index: Vec<Option<usize>>, n_out: usize) -> Result<NodeId> {
        let t = self.value(src);
        if t.shape().len() != 2 || index.len() != t.len() || n_out == 0 {
            return Err(dim_err("scatter_cols", t.shape(), &[index.len(), n_out]));
        }
        if index.iter().flatten().any(|&i| i >= n_out) {
            return Err(Error::Contract("scatter_cols index out of range".into()));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            for c in 0..cols {
                if let Some(k) = index[r * cols + c] {
                    out[r * n_out + k] += t.data()[r * cols + c];
                }
            }
        }
        let value = Tensor::new(vec![rows, n_out], out)?;
        let rg = self.rg(&[src]);
        Ok(self.push(value, Op::ScatterCols { src, index }, rg))
    }

    /// Mean binary cross entropy between `sigmoid(logits)` and `targets`, in the stable
    /// `max(z,0) − z·t + log(1 + e^{−|z|})` form.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Tensor) -> Result<NodeId> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(dim_err("bce_with_logits", z.shape(), targets.shape()));
        }
        if targets.data().iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Validation("BCE targets must lie in [0, 1]".into()));
        }
        let n = z.len() as f64;
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + libm::log1p(libm::exp(-z.abs())))
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(total / n), Op::BceLogits { logits, targets }, rg))
    }

    /// Back-propagates from scalar `loss`, adding into the gradient accumulators of every
    /// gradient-tracking leaf, and returns the accumulated gradient of each named parameter.
    ///
    /// Calling it twice on the same graph accumulates twice.
    pub fn backward(&mut self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if self.accumulated.len() < self.nodes.len() {
                    self.accumulated.resize(self.nodes.len(), None);
                }
                match &mut self.accumulated[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(self.param_grads())
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.accumulated.get(id.0).and_then(Option::as_ref)
    }

    /// Accumulated gradient for every named parameter (zeros for parameters the loss never reached).
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &id)| {
                let g = self
                    .grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(id)));
                (name.clone(), g)
            })
            .collect()
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let fault = if self.fault == Some(node.op.kind()) { 1.25 } else { 1.0 };
        let send = |grads: &mut [Option<Tensor>], to: NodeId, mut t: Tensor| {
            if !self.nodes[to.0].requires_grad {
                return;
            }
            if fault != 1.0 {
                t.data_mut().iter_mut().for_each(|x| *x *= fault);
            }
            match &mut grads[to.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |id: NodeId| &self.nodes[id.0].value;
        let like = |id: NodeId, data: Vec<f64>| Tensor::new(val(id).shape().to_vec(), data).expect("shape preserved");
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    matmul_a_bt_into(g.data(), tb.data(), &mut ga, m, n, k);
                    send(grads, *a, like(*a, ga));
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_b_into(ta.data(), g.data(), &mut gb, m, k, n);
                    send(grads, *b, like(*b, gb));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(grads, *a, reduce_to(g, val(*a), 1.0));
                send(grads, *b, reduce_to(g, val(*b), sign));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = product_grad(g, tb, ta);
                let gb = product_grad(g, ta, tb);
                send(grads, *a, ga);
                send(grads, *b, gb);
            }
            Op::Scale(a, c) => send(grads, *a, g.map(|x| x * c)),
            Op::MulConst(a, c) => {
                let data = g.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
                send(grads, *a, like(*a, data));
            }
            Op::Relu(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                send(grads, *a, like(*a, data));
            }
            Op::Sigmoid(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                send(grads, *a, like(*a, data));
            }
            Op::Tanh(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * (1.0 - y * y))
                    .collect();
                send(grads, *a, like(*a, data));
            }
            Op::Exp(a) => {
                let data = g.data().iter().zip(node.value.data()).map(|(gv, y)| gv * y).collect();
                send(grads, *a, like(*a, data));
            }
            Op::Log(a) => {
                let data = g.data().iter().zip(val(*a).data()).map(|(gv, x)| gv / x).collect();
                send(grads, *a, like(*a, data));
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    send(grads, p, like(p, data));
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    send(grads, p, like(p, g.data()[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::Slice { src, start } => {
                let t = val(*src);
                let (rows, cols, len) = (t.rows(), t.cols(), node.value.cols());
                let mut data = vec![0.0; t.len()];
                for r in 0..rows {
                    data[r * cols + start..r * cols + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                send(grads, *src, like(*src, data));
            }
            Op::Row { src, row } => {
                let t = val(*src);
                let cols = t.cols();
                let mut data = vec![0.0; t.len()];
                data[row * cols..(row + 1) * cols].copy_from_slice(g.data());
                send(grads, *src, like(*src, data));
            }
            Op::Reshape(a) => send(grads, *a, like(*a, g.data().to_vec())),
            Op::Transpose(a) => send(grads, *a, g.transpose().expect("2-D gradient")),
            Op::Sum(a) => send(grads, *a, Tensor::filled(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let t = val(*a);
                send(grads, *a, Tensor::filled(t.shape(), g.item() / t.len() as f64));
            }
            Op::SoftmaxMasked(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut data = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        data[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(grads, *a, like(*a, data));
            }
            Op::WeightedSoftmax {
                logits,
                weights,
                shifted_exp,
                sums,
            } => {
                let y = &node.value;
                let cols = y.cols();
                let mut gl = vec![0.0; y.len()];
                let mut gw = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    if sums[r] == 0.0 {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        let p = r * cols + j;
                        gl[p] = yr[j] * (gr[j] - dot);
                        gw[p] = shifted_exp[p] / sums[r] * (gr[j] - dot);
                    }
                }
                send(grads, *logits, like(*logits, gl));
                send(grads, *weights, like(*weights, gw));
            }
            Op::Gather { src, index } => {
                let mut data = vec![0.0; val(*src).len()];
                for (p, i) in index.iter().enumerate() {
                    if let Some(i) = i {
                        data[*i] += g.data()[p];
                    }
                }
                send(grads, *src, like(*src, data));
            }
            Op::ScatterCols { src, index } => {
                let n_out = node.value.cols();
                let cols = val(*src).cols();
                let data = index
                    .iter()
                    .enumerate()
                    .map(|(p, k)| k.map_or(0.0, |k| g.data()[(p / cols) * n_out + k]))
                    .collect();
                send(grads, *src, like(*src, data));
            }
            Op::BceLogits { logits, targets } => {
                let z = val(*logits);
                let scale = g.item() / z.len() as f64;
                let data = z
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &t)| scale * (sigmoid(z) - t))
                    .collect();
                send(grads, *logits, like(*logits, data));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

// Gradient of an add/sub operand, summed down when the operand was a broadcast scalar.
fn reduce_to(g: &Tensor, operand: &Tensor, sign: f64) -> Tensor {
    if operand.shape() == g.shape() {
        g.map(|x| x * sign)
    } else {
        Tensor::filled(operand.shape(), sign * g.data().iter().sum::<f64>())
    }
}

// Gradient of `x` in `x * y` where either side may be a broadcast scalar.
fn product_grad(g: &Tensor, other: &Tensor, this: &Tensor) -> Tensor {
    if this.shape() == g.shape() {
        if other.shape() == g.shape() {
            let data = g.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
            Tensor::new(g.shape().to_vec(), data).expect("same shape")
        } else {
            let y = other.item();
            g.map(|x| x * y)
        }
    } else {
        let s = g.data().iter().zip(other.data()).map(|(a, b)| a * b).sum();
        Tensor::filled(this.shape(), s)
    }
}
