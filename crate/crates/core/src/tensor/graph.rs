use std::cell::{Cell, RefCell};

use super::kernels;
use super::{matmul_dims, Element, Result, Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    AddScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Silu(NodeId),
    Softmax(NodeId),
    Normalize(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows { x: NodeId, index: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | MulRow(a, b) | AddScalar(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Gelu(a) | Silu(a) | Softmax(a) | Normalize(a) | Sum(a)
            | Mean(a) | Reshape(a) => vec![*a],
            SliceCols { x, .. } | GatherRows { x, .. } => vec![*x],
            ConcatCols(xs) | ConcatRows(xs) => xs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul(..) => "matmul",
            MatMulNt(..) => "matmul_nt",
            Transpose(..) => "transpose",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            AddRow(..) => "add_row",
            MulRow(..) => "mul_row",
            AddScalar(..) => "add_scalar",
            Scale(..) => "scale",
            Gelu(..) => "gelu",
            Silu(..) => "silu",
            Softmax(..) => "softmax",
            Normalize(..) => "normalize",
            Sum(..) => "sum",
            Mean(..) => "mean",
            Reshape(..) => "reshape",
            SliceCols { .. } => "slice_cols",
            ConcatCols(..) => "concat_cols",
            ConcatRows(..) => "concat_rows",
            GatherRows { .. } => "gather_rows",
        }
    }
}

struct Node<E> {
    value: Tensor<E>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<E>>,
    // per-row reciprocal std for Normalize
    saved: Vec<E>,
}

/// Computation tape. Nodes are appended in evaluation order, so node ids
/// are already a topological order and backward is a reverse sweep.
///
/// A graph built with [`Graph::inference`] computes the same values but
/// records no backward information.
pub struct Graph<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
    recording: bool,
    backward_done: Cell<bool>,
    visits: Cell<usize>,
    nonfinite: RefCell<Option<String>>,
}

/// Handle to a node on a [`Graph`].
pub struct Var<'g, E: Element> {
    graph: &'g Graph<E>,
    id: NodeId,
}

impl<E: Element> Clone for Var<'_, E> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<E: Element> Copy for Var<'_, E> {}

impl<E: Element> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// Tape-free evaluation: same arithmetic, no gradients.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording,
            backward_done: Cell::new(false),
            visits: Cell::new(0),
            nonfinite: RefCell::new(None),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Leaf, false, Vec::new())
    }

    /// Differentiable input (a parameter, or anything we want dL/dx for).
    pub fn leaf(&self, value: Tensor<E>) -> Var<'_, E> {
        let rg = self.recording;
        self.push(value, Op::Leaf, rg, Vec::new())
    }

    fn push(&self, value: Tensor<E>, op: Op, requires_grad: bool, saved: Vec<E>) -> Var<'_, E> {
        if cfg!(debug_assertions) && !value.all_finite() {
            let mut nf = self.nonfinite.borrow_mut();
            if nf.is_none() {
                *nf = Some(op.name().to_string());
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value, op, requires_grad, grad: None, saved });
        Var { graph: self, id }
    }

    /// Records `op` with output `value`; the output needs a gradient if any
    /// input does.
    fn record(&self, value: Tensor<E>, op: Op, saved: Vec<E>) -> Var<'_, E> {
        let rg = self.recording && {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, rg, saved)
    }

    pub(crate) fn var(&self, id: NodeId) -> Var<'_, E> {
        Var { graph: self, id }
    }

    pub fn value(&self, id: NodeId) -> Tensor<E> {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    pub fn grad(&self, id: NodeId) -> Option<Tensor<E>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// First op that produced a NaN or infinity (debug builds only).
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite.borrow().as_ref() {
            Some(op) => Err(TensorError::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
        self.backward_done.set(false);
    }

    /// Number of nodes the last backward sweep processed.
    pub fn last_backward_visits(&self) -> usize {
        self.visits.get()
    }

    /// Populates gradients of every differentiable leaf reachable from `loss`.
    pub fn backward(&self, loss: Var<'_, E>) -> Result<()> {
        self.check_finite()?;
        if self.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        let mut nodes = self.nodes.borrow_mut();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        for (id, node) in nodes.iter().enumerate() {
            if let Some(&bad) = node.op.inputs().iter().find(|&&i| i >= id) {
                return Err(TensorError::BrokenTape { node: id, input: bad });
            }
        }
        self.backward_done.set(true);
        if !nodes[loss.id].requires_grad {
            self.visits.set(0);
            return Ok(());
        }
        nodes[loss.id].grad = Some(vec![E::one()]);
        let mut visits = 0;
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.grad.is_none() {
                continue;
            }
            visits += 1;
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = nodes[id].grad.take().expect("checked above");
            let contribs = backward_rule(&nodes, id, &g);
            for (input, delta) in contribs {
                let target = &mut nodes[input];
                if !target.requires_grad {
                    continue;
                }
                match &mut target.grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += *d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        self.visits.set(visits);
        Ok(())
    }

    /// Concatenate along the last axis.
    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g, E>]) -> Result<Var<'g, E>> {
        let rows = self.shape_of(parts[0].id)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape_of(p.id);
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape_of(parts[0].id),
                    rhs: s,
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![E::zero(); rows * total];
        {
            let nodes = self.nodes.borrow();
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.id].value.data();
                for r in 0..rows {
                    out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                off += w;
            }
        }
        let value = Tensor::new([rows, total], out)?;
        Ok(self.record(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), Vec::new()))
    }

    /// Concatenate along the first axis of 2-D tensors.
    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g, E>]) -> Result<Var<'g, E>> {
        let cols = self.shape_of(parts[0].id)[1];
        let mut data = Vec::new();
        let mut rows = 0;
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                let v = &nodes[p.id].value;
                if v.shape().len() != 2 || v.shape()[1] != cols {
                    return Err(TensorError::Shape {
                        op: "concat_rows",
                        lhs: nodes[parts[0].id].value.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                rows += v.shape()[0];
                data.extend_from_slice(v.data());
            }
        }
        let value = Tensor::new([rows, cols], data)?;
        Ok(self.record(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), Vec::new()))
    }
}

fn backward_rule<E: Element>(nodes: &[Node<E>], id: NodeId, g: &[E]) -> Vec<(NodeId, Vec<E>)> {
    let node = &nodes[id];
    let val = |i: NodeId| &nodes[i].value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (m, k, n) = matmul_dims(val(*a).shape(), val(*b).shape()).expect("forward checked");
            let mut ga = vec![E::zero(); m * k];
            kernels::matmul_nt(g, val(*b).data(), m, n, k, &mut ga);
            let mut gb = vec![E::zero(); k * n];
            kernels::matmul_tn(val(*a).data(), g, m, k, n, &mut gb);
            vec![(*a, ga), (*b, gb)]
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[0];
            let mut ga = vec![E::zero(); m * k];
            kernels::matmul(g, val(*b).data(), m, n, k, &mut ga);
            let mut gb = vec![E::zero(); n * k];
            kernels::matmul_tn(g, val(*a).data(), m, n, k, &mut gb);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).rows(), val(*a).cols());
            let mut ga = vec![E::zero(); r * c];
            kernels::transpose(g, c, r, &mut ga);
            vec![(*a, ga)]
        }
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let ga = g.iter().zip(bv).map(|(&g, &b)| g * b).collect();
            let gb = g.iter().zip(av).map(|(&g, &a)| g * a).collect();
            vec![(*a, ga), (*b, gb)]
        }
        Op::AddRow(x, b) => {
            let cols = val(*b).numel();
            let mut gb = vec![E::zero(); cols];
            for row in g.chunks(cols) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![(*x, g.to_vec()), (*b, gb)]
        }
        Op::MulRow(x, s) => {
            let sv = val(*s).data();
            let xv = val(*x).data();
            let cols = sv.len();
            let mut gx = vec![E::zero(); g.len()];
            let mut gs = vec![E::zero(); cols];
            for ((gr, xr), gxr) in g.chunks(cols).zip(xv.chunks(cols)).zip(gx.chunks_mut(cols)) {
                for c in 0..cols {
                    gxr[c] = gr[c] * sv[c];
                    gs[c] += gr[c] * xr[c];
                }
            }
            vec![(*x, gx), (*s, gs)]
        }
        Op::AddScalar(x, b) => vec![(*x, g.to_vec()), (*b, vec![g.iter().copied().sum()])],
        Op::Scale(x, s) => {
            let s = E::lit(*s);
            vec![(*x, g.iter().map(|&v| v * s).collect())]
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            vec![(*x, g.iter().zip(xv).map(|(&g, &x)| g * kernels::gelu_grad(x)).collect())]
        }
        Op::Silu(x) => {
            let xv = val(*x).data();
            vec![(*x, g.iter().zip(xv).map(|(&g, &x)| g * kernels::silu_grad(x)).collect())]
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let cols = node.value.cols();
            let mut gx = vec![E::zero(); g.len()];
            for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                let dotp: E = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for c in 0..cols {
                    out[c] = yr[c] * (gr[c] - dotp);
                }
            }
            vec![(*x, gx)]
        }
        Op::Normalize(x) => {
            let xhat = node.value.data();
            let cols = node.value.cols();
            let n = E::lit(cols as f64);
            let mut gx = vec![E::zero(); g.len()];
            for (r, ((gr, xr), out)) in g.chunks(cols).zip(xhat.chunks(cols)).zip(gx.chunks_mut(cols)).enumerate() {
                let mean_g = gr.iter().copied().sum::<E>() / n;
                let mean_gx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<E>() / n;
                let rstd = node.saved[r];
                for c in 0..cols {
                    out[c] = rstd * (gr[c] - mean_g - xr[c] * mean_gx);
                }
            }
            vec![(*x, gx)]
        }
        Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
        Op::Mean(x) => {
            let n = val(*x).numel();
            vec![(*x, vec![g[0] / E::lit(n as f64); n])]
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::SliceCols { x, start } => {
            let (rows, cols) = (val(*x).rows(), val(*x).cols());
            let w = node.value.cols();
            let mut gx = vec![E::zero(); rows * cols];
            for r in 0..rows {
                gx[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![(*x, gx)]
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut off = 0;
            let mut out = Vec::with_capacity(parts.len());
            for &p in parts {
                let w = val(p).cols();
                let mut gp = vec![E::zero(); rows * w];
                for r in 0..rows {
                    gp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                }
                off += w;
                out.push((p, gp));
            }
            out
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            let mut out = Vec::with_capacity(parts.len());
            for &p in parts {
                let n = val(p).numel();
                out.push((p, g[off..off + n].to_vec()));
                off += n;
            }
            out
        }
        Op::GatherRows { x, index } => {
            let cols = val(*x).cols();
            let mut gx = vec![E::zero(); val(*x).numel()];
            for (i, &src) in index.iter().enumerate() {
                for c in 0..cols {
                    gx[src * cols + c] += g[i * cols + c];
                }
            }
            vec![(*x, gx)]
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

impl<'g, E: Element> Var<'g, E> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<E> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape_of(self.id)
    }

    pub fn value(&self) -> Tensor<E> {
        self.graph.value(self.id)
    }

    pub fn item(&self) -> E {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    pub fn grad(&self) -> Option<Tensor<E>> {
        self.graph.grad(self.id)
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor<E>) -> Tensor<E>) -> Self {
        let value = f(&self.graph.nodes.borrow()[self.id].value);
        self.graph.record(value, op, Vec::new())
    }

    fn same_shape(self, other: Self, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(shape_err(op, &a, &b));
        }
        Ok(())
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        Ok(self.graph.record(value, Op::MatMul(self.id, other.id), Vec::new()))
    }

    /// `self · otherᵀ`, both 2-D with equal widths.
    pub fn matmul_nt(self, other: Self) -> Result<Self> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
                return Err(shape_err("matmul_nt", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
            let mut out = vec![E::zero(); m * n];
            kernels::matmul_nt(a.data(), b.data(), m, k, n, &mut out);
            Tensor::new([m, n], out)?
        };
        Ok(self.graph.record(value, Op::MatMulNt(self.id, other.id), Vec::new()))
    }

    pub fn transpose(self) -> Result<Self> {
        if self.shape().len() != 2 {
            return Err(shape_err("transpose", &self.shape(), &[]));
        }
        Ok(self.unary(Op::Transpose(self.id), |t| t.transpose2()))
    }

    fn zip(self, other: Self, op: Op, name: &'static str, f: impl Fn(E, E) -> E) -> Result<Self> {
        self.same_shape(other, name)?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            nodes[self.id].value.zip_map(&nodes[other.id].value, f)?
        };
        Ok(self.graph.record(value, op, Vec::new()))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.zip(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.zip(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.zip(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    fn row_broadcast(self, other: Self, op: Op, name: &'static str, f: impl Fn(E, E) -> E) -> Result<Self> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (x, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if b.numel() != x.cols() {
                return Err(shape_err(name, x.shape(), b.shape()));
            }
            let cols = x.cols();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(cols) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o = f(*o, bv);
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        Ok(self.graph.record(value, op, Vec::new()))
    }

    /// Adds a vector (length = last axis) to every row.
    pub fn add_row(self, bias: Self) -> Result<Self> {
        self.row_broadcast(bias, Op::AddRow(self.id, bias.id), "add_row", |a, b| a + b)
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(self, scale: Self) -> Result<Self> {
        self.row_broadcast(scale, Op::MulRow(self.id, scale.id), "mul_row", |a, b| a * b)
    }

    /// Adds a one-element tensor to every entry.
    pub fn add_scalar(self, b: Self) -> Result<Self> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let bv = &nodes[b.id].value;
            if bv.numel() != 1 {
                return Err(shape_err("add_scalar", nodes[self.id].value.shape(), bv.shape()));
            }
            let s = bv.item();
            nodes[self.id].value.map(|v| v + s)
        };
        Ok(self.graph.record(value, Op::AddScalar(self.id, b.id), Vec::new()))
    }

    pub fn scale(self, s: f64) -> Self {
        let se = E::lit(s);
        self.unary(Op::Scale(self.id, s), |t| t.map(|v| v * se))
    }

    pub fn gelu(self) -> Self {
        self.unary(Op::Gelu(self.id), |t| t.map(kernels::gelu))
    }

    pub fn silu(self) -> Self {
        self.unary(Op::Silu(self.id), |t| t.map(kernels::silu))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Self {
        self.unary(Op::Softmax(self.id), |t| {
            let mut out = vec![E::zero(); t.numel()];
            kernels::softmax_rows(t.data(), t.cols(), &mut out);
            Tensor::new(t.shape().to_vec(), out).expect("same shape")
        })
    }

    /// Per-row zero mean / unit variance, without affine parameters.
    pub fn normalize(self, eps: f64) -> Self {
        let (value, rstd) = {
            let nodes = self.graph.nodes.borrow();
            let t = &nodes[self.id].value;
            let mut out = vec![E::zero(); t.numel()];
            let rstd = kernels::normalize_rows(t.data(), t.cols(), E::lit(eps), &mut out);
            (Tensor::new(t.shape().to_vec(), out).expect("same shape"), rstd)
        };
        self.graph.record(value, Op::Normalize(self.id), rstd)
    }

    /// Layer normalization with gain and bias over the last axis.
    pub fn layer_norm(self, gain: Self, bias: Self, eps: f64) -> Result<Self> {
        self.normalize(eps).mul_row(gain)?.add_row(bias)
    }

    /// 1×1 convolution across the token axis: `out[d] = Σ_c w[c]·x[c,d] + b`
    /// for `x: [C, D]`, `w: [C]` and a one-element `b`. Returns `[D]`.
    pub fn conv1x1_over_channels(self, w: Self, b: Self) -> Result<Self> {
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 2 || ws.iter().product::<usize>() != xs[0] {
            return Err(shape_err("conv1x1_over_channels", &xs, &ws));
        }
        w.reshape([1, xs[0]])?.matmul(self)?.add_scalar(b)?.reshape([xs[1]])
    }

    pub fn sum(self) -> Self {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.sum()))
    }

    pub fn mean(self) -> Self {
        self.unary(Op::Mean(self.id), |t| Tensor::scalar(t.mean()))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let value = self.value().reshape(shape)?;
        Ok(self.graph.record(value, Op::Reshape(self.id), Vec::new()))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape();
        if shape.len() != 2 || start + len > shape[1] {
            return Err(shape_err("slice_cols", &shape, &[start, len]));
        }
        Ok(self.unary(Op::SliceCols { x: self.id, start }, |t| {
            let (rows, cols) = (t.rows(), t.cols());
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
            }
            Tensor::new([rows, len], out).expect("sliced shape")
        }))
    }

    /// Picks rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(self, index: &[usize]) -> Result<Self> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(shape_err("gather_rows", &shape, &[]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= shape[0]) {
            return Err(shape_err("gather_rows", &shape, &[bad]));
        }
        let index = index.to_vec();
        let cols = shape[1];
        Ok(self.unary(Op::GatherRows { x: self.id, index: index.clone() }, |t| {
            let mut out = Vec::with_capacity(index.len() * cols);
            for &i in &index {
                out.extend_from_slice(t.row(i));
            }
            Tensor::new([index.len(), cols], out).expect("gathered shape")
        }))
    }

    /// `[1×D]` or `[D]` repeated into `[n×D]`.
    pub fn repeat_rows(self, n: usize) -> Result<Self> {
        let d = *self.shape().last().unwrap_or(&1);
        self.reshape([1, d])?.gather_rows(&vec![0; n])
    }

    /// Same value, cut off from the gradient path.
    pub fn detach(self) -> Self {
        self.graph.constant(self.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sum_gives_ones_and_square_gives_two_x() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]));
        g.backward(x.sum()).unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&v| v == 1.0));

        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 3.0]));
        let loss = x.mul(x).unwrap().sum();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let loss = x.sum();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss), Err(TensorError::BackwardTwice));
        g.zero_grad();
        g.backward(loss).unwrap();
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn each_node_visited_once() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = x.mul(x).unwrap();
        let z = y.add(x).unwrap();
        let loss = z.sum();
        g.backward(loss).unwrap();
        // x, y, z, loss
        assert_eq!(g.last_backward_visits(), 4);
        assert_eq!(x.grad().unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let g = Graph::<f64>::inference();
        let s = g.constant(t(&[3], &[0.0, 0.0, 0.0])).softmax().value();
        assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let a = g.constant(t(&[4], &[0.3, -1.2, 2.0, 0.0])).softmax().value();
        let b = g.constant(t(&[4], &[100.3, 98.8, 102.0, 100.0])).softmax().value();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn softmax_matches_scalar_exponentials() {
        let g = Graph::<f64>::inference();
        let s = g.constant(t(&[3], &[1.0, 2.0, 3.0])).softmax().value();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (i, &v) in s.data().iter().enumerate() {
            let want = ((i + 1) as f64).exp() / z;
            assert!(((v - want) / want).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero() {
        let g = Graph::<f64>::inference();
        let x = g.constant(t(&[1, 4], &[2.5; 4]));
        let gain = g.constant(Tensor::full([4], 1.0));
        let bias = g.constant(Tensor::zeros([4]));
        let y = x.layer_norm(gain, bias, 1e-6).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gather_scatters_gradient_back() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = x.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(y.value().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        g.backward(y.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn inference_graph_matches_recording_graph_bitwise() {
        let run = |g: &Graph<f64>| {
            let a = g.leaf(t(&[2, 3], &[0.1, -0.4, 0.9, 1.3, 0.0, -2.2]));
            let b = g.leaf(t(&[3, 2], &[0.5, 0.2, -0.7, 1.1, 0.3, 0.8]));
            let y = a.matmul(b).unwrap().gelu().softmax().normalize(1e-6);
            y.value()
        };
        assert_eq!(run(&Graph::new()), run(&Graph::inference()));
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_values_are_reported() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 800.0]));
        let y = x.gelu().mul(x.silu()).unwrap();
        let loss = y.scale(1e308).sum();
        assert!(matches!(g.backward(loss), Err(TensorError::NonFinite(_))));
    }
}
