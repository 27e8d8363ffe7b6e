use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
///
/// Handles are plain indices: they are only meaningful for the tape that
/// created them, and stay valid for that tape's lifetime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef(usize);

impl NodeRef {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Reduction extent for `sum`, `mean`, `max` and `logsumexp`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    All,
    Axis(usize),
}

/// Operation kinds understood by [`Tape::forward_op`], with their attributes.
#[derive(Clone, Debug)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    /// `[m,k]·[k,n]`.
    MatMul,
    /// `x·w + b` with `x: [m,k]`, `w: [k,n]`, `b: [n]`.
    Affine,
    Tanh,
    Exp,
    Log,
    Square,
    Sum(Reduce),
    Mean(Reduce),
    Max(Reduce),
    LogSumExp(Reduce),
    /// Log-softmax along an axis.
    SoftmaxLog(usize),
    /// Log-softmax along the last axis, then one entry per row.
    SoftmaxLogPick(Arc<[usize]>),
    /// One entry per row along the last axis.
    Pick(Arc<[usize]>),
    /// Row gather from a `[rows, width]` table.
    EmbeddingLookup(Arc<[usize]>),
    Concat(usize),
    Scale(f64),
    Negate,
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    Clamp {
        lo: f64,
        hi: f64,
    },
    StopGradient,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Affine => "affine",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Square => "square",
            OpKind::Sum(_) => "sum",
            OpKind::Mean(_) => "mean",
            OpKind::Max(_) => "max",
            OpKind::LogSumExp(_) => "logsumexp",
            OpKind::SoftmaxLog(_) => "softmax_log",
            OpKind::SoftmaxLogPick(_) => "softmax_log_pick",
            OpKind::Pick(_) => "pick",
            OpKind::EmbeddingLookup(_) => "embedding_lookup",
            OpKind::Concat(_) => "concat",
            OpKind::Scale(_) => "scale",
            OpKind::Negate => "negate",
            OpKind::Broadcast(_) => "broadcast",
            OpKind::Reshape(_) => "reshape",
            OpKind::Clamp { .. } => "clamp",
            OpKind::StopGradient => "stop_gradient",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => 2,
            OpKind::Affine => 3,
            OpKind::Concat(_) => usize::MAX,
            _ => 1,
        }
    }
}

struct Node {
    value: Tensor,
    kind: Option<OpKind>,
    parents: Vec<NodeRef>,
    requires_grad: bool,
    grad_blocked: bool,
    // Per-row log-normalisers kept by `SoftmaxLogPick` for its backward pass.
    aux: Option<Vec<f64>>,
}

/// Define-by-run record of operations for reverse-mode differentiation.
///
/// Build a fresh tape per minibatch; nodes are appended in evaluation order,
/// which is already a topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every `requires_grad` leaf.
///
/// Leaves the root does not depend on are present with zero gradients.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_leaf: HashMap<NodeRef, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeRef) -> Option<&Tensor> {
        self.by_leaf.get(&leaf)
    }

    /// Gradient of a leaf that is known to require one.
    pub fn wrt(&self, leaf: NodeRef) -> &Tensor {
        self.by_leaf
            .get(&leaf)
            .unwrap_or_else(|| panic!("node {} is not a differentiable leaf", leaf.0))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeRef {
        self.push(Node {
            value,
            kind: None,
            parents: Vec::new(),
            requires_grad,
            grad_blocked: false,
            aux: None,
        })
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeRef {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeRef {
        self.leaf(value, false)
    }

    pub fn value(&self, node: NodeRef) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn requires_grad(&self, node: NodeRef) -> bool {
        self.nodes[node.0].requires_grad
    }

    pub fn is_grad_blocked(&self, node: NodeRef) -> bool {
        self.nodes[node.0].grad_blocked
    }

    fn push(&mut self, node: Node) -> NodeRef {
        self.nodes.push(node);
        NodeRef(self.nodes.len() - 1)
    }

    /// Evaluates `kind` on `inputs` and records it for the backward pass.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[NodeRef]) -> Result<NodeRef> {
        let arity = kind.arity();
        if (arity == usize::MAX && inputs.is_empty()) || (arity != usize::MAX && inputs.len() != arity) {
            return Err(Error::shape(
                kind.name(),
                format!("expected {} inputs, got {}", arity, inputs.len()),
            ));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|n| &self.nodes[n.0].value).collect();
        let (value, aux) = forward(&kind, &values)?;
        let blocked = matches!(kind, OpKind::StopGradient);
        let requires_grad = !blocked && inputs.iter().any(|n| self.nodes[n.0].requires_grad);
        Ok(self.push(Node {
            value,
            kind: Some(kind),
            parents: inputs.to_vec(),
            requires_grad,
            grad_blocked: blocked,
            aux,
        }))
    }

    fn unary(&mut self, kind: OpKind, x: NodeRef) -> NodeRef {
        self.forward_op(kind, &[x]).expect("unary op cannot fail")
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::Div, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }

    pub fn affine(&mut self, x: NodeRef, w: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::Affine, &[x, w, b])
    }

    pub fn tanh(&mut self, x: NodeRef) -> NodeRef {
        self.unary(OpKind::Tanh, x)
    }

    pub fn exp(&mut self, x: NodeRef) -> NodeRef {
        self.unary(OpKind::Exp, x)
    }

    pub fn log(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::Log, &[x])
    }

    pub fn square(&mut self, x: NodeRef) -> NodeRef {
        self.unary(OpKind::Square, x)
    }

    pub fn sum(&mut self, x: NodeRef, over: Reduce) -> Result<NodeRef> {
        self.forward_op(OpKind::Sum(over), &[x])
    }

    pub fn mean(&mut self, x: NodeRef, over: Reduce) -> Result<NodeRef> {
        self.forward_op(OpKind::Mean(over), &[x])
    }

    pub fn max(&mut self, x: NodeRef, over: Reduce) -> Result<NodeRef> {
        self.forward_op(OpKind::Max(over), &[x])
    }

    pub fn logsumexp(&mut self, x: NodeRef, over: Reduce) -> Result<NodeRef> {
        self.forward_op(OpKind::LogSumExp(over), &[x])
    }

    pub fn softmax_log(&mut self, x: NodeRef, axis: usize) -> Result<NodeRef> {
        self.forward_op(OpKind::SoftmaxLog(axis), &[x])
    }

    /// `log_softmax(x)[r, index[r]]` along the last axis.
    pub fn softmax_log_pick(&mut self, x: NodeRef, index: Vec<usize>) -> Result<NodeRef> {
        self.forward_op(OpKind::SoftmaxLogPick(index.into()), &[x])
    }

    pub fn pick(&mut self, x: NodeRef, index: Vec<usize>) -> Result<NodeRef> {
        self.forward_op(OpKind::Pick(index.into()), &[x])
    }

    pub fn embedding_lookup(&mut self, table: NodeRef, index: Vec<usize>) -> Result<NodeRef> {
        self.forward_op(OpKind::EmbeddingLookup(index.into()), &[table])
    }

    pub fn concat(&mut self, parts: &[NodeRef], axis: usize) -> Result<NodeRef> {
        self.forward_op(OpKind::Concat(axis), parts)
    }

    pub fn scale(&mut self, x: NodeRef, factor: f64) -> NodeRef {
        self.unary(OpKind::Scale(factor), x)
    }

    pub fn negate(&mut self, x: NodeRef) -> NodeRef {
        self.unary(OpKind::Negate, x)
    }

    pub fn broadcast(&mut self, x: NodeRef, shape: Vec<usize>) -> Result<NodeRef> {
        self.forward_op(OpKind::Broadcast(shape), &[x])
    }

    pub fn reshape(&mut self, x: NodeRef, shape: Vec<usize>) -> Result<NodeRef> {
        self.forward_op(OpKind::Reshape(shape), &[x])
    }

    pub fn clamp(&mut self, x: NodeRef, lo: f64, hi: f64) -> NodeRef {
        self.unary(OpKind::Clamp { lo, hi }, x)
    }

    /// Identity in value; contributes nothing to any gradient.
    pub fn stop_gradient(&mut self, x: NodeRef) -> NodeRef {
        self.unary(OpKind::StopGradient, x)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: NodeRef) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        let mut by_leaf = HashMap::new();

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(kind) = &node.kind else {
                by_leaf.insert(NodeRef(id), Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            };
            let parents: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let wanted: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let contributions = backward_rule(kind, &parents, &node.value, node.aux.as_deref(), &g, &wanted);
            for ((parent, contribution), want) in node.parents.iter().zip(contributions).zip(wanted) {
                let Some(contribution) = contribution else { continue };
                if !want {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if node.kind.is_none() && node.requires_grad {
                by_leaf
                    .entry(NodeRef(id))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_leaf })
    }
}

// ---------------------------------------------------------------------------
// Shape helpers

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the right-aligned `out` shape, with zero
/// stride on broadcast dimensions.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        strides[d + off] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let nd = out.len();
    let mut idx = vec![0; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {} out of range for shape {:?}", axis, shape),
        ));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], over: Reduce) -> Vec<usize> {
    match over {
        Reduce::All => vec![],
        Reduce::Axis(a) => {
            let mut s = shape.to_vec();
            s.remove(a);
            s
        }
    }
}

/// (outer, len, inner) for a reduction; `All` is a single row.
fn reduce_split(shape: &[usize], over: Reduce) -> (usize, usize, usize) {
    match over {
        Reduce::All => (1, shape.iter().product(), 1),
        Reduce::Axis(a) => axis_split(shape, a),
    }
}

fn rows_of_last_axis(op: &'static str, shape: &[usize], index_len: usize) -> Result<(usize, usize)> {
    let Some(&width) = shape.last() else {
        return Err(Error::shape(op, "input must have at least one axis"));
    };
    let rows = if width == 0 {
        0
    } else {
        shape.iter().product::<usize>() / width
    };
    if rows != index_len {
        return Err(Error::shape(
            op,
            format!("{} indices for {} rows of shape {:?}", index_len, rows, shape),
        ));
    }
    Ok((rows, width))
}

fn binary_map(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shapes(a.shape(), b.shape())
        .ok_or_else(|| Error::shape(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))?;
    let sa = aligned_strides(a.shape(), &out);
    let sb = aligned_strides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    let (da, db) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
    Ok(Tensor::from_parts(out, data))
}

// ---------------------------------------------------------------------------
// Forward rules

fn forward(kind: &OpKind, x: &[&Tensor]) -> Result<(Tensor, Option<Vec<f64>>)> {
    let op = kind.name();
    let value = match kind {
        OpKind::Add => binary_map(op, x[0], x[1], |a, b| a + b)?,
        OpKind::Sub => binary_map(op, x[0], x[1], |a, b| a - b)?,
        OpKind::Mul => binary_map(op, x[0], x[1], |a, b| a * b)?,
        OpKind::Div => {
            if x[1].data().contains(&0.0) {
                return Err(Error::domain(op, "division by zero"));
            }
            binary_map(op, x[0], x[1], |a, b| a / b)?
        }
        OpKind::MatMul => {
            let (a, b) = (x[0], x[1]);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape(op, format!("{:?} · {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
            Tensor::from_parts(vec![m, n], c)
        }
        OpKind::Affine => {
            let (a, w, bias) = (x[0], x[1], x[2]);
            if a.ndim() != 2 || w.ndim() != 2 || a.shape()[1] != w.shape()[0] || bias.shape() != [w.shape()[1]] {
                return Err(Error::shape(
                    op,
                    format!("{:?} · {:?} + {:?}", a.shape(), w.shape(), bias.shape()),
                ));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], w.shape()[1]);
            let mut c = Vec::with_capacity(m * n);
            for _ in 0..m {
                c.extend_from_slice(bias.data());
            }
            gemm(m, k, n, a.data(), false, w.data(), false, &mut c, 1.0);
            Tensor::from_parts(vec![m, n], c)
        }
        OpKind::Tanh => x[0].map(f64::tanh),
        OpKind::Exp => x[0].map(f64::exp),
        OpKind::Log => {
            if let Some(bad) = x[0].data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::domain(op, format!("log of non-positive value {}", bad)));
            }
            x[0].map(f64::ln)
        }
        OpKind::Square => x[0].map(|v| v * v),
        OpKind::Sum(over) | OpKind::Mean(over) | OpKind::Max(over) | OpKind::LogSumExp(over) => {
            if let Reduce::Axis(a) = over {
                check_axis(op, x[0].shape(), *a)?;
            }
            let (outer, len, inner) = reduce_split(x[0].shape(), *over);
            if len == 0 && !matches!(kind, OpKind::Sum(_)) {
                return Err(Error::shape(op, "reduction over an empty axis"));
            }
            let d = x[0].data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| d[(o * len + j) * inner + i];
                    out[o * inner + i] = match kind {
                        OpKind::Sum(_) => (0..len).map(at).sum(),
                        OpKind::Mean(_) => (0..len).map(at).sum::<f64>() / len as f64,
                        OpKind::Max(_) => (0..len).map(at).fold(f64::NEG_INFINITY, f64::max),
                        _ => {
                            let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                            if m == f64::NEG_INFINITY {
                                m
                            } else {
                                m + (0..len).map(|j| (at(j) - m).exp()).sum::<f64>().ln()
                            }
                        }
                    };
                }
            }
            Tensor::from_parts(reduced_shape(x[0].shape(), *over), out)
        }
        OpKind::SoftmaxLog(axis) => {
            check_axis(op, x[0].shape(), *axis)?;
            let (outer, len, inner) = axis_split(x[0].shape(), *axis);
            let d = x[0].data();
            let mut out = vec![0.0; d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let m = (0..len).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + (0..len).map(|j| (d[idx(j)] - m).exp()).sum::<f64>().ln();
                    for j in 0..len {
                        out[idx(j)] = d[idx(j)] - lse;
                    }
                }
            }
            Tensor::from_parts(x[0].shape().to_vec(), out)
        }
        OpKind::SoftmaxLogPick(index) => {
            let (rows, width) = rows_of_last_axis(op, x[0].shape(), index.len())?;
            let d = x[0].data();
            let mut out = vec![0.0; rows];
            let mut lses = vec![0.0; rows];
            for r in 0..rows {
                let row = &d[r * width..(r + 1) * width];
                let pick = index[r];
                if pick >= width {
                    return Err(Error::IndexOutOfRange {
                        what: "softmax_log_pick",
                        index: pick,
                        size: width,
                    });
                }
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                lses[r] = lse;
                out[r] = row[pick] - lse;
            }
            let shape = x[0].shape()[..x[0].ndim() - 1].to_vec();
            return Ok((Tensor::from_parts(shape, out), Some(lses)));
        }
        OpKind::Pick(index) => {
            let (rows, width) = rows_of_last_axis(op, x[0].shape(), index.len())?;
            let d = x[0].data();
            let mut out = Vec::with_capacity(rows);
            for (r, &pick) in index.iter().enumerate() {
                if pick >= width {
                    return Err(Error::IndexOutOfRange {
                        what: "pick",
                        index: pick,
                        size: width,
                    });
                }
                out.push(d[r * width + pick]);
            }
            Tensor::from_parts(x[0].shape()[..x[0].ndim() - 1].to_vec(), out)
        }
        OpKind::EmbeddingLookup(index) => {
            let table = x[0];
            if table.ndim() != 2 {
                return Err(Error::shape(op, format!("table must be 2-d, got {:?}", table.shape())));
            }
            let (rows, width) = (table.shape()[0], table.shape()[1]);
            let mut out = Vec::with_capacity(index.len() * width);
            for &i in index.iter() {
                if i >= rows {
                    return Err(Error::IndexOutOfRange {
                        what: "embedding table",
                        index: i,
                        size: rows,
                    });
                }
                out.extend_from_slice(&table.data()[i * width..(i + 1) * width]);
            }
            Tensor::from_parts(vec![index.len(), width], out)
        }
        OpKind::Concat(axis) => {
            let first = x[0].shape();
            check_axis(op, first, *axis)?;
            let mut total = 0;
            for t in x {
                let s = t.shape();
                let compatible =
                    s.len() == first.len() && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == *axis || a == b);
                if !compatible {
                    return Err(Error::shape(op, format!("{:?} vs {:?} on axis {}", s, first, axis)));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = axis_split(first, *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in x {
                    let len = t.shape()[*axis];
                    out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Tensor::from_parts(shape, out)
        }
        OpKind::Scale(c) => x[0].map(|v| v * c),
        OpKind::Negate => x[0].map(|v| -v),
        OpKind::Broadcast(shape) => {
            match broadcast_shapes(x[0].shape(), shape) {
                Some(out) if out == *shape => {}
                _ => {
                    return Err(Error::shape(
                        op,
                        format!("cannot broadcast {:?} to {:?}", x[0].shape(), shape),
                    ));
                }
            }
            let sa = aligned_strides(x[0].shape(), shape);
            let zero = vec![0; shape.len()];
            let mut out = vec![0.0; shape.iter().product()];
            let d = x[0].data();
            for_each_broadcast(shape, &sa, &zero, |o, ia, _| out[o] = d[ia]);
            Tensor::from_parts(shape.clone(), out)
        }
        OpKind::Reshape(shape) => x[0].reshape(shape.clone())?,
        OpKind::Clamp { lo, hi } => x[0].map(|v| v.clamp(*lo, *hi)),
        OpKind::StopGradient => x[0].clone(),
    };
    Ok((value, None))
}

// ---------------------------------------------------------------------------
// Backward rules

/// Sums a gradient of shape `out` back onto an operand of shape `shape`.
fn unbroadcast(g: &[f64], out: &[usize], shape: &[usize], scale: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut acc = vec![0.0; shape.iter().product()];
    let sa = aligned_strides(shape, out);
    let zero = vec![0; out.len()];
    for_each_broadcast(out, &sa, &zero, |o, ia, _| acc[ia] += g[o] * scale(o, ia));
    acc
}

fn binary_backward(
    a: &Tensor,
    b: &Tensor,
    out: &Tensor,
    g: &[f64],
    wanted: &[bool],
    da: impl Fn(f64, f64) -> f64,
    db: impl Fn(f64, f64) -> f64,
) -> Vec<Option<Vec<f64>>> {
    let (xa, xb) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let ga = wanted[0].then(|| {
            g.iter()
                .zip(xa.iter().zip(xb))
                .map(|(g, (&p, &q))| g * da(p, q))
                .collect()
        });
        let gb = wanted[1].then(|| {
            g.iter()
                .zip(xa.iter().zip(xb))
                .map(|(g, (&p, &q))| g * db(p, q))
                .collect()
        });
        return vec![ga, gb];
    }
    let shape = out.shape();
    let sa = aligned_strides(a.shape(), shape);
    let sb = aligned_strides(b.shape(), shape);
    let mut ga = wanted[0].then(|| vec![0.0; a.numel()]);
    let mut gb = wanted[1].then(|| vec![0.0; b.numel()]);
    for_each_broadcast(shape, &sa, &sb, |o, ia, ib| {
        if let Some(ga) = ga.as_mut() {
            ga[ia] += g[o] * da(xa[ia], xb[ib]);
        }
        if let Some(gb) = gb.as_mut() {
            gb[ib] += g[o] * db(xa[ia], xb[ib]);
        }
    });
    vec![ga, gb]
}

fn backward_rule(
    kind: &OpKind,
    x: &[&Tensor],
    y: &Tensor,
    aux: Option<&[f64]>,
    g: &[f64],
    wanted: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().enumerate().map(|(i, gi)| gi * f(i)).collect())]
    };
    match kind {
        OpKind::Add => binary_backward(x[0], x[1], y, g, wanted, |_, _| 1.0, |_, _| 1.0),
        OpKind::Sub => binary_backward(x[0], x[1], y, g, wanted, |_, _| 1.0, |_, _| -1.0),
        OpKind::Mul => binary_backward(x[0], x[1], y, g, wanted, |_, b| b, |a, _| a),
        OpKind::Div => binary_backward(x[0], x[1], y, g, wanted, |_, b| 1.0 / b, |a, b| -a / (b * b)),
        OpKind::MatMul | OpKind::Affine => {
            let (a, w) = (x[0], x[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], w.shape()[1]);
            let ga = wanted[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, w.data(), true, &mut ga, 0.0);
                ga
            });
            let gw = wanted[1].then(|| {
                let mut gw = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g, false, &mut gw, 0.0);
                gw
            });
            let mut out = vec![ga, gw];
            if matches!(kind, OpKind::Affine) {
                out.push(wanted[2].then(|| {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks_exact(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(b, r)| *b += r);
                    }
                    gb
                }));
            }
            out
        }
        OpKind::Tanh => {
            let yd = y.data();
            elementwise(&|i| 1.0 - yd[i] * yd[i])
        }
        OpKind::Exp => {
            let yd = y.data();
            elementwise(&|i| yd[i])
        }
        OpKind::Log => {
            let xd = x[0].data();
            elementwise(&|i| 1.0 / xd[i])
        }
        OpKind::Square => {
            let xd = x[0].data();
            elementwise(&|i| 2.0 * xd[i])
        }
        OpKind::Scale(c) => elementwise(&|_| *c),
        OpKind::Negate => elementwise(&|_| -1.0),
        OpKind::Clamp { lo, hi } => {
            let xd = x[0].data();
            elementwise(&|i| if xd[i] >= *lo && xd[i] <= *hi { 1.0 } else { 0.0 })
        }
        OpKind::Sum(over) | OpKind::Mean(over) | OpKind::Max(over) | OpKind::LogSumExp(over) => {
            let (outer, len, inner) = reduce_split(x[0].shape(), *over);
            let (xd, yd) = (x[0].data(), y.data());
            let mut gx = vec![0.0; xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    let idx = |j: usize| (o * len + j) * inner + i;
                    match kind {
                        OpKind::Sum(_) => (0..len).for_each(|j| gx[idx(j)] = g[r]),
                        OpKind::Mean(_) => (0..len).for_each(|j| gx[idx(j)] = g[r] / len as f64),
                        OpKind::Max(_) => {
                            // First maximiser takes the whole gradient.
                            if let Some(j) = (0..len).find(|&j| xd[idx(j)] == yd[r]) {
                                gx[idx(j)] = g[r];
                            }
                        }
                        _ => {
                            if yd[r] > f64::NEG_INFINITY {
                                (0..len).for_each(|j| gx[idx(j)] = g[r] * (xd[idx(j)] - yd[r]).exp());
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }
        OpKind::SoftmaxLog(axis) => {
            let (outer, len, inner) = axis_split(x[0].shape(), *axis);
            let yd = y.data();
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let total: f64 = (0..len).map(|j| g[idx(j)]).sum();
                    for j in 0..len {
                        gx[idx(j)] = g[idx(j)] - yd[idx(j)].exp() * total;
                    }
                }
            }
            vec![Some(gx)]
        }
        OpKind::SoftmaxLogPick(index) => {
            let lses = aux.expect("softmax_log_pick keeps its normalisers");
            let xd = x[0].data();
            let width = *x[0].shape().last().unwrap_or(&0);
            let mut gx = vec![0.0; xd.len()];
            for (r, (&pick, &lse)) in index.iter().zip(lses).enumerate() {
                let gr = g[r];
                let row = &xd[r * width..(r + 1) * width];
                let out = &mut gx[r * width..(r + 1) * width];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = -gr * (v - lse).exp();
                }
                out[pick] += gr;
            }
            vec![Some(gx)]
        }
        OpKind::Pick(index) => {
            let width = *x[0].shape().last().unwrap_or(&0);
            let mut gx = vec![0.0; x[0].numel()];
            for (r, &pick) in index.iter().enumerate() {
                gx[r * width + pick] += g[r];
            }
            vec![Some(gx)]
        }
        OpKind::EmbeddingLookup(index) => {
            let width = x[0].shape()[1];
            let mut gx = vec![0.0; x[0].numel()];
            for (r, &i) in index.iter().enumerate() {
                let dst = &mut gx[i * width..(i + 1) * width];
                dst.iter_mut()
                    .zip(&g[r * width..(r + 1) * width])
                    .for_each(|(d, s)| *d += s);
            }
            vec![Some(gx)]
        }
        OpKind::Concat(axis) => {
            let (outer, total, inner) = axis_split(y.shape(), *axis);
            let mut parts: Vec<Vec<f64>> = x.iter().map(|t| Vec::with_capacity(t.numel())).collect();
            for o in 0..outer {
                let mut offset = 0;
                for (t, part) in x.iter().zip(parts.iter_mut()) {
                    let len = t.shape()[*axis];
                    let start = (o * total + offset) * inner;
                    part.extend_from_slice(&g[start..start + len * inner]);
                    offset += len;
                }
            }
            parts.into_iter().zip(wanted).map(|(p, &w)| w.then_some(p)).collect()
        }
        OpKind::Broadcast(shape) => vec![Some(unbroadcast(g, shape, x[0].shape(), |_, _| 1.0))],
        OpKind::Reshape(_) => vec![Some(g.to_vec())],
        OpKind::StopGradient => vec![None],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn logsumexp_small_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.logsumexp(x, Reduce::All).unwrap();
        assert!(close(t.value(y).item(), 2f64.ln(), 1e-15));

        let x = t.constant(Tensor::vector(vec![2f64.ln(), 4f64.ln()]));
        let y = t.logsumexp(x, Reduce::All).unwrap();
        assert!(close(t.value(y).item(), 6f64.ln(), 1e-15));
    }

    #[test]
    fn logsumexp_is_overflow_safe() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = t.logsumexp(x, Reduce::All).unwrap();
        assert_eq!(t.value(y).item(), 1000.0 + 2f64.ln());
    }

    #[test]
    fn logsumexp_of_all_negative_infinity_is_negative_infinity() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![f64::NEG_INFINITY; 3]));
        let y = t.logsumexp(x, Reduce::All).unwrap();
        assert_eq!(t.value(y).item(), f64::NEG_INFINITY);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = t.square(x);
        let y = t.sum(sq, Reduce::All).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.0, 0.0]));
        let y = t.logsumexp(x, Reduce::All).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.5, 0.5]);
    }

    #[test]
    fn stop_gradient_blocks_one_factor() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let frozen = t.stop_gradient(x);
        assert!(t.is_grad_blocked(frozen));
        assert!(!t.requires_grad(frozen));
        let y = t.mul(frozen, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 3.0);

        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.stop_gradient(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 0.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let a = t.mul(x, x).unwrap();
        let b = t.add(a, x).unwrap();
        let g = t.backward(b).unwrap();
        assert_eq!(g.wrt(x).item(), 5.0);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = t.param(Tensor::zeros(&[2, 2]));
        let y = t.sum(x, Reduce::All).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = t.constant(Tensor::zeros(&[4]));
        assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain { .. })));
        let one = t.constant(Tensor::vector(vec![1.0, 1.0]));
        assert!(matches!(t.div(one, x), Err(Error::Domain { .. })));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let b = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.mul(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let y = t.sum(s, Reduce::All).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(b).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(a).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_and_split_back() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = t.param(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = t.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = t.mul(c, w).unwrap();
        let y = t.sum(p, Reduce::All).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0, 4.0]);
        assert_eq!(g.wrt(b).data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn pick_index_out_of_range() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.pick(x, vec![0, 3]), Err(Error::IndexOutOfRange { .. })));
        assert!(t.pick(x, vec![0]).is_err());
    }
}
