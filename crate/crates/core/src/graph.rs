//! Tape-based reverse-mode automatic differentiation over whole-tensor ops.
//!
//! A [`Graph`] records every operation in execution order. Parameters are
//! pulled in from a borrowed [`ParamStore`] as shared leaves, so a parameter
//! used twice (e.g. weights shared by two branches) accumulates both
//! contributions. [`Graph::backward`] consumes the tape.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flops::{BlockKind, OpCounter};
use crate::kernels::{self, gemm, MatmulDims};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Elementwise activation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::invalid("activation", format!("unknown kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Abs,
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul {
        a: NodeId,
        b: NodeId,
        dims: MatmulDims,
        trans_b: bool,
        alpha: f64,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Binary(Binary, NodeId, NodeId),
    AddBcast {
        x: NodeId,
        b: NodeId,
    },
    Scale(NodeId, f64),
    Shift(NodeId),
    Unary(Unary, NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(NodeId),
    Permute {
        x: NodeId,
        view: Vec<usize>,
        axes: Vec<usize>,
    },
    GatherRows {
        x: NodeId,
        idx: Arc<[usize]>,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    BceLogits {
        z: NodeId,
        target: Vec<f64>,
        pos_weight: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. See the module docs.
pub struct Graph<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParamStore>,
    param_nodes: HashMap<ParamId, NodeId>,
    counter: OpCounter,
    scope: Option<BlockKind>,
    record: bool,
    non_finite: Option<&'static str>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// A graph without parameters, for computations over explicit inputs.
    pub fn new() -> Self {
        Self::build(None, true)
    }
}

impl<'s> Graph<'s> {
    pub fn with_params(store: &'s ParamStore) -> Self {
        Self::build(Some(store), true)
    }

    /// Forward-only graph: values are computed but no backward information kept.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self::build(Some(store), false)
    }

    fn build(store: Option<&'s ParamStore>, record: bool) -> Self {
        Self {
            nodes: Vec::new(),
            store,
            param_nodes: HashMap::new(),
            counter: OpCounter::default(),
            scope: None,
            record,
            non_finite: None,
        }
    }

    pub fn records_gradients(&self) -> bool {
        self.record
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first operation whose output held a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    /// Attributes subsequent matrix products to `kind`; returns the previous scope.
    pub fn set_scope(&mut self, kind: Option<BlockKind>) -> Option<BlockKind> {
        std::mem::replace(&mut self.scope, kind)
    }

    pub fn scoped<T>(&mut self, kind: BlockKind, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.set_scope(Some(kind));
        let out = f(self);
        self.set_scope(prev);
        out
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> NodeId {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name);
        }
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Leaf holding a constant or an input whose gradient may be queried.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        let t = if t.grad().is_some() { t.share() } else { t };
        self.nodes.push(Node { value: t, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.input(t)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let store = self.store.expect("graph was created without a parameter store");
        let value = store.tensor(id).share();
        self.nodes.push(Node { value, op: Op::Param });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    // ---- products -------------------------------------------------------

    /// Matrix product of rank-2/rank-3 operands (rank-2 operands broadcast over the batch).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let dims = kernels::matmul_dims(self.shape(a), self.shape(b))?;
        let batched = self.shape(a).len() == 3 || self.shape(b).len() == 3;
        self.product(a, b, dims, false, 1.0, dims.out_shape(batched))
    }

    /// Batched `alpha * a . b^T` with `a: (B, m, k)` and `b: (B, n, k)`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId, alpha: f64) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::shape("matmul_nt", &sa, &sb));
        }
        let dims = MatmulDims {
            batch: sa[0],
            m: sa[1],
            k: sa[2],
            n: sb[1],
            a_shared: false,
            b_shared: false,
        };
        self.product(a, b, dims, true, alpha, vec![sa[0], sa[1], sb[1]])
    }

    fn product(
        &mut self,
        a: NodeId,
        b: NodeId,
        dims: MatmulDims,
        trans_b: bool,
        alpha: f64,
        out_shape: Vec<usize>,
    ) -> Result<NodeId> {
        let MatmulDims { batch, m, k, n, .. } = dims;
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for bi in 0..batch {
                let ao = if dims.a_shared { 0 } else { bi * m * k };
                let bo = if dims.b_shared { 0 } else { bi * k * n };
                gemm(
                    m,
                    k,
                    n,
                    alpha,
                    &ad[ao..ao + m * k],
                    false,
                    &bd[bo..bo + k * n],
                    trans_b,
                    0.0,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        self.counter.record(self.scope, dims.macs());
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul {
                a,
                b,
                dims,
                trans_b,
                alpha,
            },
            "matmul",
        ))
    }

    /// `x . w + b` over the last axis of `x`; `w` is `(in, out)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let inp = *xs.last().expect("tensors have rank >= 1");
        if ws.len() != 2 || ws[0] != inp {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let outp = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [outp] {
                return Err(Error::shape("linear bias", &ws, self.shape(b)));
            }
        }
        let rows = numel(&xs) / inp;
        let mut out = vec![0.0; rows * outp];
        gemm(
            rows,
            inp,
            outp,
            1.0,
            self.data(x),
            false,
            self.data(w),
            false,
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_exact_mut(outp) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        self.counter.record(self.scope, (rows * inp * outp) as u64);
        let mut shape = xs;
        *shape.last_mut().unwrap() = outp;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, "linear"))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("elementwise", self.shape(a), self.shape(b)));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
            Binary::Max => f64::max,
            Binary::Min => f64::min,
        };
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("elementwise"));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Binary(kind, a, b), "binary"))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b)
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Max, a, b)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Min, a, b)
    }

    /// Adds `b` to every trailing block of `x` whose shape equals `b`'s shape.
    pub fn add_broadcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != bs[..] {
            return Err(Error::shape("add_broadcast", &xs, &bs));
        }
        let bd = self.data(b);
        let mut out = self.data(x).to_vec();
        for chunk in out.chunks_exact_mut(bd.len()) {
            for (o, v) in chunk.iter_mut().zip(bd) {
                *o += v;
            }
        }
        Ok(self.push(Tensor::from_parts(xs, out), Op::AddBcast { x, b }, "add_broadcast"))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, c), "scale")
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.data(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Shift(x), "add_scalar")
    }

    fn unary(&mut self, kind: Unary, x: NodeId) -> NodeId {
        let f: fn(f64) -> f64 = match kind {
            Unary::Abs => f64::abs,
            Unary::Relu => |v| v.max(0.0),
            Unary::Gelu => kernels::gelu,
            Unary::Sigmoid => kernels::sigmoid,
        };
        let out: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Unary(kind, x), "unary")
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Abs, x)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Relu, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Gelu => self.gelu(x),
        }
    }

    // ---- normalization --------------------------------------------------

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let out = kernels::softmax(self.data(x), &shape, axis);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, "softmax"))
    }

    /// Normalizes each row over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().unwrap();
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (y, xhat, inv_std) = kernels::layer_norm(self.data(x), dim, self.data(gamma), self.data(beta), eps);
        let op = if self.record {
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(Tensor::from_parts(shape, y), op, "layer_norm"))
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), "reshape"))
    }

    /// Views `x` with shape `view` (same element count), then permutes axes.
    pub fn permute_view(&mut self, x: NodeId, view: &[usize], axes: &[usize]) -> Result<NodeId> {
        if numel(view) != self.value(x).len() {
            return Err(Error::shape("permute", self.shape(x), view));
        }
        let mut seen = vec![false; view.len()];
        if axes.len() != view.len()
            || axes
                .iter()
                .any(|&a| a >= view.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("{axes:?} is not a permutation of {} axes", view.len()),
            ));
        }
        let (shape, out) = kernels::permute(self.data(x), view, axes);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Permute {
                x,
                view: view.to_vec(),
                axes: axes.to_vec(),
            },
            "permute",
        ))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let view = self.shape(x).to_vec();
        self.permute_view(x, &view, axes)
    }

    /// Rows of `x` (first axis) selected by `idx`, repeats allowed.
    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<[usize]>) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let width = self.value(x).len() / rows;
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut oshape = shape;
        oshape[0] = idx.len();
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::GatherRows { x, idx },
            "gather_rows",
        ))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same_rest =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.data(x)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { xs: xs.to_vec(), axis },
            "concat",
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("{start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = end - start;
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Slice { x, axis, start }, "slice"))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Mean over the first axis, keeping it with length one.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        let width = self.value(x).len() / rows;
        let mut out = vec![0.0; width];
        for r in self.data(x).chunks_exact(width) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let mut oshape = shape;
        oshape[0] = 1;
        self.push(Tensor::from_parts(oshape, out), Op::MeanRows(x), "mean_rows")
    }

    /// Mean binary cross-entropy of logits `z` against 0/1 `target`;
    /// positive terms are weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, z: NodeId, target: &[f64], pos_weight: f64) -> Result<NodeId> {
        let zd = self.data(z);
        if zd.len() != target.len() {
            return Err(Error::shape("bce_with_logits", self.shape(z), &[target.len()]));
        }
        let n = zd.len() as f64;
        let loss = zd
            .iter()
            .zip(target)
            .map(|(&z, &t)| pos_weight * t * kernels::softplus(-z) + (1.0 - t) * kernels::softplus(z))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                z,
                target: target.to_vec(),
                pos_weight,
            },
            "bce_with_logits",
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`; consumes the tape.
    pub fn backward(self, loss: NodeId) -> Result<Gradients> {
        if !self.record {
            return Err(Error::invalid("backward", "graph was built in inference mode"));
        }
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {ls:?}"),
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(dy);
                }
                Op::MatMul {
                    a,
                    b,
                    dims,
                    trans_b,
                    alpha,
                } => {
                    let (ga, gb) = matmul_backward(self.data(*a), self.data(*b), &dy, *dims, *trans_b, *alpha);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Linear { x, w, b } => {
                    let ws = self.shape(*w);
                    let (inp, outp) = (ws[0], ws[1]);
                    let rows = dy.len() / outp;
                    let mut dx = vec![0.0; rows * inp];
                    gemm(rows, outp, inp, 1.0, &dy, false, self.data(*w), true, 0.0, &mut dx);
                    let mut dw = vec![0.0; inp * outp];
                    gemm(inp, rows, outp, 1.0, self.data(*x), true, &dy, false, 0.0, &mut dw);
                    if let Some(b) = b {
                        let mut db = vec![0.0; outp];
                        for row in dy.chunks_exact(outp) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(&mut grads, *b, db);
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                }
                Op::Binary(kind, a, b) => {
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    let mut da = vec![0.0; dy.len()];
                    let mut db = vec![0.0; dy.len()];
                    for j in 0..dy.len() {
                        let (x, y, g) = (ad[j], bd[j], dy[j]);
                        let (ga, gb) = match kind {
                            Binary::Add => (g, g),
                            Binary::Sub => (g, -g),
                            Binary::Mul => (g * y, g * x),
                            Binary::Div => (g / y, -g * x / (y * y)),
                            Binary::Max => {
                                if x >= y {
                                    (g, 0.0)
                                } else {
                                    (0.0, g)
                                }
                            }
                            Binary::Min => {
                                if x <= y {
                                    (g, 0.0)
                                } else {
                                    (0.0, g)
                                }
                            }
                        };
                        da[j] = ga;
                        db[j] = gb;
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddBcast { x, b } => {
                    let blen = self.value(*b).len();
                    let mut db = vec![0.0; blen];
                    for chunk in dy.chunks_exact(blen) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *x, dy);
                }
                Op::Scale(x, c) => {
                    let dx = dy.iter().map(|g| g * c).collect();
                    acc(&mut grads, *x, dx);
                }
                Op::Shift(x) => acc(&mut grads, *x, dy),
                Op::Unary(kind, x) => {
                    let xd = self.data(*x);
                    let yd = node.value.data();
                    let dx = (0..dy.len())
                        .map(|j| {
                            let d = match kind {
                                Unary::Abs => {
                                    if xd[j] > 0.0 {
                                        1.0
                                    } else if xd[j] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Relu => {
                                    if xd[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Gelu => kernels::gelu_grad(xd[j]),
                                Unary::Sigmoid => yd[j] * (1.0 - yd[j]),
                            };
                            d * dy[j]
                        })
                        .collect();
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax { x, axis } => {
                    let dx = kernels::softmax_backward(node.value.data(), &dy, node.value.shape(), *axis);
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let dim = self.value(*gamma).len();
                    let g = kernels::layer_norm_backward(&dy, xhat, inv_std, self.data(*gamma), dim);
                    acc(&mut grads, *x, g.dx);
                    acc(&mut grads, *gamma, g.dgamma);
                    acc(&mut grads, *beta, g.dbeta);
                }
                Op::Reshape(x) => acc(&mut grads, *x, dy),
                Op::Permute { x, view, axes } => {
                    let out_shape: Vec<usize> = axes.iter().map(|&a| view[a]).collect();
                    let (_, dx) = kernels::permute(&dy, &out_shape, &kernels::inverse_axes(axes));
                    acc(&mut grads, *x, dx);
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let width = xv.len() / xv.shape()[0];
                    let mut dx = vec![0.0; xv.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        let d = &mut dx[src * width..(src + 1) * width];
                        for (a, b) in d.iter_mut().zip(&dy[r * width..(r + 1) * width]) {
                            *a += b;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = kernels::axis_split(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &x in xs {
                        let len = self.shape(x)[*axis];
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            dx.extend_from_slice(&dy[base..base + len * inner]);
                        }
                        offset += len;
                        acc(&mut grads, x, dx);
                    }
                }
                Op::Slice { x, axis, start } => {
                    let xs = self.shape(*x);
                    let (outer, len, inner) = kernels::axis_split(xs, *axis);
                    let width = node.value.shape()[*axis];
                    let mut dx = vec![0.0; numel(xs)];
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        dx[dst..dst + width * inner].copy_from_slice(&dy[o * width * inner..(o + 1) * width * inner]);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    acc(&mut grads, *x, vec![dy[0]; len]);
                }
                Op::Mean(x) => {
                    let len = self.value(*x).len();
                    acc(&mut grads, *x, vec![dy[0] / len as f64; len]);
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let rows = xv.shape()[0];
                    let mut dx = Vec::with_capacity(xv.len());
                    for _ in 0..rows {
                        dx.extend(dy.iter().map(|g| g / rows as f64));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::BceLogits { z, target, pos_weight } => {
                    let zd = self.data(*z);
                    let n = zd.len() as f64;
                    let dz = zd
                        .iter()
                        .zip(target)
                        .map(|(&z, &t)| {
                            let s = kernels::sigmoid(z);
                            dy[0] * (pos_weight * t * (s - 1.0) + (1.0 - t) * s) / n
                        })
                        .collect();
                    acc(&mut grads, *z, dz);
                }
            }
        }
        let params = self.param_nodes.iter().map(|(&p, &n)| (p, n)).collect();
        Ok(Gradients { grads, params })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn matmul_backward(a: &[f64], b: &[f64], dy: &[f64], d: MatmulDims, trans_b: bool, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let MatmulDims { batch, m, k, n, .. } = d;
    let mut da = vec![0.0; if d.a_shared { m * k } else { batch * m * k }];
    let mut db = vec![0.0; if d.b_shared { k * n } else { batch * k * n }];
    for bi in 0..batch {
        let ao = if d.a_shared { 0 } else { bi * m * k };
        let bo = if d.b_shared { 0 } else { bi * k * n };
        let dyb = &dy[bi * m * n..(bi + 1) * m * n];
        let beta_a = if d.a_shared && bi > 0 { 1.0 } else { 0.0 };
        let beta_b = if d.b_shared && bi > 0 { 1.0 } else { 0.0 };
        let (ab, bb) = (&a[ao..ao + m * k], &b[bo..bo + k * n]);
        if trans_b {
            // y = alpha a b^T, b: (n, k)
            gemm(m, n, k, alpha, dyb, false, bb, false, beta_a, &mut da[ao..ao + m * k]);
            gemm(n, m, k, alpha, dyb, true, ab, false, beta_b, &mut db[bo..bo + k * n]);
        } else {
            gemm(m, n, k, alpha, dyb, false, bb, true, beta_a, &mut da[ao..ao + m * k]);
            gemm(k, m, n, alpha, ab, true, dyb, false, beta_b, &mut db[bo..bo + k * n]);
        }
    }
    (da, db)
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient with respect to a leaf node (zeros are reported as `None`).
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.node(*n))
    }

    /// Adds every parameter gradient into the matching stored tensor's `grad`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, nid) in &self.params {
            if let Some(g) = self.node(nid) {
                let dst = store.get_mut(pid).tensor.grad_mut();
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.node(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unrelated_input_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let p = g.input(t(&[2], &[3.0, 4.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.node(p).is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let x = g.input(t(&[1], &[1.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_param_accumulates_both_uses() {
        let mut store = ParamStore::new();
        let w = store.insert("w", t(&[1], &[3.0])).unwrap();
        let mut g = Graph::with_params(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        grads.accumulate_into(&mut store);
        assert_eq!(store.tensor(w).grad().unwrap(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn activation_parses_known_kinds() {
        assert_eq!("relu".parse::<Activation>().unwrap(), Activation::Relu);
        assert_eq!("gelu".parse::<Activation>().unwrap(), Activation::Gelu);
        assert!("swish".parse::<Activation>().is_err());
    }

    #[test]
    fn counter_attributes_macs_to_scope() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3, 4]));
        g.scoped(BlockKind::Head, |g| g.matmul(a, b)).unwrap();
        g.matmul(a, b).unwrap();
        assert_eq!(g.counter().macs(BlockKind::Head), 24);
        assert_eq!(g.counter().unscoped_macs(), 24);
    }
}
