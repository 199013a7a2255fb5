//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass as an append-only
//! list of nodes; parents always precede children, so the backward pass is a
//! single reverse sweep applying each op's local derivative. One tape serves
//! one forward/backward cycle (`backward` is single-shot).
//!
//! Elementwise binary ops broadcast in two ways: the rhs may be a trailing
//! suffix of the lhs shape (leading-dimension broadcast, e.g. a bias row
//! added to a batch), or equal to the lhs shape with the last dimension 1
//! (column broadcast, e.g. a per-row scalar scaling a batch of states).
//! Any non-finite value produced in a forward op or a backward accumulation
//! aborts with the offending op named.

use crate::autodiff::params::ParamStore;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    /// rhs has one element.
    Scalar,
    /// rhs shape (after stripping leading 1s) is a suffix of lhs shape.
    Suffix { period: usize },
    /// rhs equals lhs except the last dimension is 1.
    LastOne { last: usize },
}

#[derive(Debug)]
enum Op {
    Input { requires_grad: bool },
    Param { slot: usize },
    Add(Value, Value, Broadcast),
    Sub(Value, Value, Broadcast),
    Mul(Value, Value, Broadcast),
    MatMul(Value, Value),
    /// a (m,k) x b^T with b (n,k) -> (m,n)
    MatMulNT(Value, Value),
    Relu(Value),
    Tanh(Value),
    Sigmoid(Value),
    Softplus(Value),
    Sin(Value),
    Cos(Value),
    Exp(Value),
    Square(Value),
    Sqrt(Value),
    Abs(Value),
    Neg(Value),
    /// k * x + b; only the slope k matters to the derivative.
    Affine(Value, f64),
    SumAll(Value),
    /// Reductions keep the reduced axis with size 1.
    SumAxis(Value, usize),
    MeanAxis(Value, usize),
    Softmax(Value, usize),
    /// Normalizes the last axis (no affine part); aux holds 1/std per row.
    LayerNorm(Value),
    Concat(Vec<Value>, usize),
    Slice(Value, usize, usize, usize),
    Reshape(Value),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Abs(_) => "abs",
            Op::Neg(_) => "neg",
            Op::Affine(..) => "affine",
            Op::SumAll(_) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    op: Op,
    out: Tensor,
    aux: Option<Tensor>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
    has_params: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    // ln(1 + e^x), stable in both tails
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Classifies how `rhs` broadcasts against `lhs` for elementwise ops.
fn broadcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    let rhs_numel: usize = rhs.iter().product();
    if rhs_numel == 1 {
        return Ok(Broadcast::Scalar);
    }
    // strip leading 1s from rhs, then require a suffix match
    let trimmed: Vec<usize> = rhs.iter().copied().skip_while(|&d| d == 1).collect();
    if !trimmed.is_empty()
        && lhs.len() >= trimmed.len()
        && lhs[lhs.len() - trimmed.len()..] == trimmed[..]
    {
        return Ok(Broadcast::Suffix {
            period: trimmed.iter().product(),
        });
    }
    if lhs.len() == rhs.len()
        && !lhs.is_empty()
        && rhs[rhs.len() - 1] == 1
        && lhs[..lhs.len() - 1] == rhs[..rhs.len() - 1]
    {
        return Ok(Broadcast::LastOne {
            last: lhs[lhs.len() - 1],
        });
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn rhs_index(bc: Broadcast, flat: usize) -> usize {
    match bc {
        Broadcast::Same => flat,
        Broadcast::Scalar => 0,
        Broadcast::Suffix { period } => flat % period,
        Broadcast::LastOne { last } => flat / last,
    }
}

fn axis_geometry(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// out[m,n] += a[m,k] * b[k,n]
fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
fn matmul_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// Zero-initializes the slot on first touch and returns its buffer.
fn grad_slot<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], v: Value) -> &'g mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(nodes[v.0].out.shape().to_vec()))
        .data_mut()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            has_params: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value of a node.
    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].out
    }

    /// The gradient of the backward root w.r.t. node `v`, if backward has
    /// run and the node participated in the computation.
    pub fn grad(&self, v: Value) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, out: Tensor, aux: Option<Tensor>) -> Result<Value> {
        if !out.is_finite() {
            return Err(Error::non_finite(op.name()));
        }
        self.nodes.push(Node { op, out, aux });
        Ok(Value(self.nodes.len() - 1))
    }

    /// Registers a leaf tensor. `requires_grad` leaves receive a gradient
    /// readable via [`Tape::grad`] after backward.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Result<Value> {
        self.push(Op::Input { requires_grad }, t, None)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Value> {
        self.input(t, false)
    }

    pub fn scalar(&mut self, x: f64) -> Result<Value> {
        self.constant(Tensor::scalar(x))
    }

    /// Registers a parameter leaf; trainable slots accumulate gradients into
    /// the store's buffer on backward, frozen slots enter as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Value> {
        let slot = store.slot(name)?;
        if !store.is_trainable(slot) {
            return self.constant(store.tensor_at(slot).clone());
        }
        self.has_params = true;
        self.push(Op::Param { slot }, store.tensor_at(slot).clone(), None)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Value,
        b: Value,
        make: impl Fn(Value, Value, Broadcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Value> {
        let bc = broadcast_kind(op_name, self.nodes[a.0].out.shape(), self.nodes[b.0].out.shape())?;
        let (la, lb) = (&self.nodes[a.0].out, &self.nodes[b.0].out);
        let (da, db) = (la.data(), lb.data());
        let mut data = Vec::with_capacity(la.numel());
        for (flat, &av) in da.iter().enumerate() {
            data.push(f(av, db[rhs_index(bc, flat)]));
        }
        let out = Tensor::new(la.shape().to_vec(), data)?;
        self.push(make(a, b, bc), out, None)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = self.nodes[a.0].out.dims2()?;
        let (k2, n) = self.nodes[b.0].out.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_acc(&mut data, self.nodes[a.0].out.data(), self.nodes[b.0].out.data(), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], data)?, None)
    }

    /// `a (m,k) . b^T` with `b (n,k)`.
    pub fn matmul_nt(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = self.nodes[a.0].out.dims2()?;
        let (n, k2) = self.nodes[b.0].out.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_nt_acc(&mut data, self.nodes[a.0].out.data(), self.nodes[b.0].out.data(), m, k, n);
        self.push(Op::MatMulNT(a, b), Tensor::new(vec![m, n], data)?, None)
    }

    fn unary(
        &mut self,
        a: Value,
        make: impl Fn(Value) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Value> {
        let src = &self.nodes[a.0].out;
        let data: Vec<f64> = src.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.push(make(a), out, None)
    }

    pub fn relu(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Sigmoid, sigmoid_scalar)
    }

    pub fn softplus(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Softplus, softplus_scalar)
    }

    pub fn sin(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Sin, f64::sin)
    }

    pub fn cos(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Cos, f64::cos)
    }

    pub fn exp(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn square(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn sqrt(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Sqrt, f64::sqrt)
    }

    pub fn abs(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Abs, f64::abs)
    }

    pub fn neg(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Neg, |x| -x)
    }

    /// `k * a + b` with scalar constants.
    pub fn affine(&mut self, a: Value, k: f64, b: f64) -> Result<Value> {
        self.unary(a, |v| Op::Affine(v, k), |x| k * x + b)
    }

    pub fn scale(&mut self, a: Value, k: f64) -> Result<Value> {
        self.affine(a, k, 0.0)
    }

    pub fn sum_all(&mut self, a: Value) -> Result<Value> {
        let s: f64 = self.nodes[a.0].out.data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s), None)
    }

    fn reduce_axis(&mut self, a: Value, axis: usize, mean: bool) -> Result<Value> {
        let op: &'static str = if mean { "mean_axis" } else { "sum_axis" };
        let (outer, len, inner) = axis_geometry(self.nodes[a.0].out.shape(), axis, op)?;
        let src = self.nodes[a.0].out.data();
        let mut shape = self.nodes[a.0].out.shape().to_vec();
        shape[axis] = 1;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let scale = 1.0 / len as f64;
            for v in &mut data {
                *v *= scale;
            }
        }
        let out = Tensor::new(shape, data)?;
        let node = if mean { Op::MeanAxis(a, axis) } else { Op::SumAxis(a, axis) };
        self.push(node, out, None)
    }

    /// Sum over one axis; the reduced axis is kept with size 1.
    pub fn sum_axis(&mut self, a: Value, axis: usize) -> Result<Value> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over one axis; the reduced axis is kept with size 1.
    pub fn mean_axis(&mut self, a: Value, axis: usize) -> Result<Value> {
        self.reduce_axis(a, axis, true)
    }

    pub fn softmax(&mut self, a: Value, axis: usize) -> Result<Value> {
        let (outer, len, inner) = axis_geometry(self.nodes[a.0].out.shape(), axis, "softmax")?;
        let src = self.nodes[a.0].out.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(src[idx(l)]);
                }
                let mut denom = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - mx).exp();
                    data[idx(l)] = e;
                    denom += e;
                }
                for l in 0..len {
                    data[idx(l)] /= denom;
                }
            }
        }
        let out = Tensor::new(self.nodes[a.0].out.shape().to_vec(), data)?;
        self.push(Op::Softmax(a, axis), out, None)
    }

    /// Normalizes the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Value, eps: f64) -> Result<Value> {
        let shape = self.nodes[a.0].out.shape().to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::invalid("layer_norm on rank-0 tensor"))?;
        let rows = self.nodes[a.0].out.numel() / last;
        let src = self.nodes[a.0].out.data();
        let mut data = vec![0.0; src.len()];
        let mut invstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * last..(r + 1) * last];
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / last as f64;
            let is = 1.0 / (var + eps).sqrt();
            invstd[r] = is;
            for (o, &x) in data[r * last..(r + 1) * last].iter_mut().zip(row.iter()) {
                *o = (x - mean) * is;
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push(Op::LayerNorm(a), out, Some(Tensor::vector(invstd)))
    }

    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first = self.nodes[parts[0].0].out.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!(
                "concat: axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.nodes[p.0].out.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first;
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let out_block = axis_total * inner;
        let mut offset = 0;
        for &p in parts {
            let s = self.nodes[p.0].out.shape();
            let block = s[axis] * inner;
            let src = self.nodes[p.0].out.data();
            for o in 0..outer {
                data[o * out_block + offset..o * out_block + offset + block]
                    .copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let out = Tensor::new(shape, data)?;
        self.push(Op::Concat(parts.to_vec(), axis), out, None)
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Value, axis: usize, start: usize, end: usize) -> Result<Value> {
        let (outer, len, inner) = axis_geometry(self.nodes[a.0].out.shape(), axis, "slice")?;
        if start >= end || end > len {
            return Err(Error::invalid(format!(
                "slice: range {start}..{end} invalid for axis of length {len}"
            )));
        }
        let mut shape = self.nodes[a.0].out.shape().to_vec();
        shape[axis] = end - start;
        let src = self.nodes[a.0].out.data();
        let block = (end - start) * inner;
        let mut data = vec![0.0; outer * block];
        for o in 0..outer {
            let src_base = (o * len + start) * inner;
            data[o * block..(o + 1) * block].copy_from_slice(&src[src_base..src_base + block]);
        }
        let out = Tensor::new(shape, data)?;
        self.push(Op::Slice(a, axis, start, end), out, None)
    }

    /// View under a new shape of equal numel.
    pub fn reshape(&mut self, a: Value, shape: Vec<usize>) -> Result<Value> {
        let out = self.nodes[a.0].out.reshaped(shape)?;
        self.push(Op::Reshape(a), out, None)
    }

    /// Reverse sweep from a scalar root. Gradients of `requires_grad` inputs
    /// become readable via [`Tape::grad`]; parameter gradients accumulate
    /// into `store`. Single-shot: the tape is consumed.
    pub fn backward(&mut self, root: Value, store: &mut ParamStore) -> Result<()> {
        self.backward_impl(root, Some(store))
    }

    /// Backward for tapes without parameter leaves.
    pub fn backward_free(&mut self, root: Value) -> Result<()> {
        self.backward_impl(root, None)
    }

    fn backward_impl(&mut self, root: Value, mut store: Option<&mut ParamStore>) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeMisuse("backward called twice on one tape"));
        }
        if self.has_params && store.is_none() {
            return Err(Error::TapeMisuse(
                "tape references parameters; use backward(root, store)",
            ));
        }
        if !self.nodes[root.0].out.is_scalar() {
            return Err(Error::TapeMisuse("backward root must be a scalar"));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(1.0));

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !g.is_finite() {
                return Err(Error::non_finite_at(nodes[id].op.name(), "backward gradient"));
            }
            propagate(nodes, grads, &mut store, id, &g)?;
            grads[id] = Some(g);
        }
        // Non-trainable leaves expose no gradient.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Input { requires_grad: false }) {
                self.grads[id] = None;
            }
        }
        Ok(())
    }
}

fn propagate(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    store: &mut Option<&mut ParamStore>,
    id: usize,
    g: &Tensor,
) -> Result<()> {
    let node = &nodes[id];
    let gd = g.data();
    let unary_grad = |grads: &mut [Option<Tensor>], a: Value, dfdx: &dyn Fn(f64, f64) -> f64| {
        let xs = nodes[a.0].out.data();
        let ys = node.out.data();
        let ga = grad_slot(grads, nodes, a);
        for i in 0..gd.len() {
            ga[i] += gd[i] * dfdx(xs[i], ys[i]);
        }
    };
    match &node.op {
        Op::Input { .. } => {}
        Op::Param { slot } => {
            if let Some(store) = store {
                store.accumulate(*slot, g)?;
            }
        }
        Op::Add(a, b, bc) => {
            for (ga, &gv) in grad_slot(grads, nodes, *a).iter_mut().zip(gd.iter()) {
                *ga += gv;
            }
            let gb = grad_slot(grads, nodes, *b);
            for (flat, &gv) in gd.iter().enumerate() {
                gb[rhs_index(*bc, flat)] += gv;
            }
        }
        Op::Sub(a, b, bc) => {
            for (ga, &gv) in grad_slot(grads, nodes, *a).iter_mut().zip(gd.iter()) {
                *ga += gv;
            }
            let gb = grad_slot(grads, nodes, *b);
            for (flat, &gv) in gd.iter().enumerate() {
                gb[rhs_index(*bc, flat)] -= gv;
            }
        }
        Op::Mul(a, b, bc) => {
            let ad = nodes[a.0].out.data();
            let bd = nodes[b.0].out.data();
            {
                let ga = grad_slot(grads, nodes, *a);
                for (flat, &gv) in gd.iter().enumerate() {
                    ga[flat] += gv * bd[rhs_index(*bc, flat)];
                }
            }
            let gb = grad_slot(grads, nodes, *b);
            for (flat, &gv) in gd.iter().enumerate() {
                gb[rhs_index(*bc, flat)] += gv * ad[flat];
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].out.dims2()?;
            let n = nodes[b.0].out.dims2()?.1;
            let ad = nodes[a.0].out.data();
            let bd = nodes[b.0].out.data();
            matmul_nt_acc(grad_slot(grads, nodes, *a), gd, bd, m, n, k);
            matmul_tn_acc(grad_slot(grads, nodes, *b), ad, gd, m, k, n);
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = nodes[a.0].out.dims2()?;
            let n = nodes[b.0].out.dims2()?.0;
            let ad = nodes[a.0].out.data();
            let bd = nodes[b.0].out.data();
            // C = A B^T: dA += G B ; dB += G^T A
            matmul_acc(grad_slot(grads, nodes, *a), gd, bd, m, n, k);
            matmul_tn_acc(grad_slot(grads, nodes, *b), gd, ad, m, n, k);
        }
        Op::Relu(a) => unary_grad(grads, *a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Tanh(a) => unary_grad(grads, *a, &|_, y| 1.0 - y * y),
        Op::Sigmoid(a) => unary_grad(grads, *a, &|_, y| y * (1.0 - y)),
        Op::Softplus(a) => unary_grad(grads, *a, &|x, _| sigmoid_scalar(x)),
        Op::Sin(a) => unary_grad(grads, *a, &|x, _| x.cos()),
        Op::Cos(a) => unary_grad(grads, *a, &|x, _| -x.sin()),
        Op::Exp(a) => unary_grad(grads, *a, &|_, y| y),
        Op::Square(a) => unary_grad(grads, *a, &|x, _| 2.0 * x),
        Op::Sqrt(a) => unary_grad(grads, *a, &|_, y| 0.5 / y),
        Op::Abs(a) => unary_grad(grads, *a, &|x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::Neg(a) => unary_grad(grads, *a, &|_, _| -1.0),
        Op::Affine(a, kf) => {
            let kf = *kf;
            unary_grad(grads, *a, &move |_, _| kf)
        }
        Op::SumAll(a) => {
            let gv = gd[0];
            for ga in grad_slot(grads, nodes, *a).iter_mut() {
                *ga += gv;
            }
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let mean = matches!(node.op, Op::MeanAxis(..));
            let (outer, len, inner) = axis_geometry(nodes[a.0].out.shape(), *axis, "reduce")?;
            let scale = if mean { 1.0 / len as f64 } else { 1.0 };
            let ga = grad_slot(grads, nodes, *a);
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        ga[base + i] += gd[o * inner + i] * scale;
                    }
                }
            }
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = axis_geometry(nodes[a.0].out.shape(), *axis, "softmax")?;
            let y = node.out.data();
            let ga = grad_slot(grads, nodes, *a);
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let mut dot = 0.0;
                    for l in 0..len {
                        dot += gd[idx(l)] * y[idx(l)];
                    }
                    for l in 0..len {
                        ga[idx(l)] += y[idx(l)] * (gd[idx(l)] - dot);
                    }
                }
            }
        }
        Op::LayerNorm(a) => {
            let y = node.out.data();
            let invstd = node.aux.as_ref().expect("layer_norm aux").data();
            let last = *node.out.shape().last().unwrap();
            let rows = y.len() / last;
            let ga = grad_slot(grads, nodes, *a);
            for r in 0..rows {
                let sl = r * last..(r + 1) * last;
                let (yr, gr) = (&y[sl.clone()], &gd[sl.clone()]);
                let gmean = gr.iter().sum::<f64>() / last as f64;
                let gymean =
                    gr.iter().zip(yr.iter()).map(|(g, y)| g * y).sum::<f64>() / last as f64;
                for ((ga, &g), &yv) in ga[sl].iter_mut().zip(gr.iter()).zip(yr.iter()) {
                    *ga += invstd[r] * (g - gmean - yv * gymean);
                }
            }
        }
        Op::Concat(parts, axis) => {
            let shape = node.out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let out_block = shape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let block = nodes[p.0].out.shape()[*axis] * inner;
                let gp = grad_slot(grads, nodes, *p);
                for o in 0..outer {
                    for (gpv, &gv) in gp[o * block..(o + 1) * block]
                        .iter_mut()
                        .zip(gd[o * out_block + offset..o * out_block + offset + block].iter())
                    {
                        *gpv += gv;
                    }
                }
                offset += block;
            }
        }
        Op::Slice(a, axis, start, end) => {
            let (outer, len, inner) = axis_geometry(nodes[a.0].out.shape(), *axis, "slice")?;
            let block = (end - start) * inner;
            let ga = grad_slot(grads, nodes, *a);
            for o in 0..outer {
                let dst_base = (o * len + start) * inner;
                for (gav, &gv) in ga[dst_base..dst_base + block]
                    .iter_mut()
                    .zip(gd[o * block..(o + 1) * block].iter())
                {
                    *gav += gv;
                }
            }
        }
        Op::Reshape(a) => {
            for (ga, &gv) in grad_slot(grads, nodes, *a).iter_mut().zip(gd.iter()) {
                *ga += gv;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn relu_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[-1.0, 0.0, 2.0]), false).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.scalar(0.0).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3.7, 3.7, 3.7]), false).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.input(t(&[1.0, 2.0]), true).unwrap();
        let sq = tape.square(w).unwrap();
        let root = tape.sum_all(sq).unwrap();
        tape.backward_free(root).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.0), true).unwrap();
        let y = tape.sigmoid(x).unwrap();
        tape.backward_free(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn backward_is_single_shot() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(1.5), true).unwrap();
        let y = tape.square(x).unwrap();
        tape.backward_free(y).unwrap();
        assert!(matches!(tape.backward_free(y), Err(Error::TapeMisuse(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1.0, 2.0]), true).unwrap();
        let y = tape.square(x).unwrap();
        assert!(matches!(tape.backward_free(y), Err(Error::TapeMisuse(_))));
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape
            .input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(), false)
            .unwrap();
        let b = tape
            .input(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap(), false)
            .unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn nan_forward_aborts_with_op_name() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(-1.0), false).unwrap();
        let err = tape.sqrt(x).unwrap_err();
        assert!(err.to_string().contains("sqrt"), "{err}");
    }

    #[test]
    fn suffix_broadcast_adds_bias_row() {
        let mut tape = Tape::new();
        let x = tape
            .input(
                Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
                true,
            )
            .unwrap();
        let b = tape.input(t(&[10.0, 20.0, 30.0]), true).unwrap();
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward_free(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn column_broadcast_scales_rows() {
        let mut tape = Tape::new();
        let x = tape
            .input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false)
            .unwrap();
        let c = tape
            .input(Tensor::matrix(2, 1, vec![10.0, 100.0]).unwrap(), true)
            .unwrap();
        let y = tape.mul(x, c).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 20.0, 300.0, 400.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward_free(s).unwrap();
        assert_eq!(tape.grad(c).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn concat_slice_roundtrip_gradient() {
        let mut tape = Tape::new();
        let a = tape
            .input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true)
            .unwrap();
        let b = tape
            .input(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap(), true)
            .unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let sl = tape.slice(c, 1, 2, 3).unwrap();
        let s = tape.sum_all(sl).unwrap();
        tape.backward_free(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(t(&[0.3, -0.7, 1.9]), true).unwrap();
            let h = tape.tanh(x).unwrap();
            let e = tape.exp(h).unwrap();
            let s = tape.sum_all(e).unwrap();
            tape.backward_free(s).unwrap();
            (
                tape.value(s).item().unwrap(),
                tape.grad(x).unwrap().data().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
    }
}
