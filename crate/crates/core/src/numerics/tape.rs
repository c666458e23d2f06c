//! Dynamic reverse-mode differentiation tape.
//!
//! Every forward operation appends a node holding its value and, while
//! recording, the operation that produced it. `backward` walks the nodes in
//! reverse and accumulates vector-Jacobian products. A non-recording tape
//! keeps values only, which is what evaluation and the finite-difference
//! oracle use.

use std::collections::BTreeMap;

use super::{kernels, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Mul,
    Sub,
    Div,
    Square,
    Sigmoid,
    Exp,
    Relu,
    Tanh,
}

impl ElemOp {
    pub fn is_binary(self) -> bool {
        matches!(self, ElemOp::Add | ElemOp::Mul | ElemOp::Sub | ElemOp::Div)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    L2Norm,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(ElemOp, Var, Var),
    Unary(ElemOp, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    Reduce {
        op: ReduceOp,
        input: Var,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    Rows {
        input: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SoftmaxRows(Var),
    Conv3x3 {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    Stack(Vec<Var>),
    Linearized {
        input: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward evaluation context.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    bound: BTreeMap<String, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records operations for `backward`.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            bound: BTreeMap::new(),
        }
    }

    /// A tape that only computes values.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
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

    /// Drops every node created after `len`. Parameter bindings that point
    /// past the cut are forgotten as well.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.bound.retain(|_, v| v.0 < len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Adds a leaf; it takes part in differentiation iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = self.recording && value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Binds the named parameter to a leaf, reusing an earlier binding of
    /// the same stored tensor.
    pub fn param(&mut self, params: &ParamStore, name: &str) -> Result<Var> {
        let value = params.get(name)?;
        if let Some(&v) = self.bound.get(name) {
            if v.0 < self.nodes.len() && self.nodes[v.0].value.shares_storage(value) {
                return Ok(v);
            }
        }
        let v = self.leaf(value.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ── forward operations ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, s) = self.value(a).dims2()?;
        let (s2, c) = self.value(b).dims2()?;
        if s != s2 {
            return Err(Error::dim(format!(
                "matmul of {:?} by {:?}: inner dimensions differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), r, s, c);
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Pointwise operation. Binary forms accept equal shapes, or a rank-2
    /// `a` with a vector `b` whose length equals `a`'s row width.
    pub fn elementwise(&mut self, op: ElemOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => Ok(self.unary(op, a)),
            (true, None) => Err(Error::Contract(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(Error::Contract(format!("{op:?} takes one operand"))),
        }
    }

    fn binary(&mut self, op: ElemOp, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let width = broadcast_width(av.shape(), bv.shape())?;
        let f: fn(f64, f64) -> f64 = match op {
            ElemOp::Add => |x, y| x + y,
            ElemOp::Sub => |x, y| x - y,
            ElemOp::Mul => |x, y| x * y,
            ElemOp::Div => |x, y| x / y,
            _ => unreachable!(),
        };
        let bd = bv.data();
        let out: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % width]))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Binary(op, a, b), &[a, b]))
    }

    fn unary(&mut self, op: ElemOp, a: Var) -> Var {
        let t = self.value(a).map(match op {
            ElemOp::Square => |x: f64| x * x,
            ElemOp::Sigmoid => kernels::sigmoid,
            ElemOp::Exp => f64::exp,
            ElemOp::Relu => |x: f64| x.max(0.0),
            ElemOp::Tanh => f64::tanh,
            _ => unreachable!(),
        });
        self.push(t, Op::Unary(op, a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Div, a, b)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(ElemOp::Square, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(ElemOp::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(ElemOp::Exp, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(ElemOp::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(ElemOp::Tanh, a)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| c * x);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Adds a constant tensor of the same shape; no gradient flows into it.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != c.shape() {
            return Err(Error::dim(format!(
                "add_const of {:?} and {:?}",
                av.shape(),
                c.shape()
            )));
        }
        let out = av.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddConst(a), &[a]))
    }

    /// `1 - a`, pointwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0);
        let ones = Tensor::ones_like(self.value(a));
        self.add_const(neg, &ones)
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let t = self.value(a).map(|x| x * sv);
        Ok(self.push(t, Op::MulScalar(a, s), &[a, s]))
    }

    /// Reduction over `axis`, or over every entry when `axis` is `None`.
    /// Reducing a matrix over axis 0 yields a vector of column results.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let av = self.value(a);
        let (outer, len, inner, out_shape) = reduce_layout(av.shape(), axis)?;
        let data = av.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let lane = (0..len).map(|k| data[(o * len + k) * inner + i]);
                let v = match op {
                    ReduceOp::Sum => lane.sum(),
                    ReduceOp::Mean => lane.sum::<f64>() / len as f64,
                    ReduceOp::L2Norm => lane.map(|x| x * x).sum::<f64>().sqrt(),
                    ReduceOp::Max => {
                        let (k, m) = lane.enumerate().fold((0, f64::NEG_INFINITY), |best, (k, x)| {
                            if x > best.1 {
                                (k, x)
                            } else {
                                best
                            }
                        });
                        argmax.push(k);
                        m
                    }
                };
                out.push(v);
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::Reduce {
                op,
                input: a,
                axis,
                argmax,
            },
            &[a],
        ))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    pub fn l2norm(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::L2Norm, a, axis)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        let t = Tensor::matrix(c, r, out)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?.with_requires_grad(false);
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::dim(format!(
                "rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let out = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, out)?;
        Ok(self.push(t, Op::Rows { input: a, start }, &[a]))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let r = self.rows(a, i, 1)?;
        let c = self.shape(r)[1];
        self.reshape(r, vec![c])
    }

    /// Stacks matrices (or vectors, as single rows) with equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let width = *self.shape(*first).last().unwrap_or(&1);
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() == 0 || *v.shape().last().unwrap() != width {
                return Err(Error::dim(format!(
                    "concat_rows: part of shape {:?} does not have width {width}",
                    v.shape()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / width;
        let t = Tensor::matrix(rows, width, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Input(format!("row id {bad} out of range for {r} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(ids.len(), c, out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Softmax along each row, computed with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(t, Op::SoftmaxRows(a), &[a]))
    }

    /// Softmax down each column.
    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.transpose(a)?;
        let s = self.softmax_rows(t)?;
        self.transpose(s)
    }

    /// Single-channel 3×3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d_3x3(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (h, w) = self.value(input).dims2()?;
        if self.shape(kernel) != [3, 3] {
            return Err(Error::dim(format!(
                "conv kernel must be 3x3, got {:?}",
                self.shape(kernel)
            )));
        }
        let b = self.value(bias).item()?;
        let out = kernels::conv3x3(self.value(input).data(), h, w, self.value(kernel).data(), b);
        let t = Tensor::matrix(h, w, out)?;
        Ok(self.push(
            t,
            Op::Conv3x3 {
                input,
                kernel,
                bias,
            },
            &[input, kernel, bias],
        ))
    }

    /// Packs one-element tensors into a tensor of the given shape.
    pub fn stack(&mut self, scalars: &[Var], shape: Vec<usize>) -> Result<Var> {
        let data = scalars
            .iter()
            .map(|&s| self.value(s).item())
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Stack(scalars.to_vec()), scalars))
    }

    /// Records a scalar function of `input` whose value and (sub)gradient
    /// were computed outside the tape.
    pub(crate) fn linearized(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::dim("linearized gradient does not match input"));
        }
        Ok(self.push(Tensor::scalar(value), Op::Linearized { input, grad }, &[input]))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Gradients of the scalar `loss` for every node reachable from it.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.recording {
            return Err(Error::Contract("backward on a non-recording tape".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Reverse-mode gradients of `loss` for every entry of `params`.
    /// Parameters not bound on this tape, or not on the loss path, get zeros.
    pub fn backward(&self, loss: Var, params: &ParamStore) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.gradients(loss)?;
        let mut out = BTreeMap::new();
        for (name, value) in params.iter() {
            let g = self
                .bound
                .get(name)
                .and_then(|v| grads.get(v.0).cloned().flatten());
            let t = match g {
                Some(g) => Tensor::new(value.shape().to_vec(), g)?,
                None => Tensor::zeros_like(value),
            };
            out.insert(name.to_string(), t);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, s) = self.nodes[a.0].value.dims2().unwrap();
                let c = self.nodes[b.0].value.dims2().unwrap().1;
                let bt = kernels::transpose(val(*b), s, c);
                acc(*a, kernels::matmul(g, &bt, r, c, s));
                let at = kernels::transpose(val(*a), r, s);
                acc(*b, kernels::matmul(&at, g, s, r, c));
            }
            Op::Binary(op, a, b) => {
                let av = val(*a);
                let bv = val(*b);
                let width = bv.len();
                let bi = |i: usize| bv[i % width];
                let (ga, gb_full): (Vec<f64>, Vec<f64>) = match op {
                    ElemOp::Add => (g.to_vec(), g.to_vec()),
                    ElemOp::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                    ElemOp::Mul => (
                        g.iter().enumerate().map(|(i, gi)| gi * bi(i)).collect(),
                        g.iter().zip(av).map(|(gi, ai)| gi * ai).collect(),
                    ),
                    ElemOp::Div => (
                        g.iter().enumerate().map(|(i, gi)| gi / bi(i)).collect(),
                        g.iter()
                            .enumerate()
                            .map(|(i, gi)| -gi * av[i] / (bi(i) * bi(i)))
                            .collect(),
                    ),
                    _ => unreachable!(),
                };
                acc(*a, ga);
                let mut gb = vec![0.0; width];
                for (i, x) in gb_full.into_iter().enumerate() {
                    gb[i % width] += x;
                }
                acc(*b, gb);
            }
            Op::Unary(op, a) => {
                let x = val(*a);
                let d: Vec<f64> = match op {
                    ElemOp::Square => g.iter().zip(x).map(|(gi, xi)| 2.0 * xi * gi).collect(),
                    ElemOp::Sigmoid => g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect(),
                    ElemOp::Exp => g.iter().zip(y).map(|(gi, yi)| gi * yi).collect(),
                    ElemOp::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                    ElemOp::Tanh => g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect(),
                    _ => unreachable!(),
                };
                acc(*a, d);
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|gi| c * gi).collect()),
            Op::AddConst(a) => acc(*a, g.to_vec()),
            Op::MulScalar(a, s) => {
                let sv = val(*s)[0];
                acc(*a, g.iter().map(|gi| gi * sv).collect());
                let gs = g.iter().zip(val(*a)).map(|(gi, ai)| gi * ai).sum();
                acc(*s, vec![gs]);
            }
            Op::Reduce {
                op,
                input,
                axis,
                argmax,
            } => {
                let x = val(*input);
                let (outer, len, inner, _) =
                    reduce_layout(self.nodes[input.0].value.shape(), *axis).unwrap();
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let out_idx = o * inner + i;
                        let go = g[out_idx];
                        let at = |k: usize| (o * len + k) * inner + i;
                        match op {
                            ReduceOp::Sum => (0..len).for_each(|k| gx[at(k)] = go),
                            ReduceOp::Mean => (0..len).for_each(|k| gx[at(k)] = go / len as f64),
                            ReduceOp::L2Norm => {
                                let norm = y[out_idx];
                                if norm > 0.0 {
                                    (0..len).for_each(|k| gx[at(k)] = go * x[at(k)] / norm);
                                }
                            }
                            ReduceOp::Max => gx[at(argmax[out_idx])] = go,
                        }
                    }
                }
                acc(*input, gx);
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.dims2().unwrap();
                acc(*a, kernels::transpose(g, c, r));
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Rows { input, start } => {
                let x = &self.nodes[input.0].value;
                let c = x.dims2().unwrap().1;
                let mut gx = vec![0.0; x.numel()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*input, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    acc(*p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::GatherRows { table, ids } => {
                let t = &self.nodes[table.0].value;
                let c = t.dims2().unwrap().1;
                let mut gt = vec![0.0; t.numel()];
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[i * c + j] += g[k * c + j];
                    }
                }
                acc(*table, gt);
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.dims2().unwrap().1;
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        out[k] = yr[k] * (gr[k] - dot);
                    }
                }
                acc(*a, gx);
            }
            Op::Conv3x3 {
                input,
                kernel,
                bias,
            } => {
                let (h, w) = node.value.dims2().unwrap();
                let (gi, gk, gb) = kernels::conv3x3_backward(val(*input), h, w, val(*kernel), g);
                acc(*input, gi);
                acc(*kernel, gk);
                acc(*bias, vec![gb]);
            }
            Op::Stack(parts) => {
                for (p, gi) in parts.iter().zip(g) {
                    acc(*p, vec![*gi]);
                }
            }
            Op::Linearized { input, grad } => {
                acc(*input, grad.iter().map(|d| d * g[0]).collect());
            }
        }
    }
}

/// Width of the repeating operand: the full size for equal shapes, or the
/// row width when `b` is a vector broadcast over `a`'s rows.
fn broadcast_width(a: &[usize], b: &[usize]) -> Result<usize> {
    if a == b {
        return Ok(b.iter().product());
    }
    match (a, b) {
        (&[_, c], &[cb]) if c == cb => Ok(c),
        _ => Err(Error::dim(format!(
            "shapes {a:?} and {b:?} are not equal and not a row-wise vector broadcast"
        ))),
    }
}

/// `(outer, reduced length, inner, output shape)` for a reduction.
fn reduce_layout(shape: &[usize], axis: Option<usize>) -> Result<(usize, usize, usize, Vec<usize>)> {
    let numel: usize = shape.iter().product();
    match (axis, shape) {
        (None, _) => Ok((1, numel, 1, Vec::new())),
        (Some(0), &[n]) => Ok((1, n, 1, Vec::new())),
        (Some(0), &[r, c]) => Ok((1, r, c, vec![c])),
        (Some(1), &[r, c]) => Ok((r, c, 1, vec![r])),
        (Some(ax), _) => Err(Error::dim(format!(
            "axis {ax} is invalid for shape {shape:?}"
        ))),
    }
}
