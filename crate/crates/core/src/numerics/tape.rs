//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node to the tape. Node ids grow monotonically and an
//! op only ever consumes earlier nodes, so walking ids from the loss down to
//! zero is a reverse topological order and each node is visited once.

use std::cell::{Ref, RefCell};

use super::kernels::{self, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{NumericsError, Scalar, Tensor};

/// Additive pre-softmax penalty for masked attention scores.
pub const MASK_PENALTY: f64 = -1e9;

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Sigmoid(usize),
    Gelu(usize),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<T>,
        count: usize,
    },
    Sum(usize),
    MaskMul {
        x: usize,
        mask: Vec<T>,
    },
}

#[derive(Debug, Clone, Copy)]
struct AttnGeom {
    batch: usize,
    q_len: usize,
    k_len: usize,
    heads: usize,
    width: usize,
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph.
///
/// Single-threaded by construction (`RefCell`); build one tape per thread.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`, or `None` when the loss
    /// does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[var.id].clone(), g.clone()))
    }

    /// Borrowed gradient buffer.
    pub fn get_slice(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id)?.as_deref()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Differentiable leaf regardless of the tensor's flag.
    pub fn param(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(tensor.clone(), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(tensor.clone(), Op::Leaf, false)
    }

    fn push(&self, mut value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        value.set_requires_grad(needs_grad);
        let mut nodes = self.nodes.borrow_mut();
        let op = if needs_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_checked(
        &self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var<'_, T>> {
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: name, index });
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn check_same_tape(&self, other: Var<'_, T>) {
        assert!(
            std::ptr::eq(self, other.tape),
            "vars from different tapes cannot be combined"
        );
    }

    /// Reverse pass from a scalar loss. Gradients for leaves (and every
    /// intermediate) are returned; nothing is written back into tensors.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check_same_tape(loss);
        let nodes = self.nodes.borrow();
        let numel = nodes[loss.id].value.numel();
        if numel != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let n = loss.id + 1;
        let mut pending: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut done: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        pending[loss.id] = Some(vec![T::one()]);

        for id in (0..n).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.needs_grad {
                backprop_node(&nodes, node, &g, &mut pending);
            }
            done[id] = Some(g);
        }
        Ok(Gradients {
            grads: done,
            shapes: nodes[..n]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }
}

fn acc<T: Scalar>(pending: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    pending[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    pending: &mut [Option<Vec<T>>],
) {
    let val = |id: usize| &nodes[id].value;
    let wants = |id: usize| nodes[id].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).shape()[1];
            if wants(*a) {
                let da = acc(pending, *a, m * k);
                matmul_nt_acc(g, val(*b).data(), da, m, n, k);
            }
            if wants(*b) {
                let db = acc(pending, *b, k * n);
                matmul_tn_acc(val(*a).data(), g, db, m, k, n);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if wants(*a) {
                for (d, &gv) in acc(pending, *a, g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if wants(*b) {
                for (d, &gv) in acc(pending, *b, g.len()).iter_mut().zip(g) {
                    *d += sign * gv;
                }
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let bv = val(*b).data();
                for ((d, &gv), &y) in acc(pending, *a, g.len()).iter_mut().zip(g).zip(bv) {
                    *d += gv * y;
                }
            }
            if wants(*b) {
                let av = val(*a).data();
                for ((d, &gv), &x) in acc(pending, *b, g.len()).iter_mut().zip(g).zip(av) {
                    *d += gv * x;
                }
            }
        }
        Op::AddRow(x, bias) => {
            if wants(*x) {
                for (d, &gv) in acc(pending, *x, g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if wants(*bias) {
                let n = val(*bias).numel();
                let db = acc(pending, *bias, n);
                for row in g.chunks(n) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            }
        }
        Op::Scale(x, s) => {
            for (d, &gv) in acc(pending, *x, g.len()).iter_mut().zip(g) {
                *d += gv * *s;
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            for ((d, &gv), &yv) in acc(pending, *x, g.len()).iter_mut().zip(g).zip(y) {
                *d += gv * yv * (T::one() - yv);
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            for ((d, &gv), &xi) in acc(pending, *x, g.len()).iter_mut().zip(g).zip(xv) {
                *d += gv * kernels::gelu_grad(xi);
            }
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = node.value.data();
            let dx = acc(pending, *x, g.len());
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let s: T = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..*len {
                        dx[at(j)] += y[at(j)] * (g[at(j)] - s);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = val(*gain).numel();
            let gv = val(*gain).data();
            if wants(*x) {
                let nf = T::cast(n as f64);
                let dx = acc(pending, *x, g.len());
                for (r, (gr, xr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..n {
                        let dxh = gr[j] * gv[j];
                        mean_d += dxh;
                        mean_dx += dxh * xr[j];
                    }
                    mean_d = mean_d / nf;
                    mean_dx = mean_dx / nf;
                    for j in 0..n {
                        let dxh = gr[j] * gv[j];
                        dx[r * n + j] += rstd[r] * (dxh - mean_d - xr[j] * mean_dx);
                    }
                }
            }
            if wants(*gain) {
                let dg = acc(pending, *gain, n);
                for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        dg[j] += gr[j] * xr[j];
                    }
                }
            }
            if wants(*bias) {
                let db = acc(pending, *bias, n);
                for gr in g.chunks(n) {
                    for j in 0..n {
                        db[j] += gr[j];
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            let t = val(*table);
            let width = t.shape()[1];
            let dt = acc(pending, *table, t.numel());
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..width {
                    dt[id * width + j] += g[r * width + j];
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            geom,
            probs,
        } => attention_backward(nodes, *q, *k, *v, *geom, probs, g, pending),
        Op::CrossEntropy {
            logits,
            targets,
            ignore_index,
            probs,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let vocab = val(*logits).shape()[1];
            let scale = g[0] / T::cast(*count as f64);
            let dl = acc(pending, *logits, probs.len());
            for (r, &t) in targets.iter().enumerate() {
                if t == *ignore_index {
                    continue;
                }
                for j in 0..vocab {
                    let onehot = if j == t { T::one() } else { T::zero() };
                    dl[r * vocab + j] += scale * (probs[r * vocab + j] - onehot);
                }
            }
        }
        Op::Sum(x) => {
            let len = val(*x).numel();
            for d in acc(pending, *x, len).iter_mut() {
                *d += g[0];
            }
        }
        Op::MaskMul { x, mask } => {
            for ((d, &gv), &m) in acc(pending, *x, g.len()).iter_mut().zip(g).zip(mask) {
                *d += gv * m;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    q: usize,
    k: usize,
    v: usize,
    geom: AttnGeom,
    probs: &[T],
    g: &[T],
    pending: &mut [Option<Vec<T>>],
) {
    let AttnGeom {
        batch,
        q_len,
        k_len,
        heads,
        width,
    } = geom;
    let dk = width / heads;
    let scale = T::cast(1.0 / (dk as f64).sqrt());
    let qv = nodes[q].value.data();
    let kv = nodes[k].value.data();
    let vv = nodes[v].value.data();
    let mut dq = vec![T::zero(); qv.len()];
    let mut dkm = vec![T::zero(); kv.len()];
    let mut dv = vec![T::zero(); vv.len()];
    let mut dp = vec![T::zero(); k_len];
    for b in 0..batch {
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..q_len {
                let qrow = (b * q_len + i) * width;
                let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                let go = &g[qrow + cols.start..qrow + cols.end];
                for j in 0..k_len {
                    let krow = (b * k_len + j) * width;
                    dp[j] = dot(go, &vv[krow + cols.start..krow + cols.end]);
                    if p[j] != T::zero() {
                        for (d, &gv) in dv[krow + cols.start..krow + cols.end].iter_mut().zip(go) {
                            *d += p[j] * gv;
                        }
                    }
                }
                let s: T = (0..k_len).map(|j| p[j] * dp[j]).sum();
                for j in 0..k_len {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - s) * scale;
                    let krow = (b * k_len + j) * width;
                    for c in cols.clone() {
                        dq[qrow + c] += ds * kv[krow + c];
                        dkm[krow + c] += ds * qv[qrow + c];
                    }
                }
            }
        }
    }
    for (id, grad) in [(q, dq), (k, dkm), (v, dv)] {
        if nodes[id].needs_grad {
            for (d, gv) in acc(pending, id, grad.len()).iter_mut().zip(grad) {
                *d += gv;
            }
        }
    }
}

// Fallible elementwise ops; std::ops can't return Result.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_shape(&self, other: Var<'t, T>, op: &'static str) -> Result<()> {
        self.tape.check_same_tape(other);
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(NumericsError::ShapeMismatch { op, lhs: a, rhs: b });
        }
        Ok(())
    }

    fn unary(self, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        let out = {
            let x = self.value();
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push_checked(name, out, op, needs)
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_shape(other, name)?;
        let out = {
            let (a, b) = (self.value(), other.value());
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push_checked(name, out, op, needs)
    }

    /// Matrix product `[m×k] · [k×n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check_same_tape(other);
        let out = {
            let (a, b) = (self.value(), other.value());
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 {
                return Err(NumericsError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = vec![T::zero(); m * n];
            matmul_acc(a.data(), b.data(), &mut data, m, k, n);
            Tensor::from_parts(vec![m, n], data)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape
            .push_checked("matmul", out, Op::MatMul(self.id, other.id), needs)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a `[n]` vector to every row of a `[m×n]` matrix.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check_same_tape(bias);
        let out = {
            let (x, b) = (self.value(), bias.value());
            let (_, n) = x.dims2()?;
            if b.shape() != [n] {
                return Err(NumericsError::ShapeMismatch {
                    op: "add_row",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        let needs = self.tape.needs(&[self.id, bias.id]);
        self.tape
            .push_checked("add_row", out, Op::AddRow(self.id, bias.id), needs)
    }

    /// `x · w + b` for `x[m×k]`, `w[k×n]`, `b[n]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(weight)?.add_row(bias)
    }

    pub fn scale(self, s: T) -> Result<Var<'t, T>> {
        self.unary("scale", |v| v * s, Op::Scale(self.id, s))
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", kernels::sigmoid, Op::Sigmoid(self.id))
    }

    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.unary("gelu", kernels::gelu, Op::Gelu(self.id))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let out = Tensor::scalar(self.value().data().iter().copied().sum());
        let needs = self.tape.needs(&[self.id]);
        self.tape.push_checked("sum", out, Op::Sum(self.id), needs)
    }

    /// Multiplies by a constant tensor of the same length (dropout masks,
    /// padding masks).
    pub fn mask_mul(self, mask: Vec<T>) -> Result<Var<'t, T>> {
        let out = {
            let x = self.value();
            if mask.len() != x.numel() {
                return Err(NumericsError::ShapeMismatch {
                    op: "mask_mul",
                    lhs: x.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape
            .push_checked("mask_mul", out, Op::MaskMul { x: self.id, mask }, needs)
    }

    /// Zeroes whole rows of a `[m×n]` matrix where `keep[i]` is false.
    pub fn mask_rows(self, keep: &[bool]) -> Result<Var<'t, T>> {
        let (m, n) = self.value().dims2()?;
        if keep.len() != m {
            return Err(NumericsError::ShapeMismatch {
                op: "mask_rows",
                lhs: vec![m, n],
                rhs: vec![keep.len()],
            });
        }
        let mask = keep
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { T::one() } else { T::zero() }, n))
            .collect();
        self.mask_mul(mask)
    }

    /// Softmax along `axis`, max-subtracted per slice.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let (out, outer, len, inner) = {
            let x = self.value();
            let shape = x.shape();
            if axis >= shape.len() {
                return Err(NumericsError::InvalidAxis {
                    axis,
                    shape: shape.to_vec(),
                });
            }
            let outer: usize = shape[..axis].iter().product();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = x.data().to_vec();
            let mut buf = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    for (j, b) in buf.iter_mut().enumerate() {
                        *b = data[at(j)];
                    }
                    kernels::softmax_in_place(&mut buf);
                    for (j, &b) in buf.iter().enumerate() {
                        data[at(j)] = b;
                    }
                }
            }
            (Tensor::from_parts(shape.to_vec(), data), outer, len, inner)
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push_checked(
            "softmax",
            out,
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
            needs,
        )
    }

    /// Row-wise layer normalisation over the last axis of a `[m×n]` matrix.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.tape.check_same_tape(gain);
        self.tape.check_same_tape(bias);
        let (out, xhat, rstd) = {
            let (x, g, b) = (self.value(), gain.value(), bias.value());
            let (m, n) = x.dims2()?;
            if g.shape() != [n] || b.shape() != [n] {
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let nf = T::cast(n as f64);
            let mut xhat = vec![T::zero(); m * n];
            let mut rstd = vec![T::zero(); m];
            let mut out = vec![T::zero(); m * n];
            for r in 0..m {
                let row = &x.data()[r * n..(r + 1) * n];
                let mean = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let rs = (var + eps).sqrt().recip();
                rstd[r] = rs;
                for j in 0..n {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * n + j] = xh;
                    out[r * n + j] = g.data()[j] * xh + b.data()[j];
                }
            }
            (Tensor::from_parts(vec![m, n], out), xhat, rstd)
        };
        let needs = self.tape.needs(&[self.id, gain.id, bias.id]);
        self.tape.push_checked(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Row lookup into a `[V×D]` table.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let t = self.value();
            let (rows, width) = t.dims2()?;
            if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
                return Err(NumericsError::IndexOutOfRange {
                    what: "embedding table",
                    index: bad,
                    size: rows,
                });
            }
            if ids.is_empty() {
                return Err(NumericsError::Contract("gather with no ids".into()));
            }
            let mut data = Vec::with_capacity(ids.len() * width);
            for &i in ids {
                data.extend_from_slice(t.row(i));
            }
            Tensor::from_parts(vec![ids.len(), width], data)
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push_checked(
            "gather_rows",
            out,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    /// Batched multi-head scaled dot-product attention on already projected
    /// inputs.
    ///
    /// `self` holds queries `[batch·q_len × width]`, `keys`/`values` hold
    /// `[batch·k_len × width]`; `mask[(b·q_len + i)·k_len + j]` allows query
    /// `i` of batch item `b` to see key `j`. Disallowed scores receive
    /// [`MASK_PENALTY`] before the softmax. Every query row must see at least
    /// one key.
    pub fn attention(
        self,
        keys: Var<'t, T>,
        values: Var<'t, T>,
        mask: &[bool],
        batch: usize,
        heads: usize,
    ) -> Result<Var<'t, T>> {
        self.tape.check_same_tape(keys);
        self.tape.check_same_tape(values);
        keys.same_shape(values, "attention")?;
        let (out, geom, probs) = {
            let (q, k, v) = (self.value(), keys.value(), values.value());
            let (qr, width) = q.dims2()?;
            let (kr, kw) = k.dims2()?;
            if kw != width || batch == 0 || qr % batch != 0 || kr % batch != 0 {
                return Err(NumericsError::ShapeMismatch {
                    op: "attention",
                    lhs: q.shape().to_vec(),
                    rhs: k.shape().to_vec(),
                });
            }
            if heads == 0 || width % heads != 0 {
                return Err(NumericsError::Contract(format!(
                    "width {width} not divisible by {heads} heads"
                )));
            }
            let (q_len, k_len) = (qr / batch, kr / batch);
            if mask.len() != batch * q_len * k_len {
                return Err(NumericsError::ShapeMismatch {
                    op: "attention mask",
                    lhs: vec![batch, q_len, k_len],
                    rhs: vec![mask.len()],
                });
            }
            if let Some(row) = mask.chunks(k_len).position(|r| !r.contains(&true)) {
                return Err(NumericsError::Contract(format!(
                    "attention query row {row} has no visible key"
                )));
            }
            let geom = AttnGeom {
                batch,
                q_len,
                k_len,
                heads,
                width,
            };
            let (out, probs) = attention_forward(q.data(), k.data(), v.data(), mask, geom);
            (Tensor::from_parts(vec![qr, width], out), geom, probs)
        };
        let needs = self.tape.needs(&[self.id, keys.id, values.id]);
        self.tape.push_checked(
            "attention",
            out,
            Op::Attention {
                q: self.id,
                k: keys.id,
                v: values.id,
                geom,
                probs,
            },
            needs,
        )
    }

    /// Mean negative log-softmax probability of `targets` over rows whose
    /// target is not `ignore_index`. Zero (with zero gradient) when every
    /// row is ignored.
    pub fn cross_entropy(self, targets: &[usize], ignore_index: usize) -> Result<Var<'t, T>> {
        let (out, probs, count) = {
            let logits = self.value();
            let (rows, vocab) = logits.dims2()?;
            if targets.len() != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: logits.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let mut probs = logits.data().to_vec();
            let mut total = T::zero();
            let mut count = 0;
            for (r, &t) in targets.iter().enumerate() {
                let row = &mut probs[r * vocab..(r + 1) * vocab];
                if t == ignore_index {
                    row.iter_mut().for_each(|p| *p = T::zero());
                    continue;
                }
                if t >= vocab {
                    return Err(NumericsError::IndexOutOfRange {
                        what: "target vocabulary",
                        index: t,
                        size: vocab,
                    });
                }
                let lse = kernels::log_sum_exp(row);
                total += lse - row[t];
                kernels::softmax_in_place(row);
                count += 1;
            }
            let loss = if count == 0 {
                T::zero()
            } else {
                total / T::cast(count as f64)
            };
            (Tensor::scalar(loss), probs, count)
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push_checked(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            needs,
        )
    }
}

fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    mask: &[bool],
    geom: AttnGeom,
) -> (Vec<T>, Vec<T>) {
    let AttnGeom {
        batch,
        q_len,
        k_len,
        heads,
        width,
    } = geom;
    let dk = width / heads;
    let scale = T::cast(1.0 / (dk as f64).sqrt());
    let penalty = T::cast(MASK_PENALTY);
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
    for b in 0..batch {
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..q_len {
                let qrow = (b * q_len + i) * width;
                let qs = &q[qrow + cols.start..qrow + cols.end];
                let mrow = &mask[(b * q_len + i) * k_len..][..k_len];
                let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                for (j, (pj, &keep)) in p.iter_mut().zip(mrow).enumerate() {
                    let krow = (b * k_len + j) * width;
                    let mut s = dot(qs, &k[krow + cols.start..krow + cols.end]) * scale;
                    if !keep {
                        s += penalty;
                    }
                    *pj = s;
                }
                kernels::softmax_in_place(p);
                let o = &mut out[qrow + cols.start..qrow + cols.end];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == T::zero() {
                        continue;
                    }
                    let vrow = (b * k_len + j) * width;
                    for (ov, &vv) in o.iter_mut().zip(&v[vrow + cols.start..vrow + cols.end]) {
                        *ov += pj * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}
