//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so parents always precede children and the backward
//! sweep is a single reverse pass over the node list.
//!
//! Only nodes that depend on a trainable leaf carry adjoints. Constants such
//! as frozen network weights are shared through [`Arc`] and never receive a
//! gradient, which keeps the attack loop from paying for weight gradients it
//! does not need.
//!
//! Kinks (`relu` at 0, `max_const` at the threshold) use the subgradient 0.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Shift,
    MatMul,
    Affine,
    Relu,
    Tanh,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    SquaredNorm,
    MaxConst,
    Gather,
    Concat,
    Sqrt,
    Normalize,
    Reshape,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "subtract",
            OpKind::Mul => "multiply",
            OpKind::Scale => "scale",
            OpKind::Shift => "shift",
            OpKind::MatMul => "matmul",
            OpKind::Affine => "affine",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SquaredNorm => "squared_norm",
            OpKind::MaxConst => "max_const",
            OpKind::Gather => "gather",
            OpKind::Concat => "concat",
            OpKind::Sqrt => "sqrt",
            OpKind::Normalize => "normalize",
            OpKind::Reshape => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SquaredNorm(Var),
    MaxConst(Var, f64),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    Sqrt(Var),
    Normalize(Var),
    Reshape(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Shift(..) => OpKind::Shift,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Affine(..) => OpKind::Affine,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SquaredNorm(..) => OpKind::SquaredNorm,
            Op::MaxConst(..) => OpKind::MaxConst,
            Op::Gather(..) => OpKind::Gather,
            Op::Concat(..) => OpKind::Concat,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Normalize(..) => OpKind::Normalize,
            Op::Reshape(..) => OpKind::Reshape,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Affine(x, w, b) => vec![*x, *w, *b],
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SquaredNorm(a)
            | Op::MaxConst(a, _)
            | Op::Gather(a, _)
            | Op::Sqrt(a)
            | Op::Normalize(a)
            | Op::Reshape(a) => vec![*a],
            Op::Concat(vs) => vs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    needs_grad: bool,
    trainable: bool,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    trainable: Vec<Var>,
}

impl Gradients {
    /// Adjoint of any node that depends on a trainable leaf.
    pub fn adjoint(&self, var: Var) -> Option<&Tensor> {
        self.adjoints.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of the root with respect to a trainable leaf. Leaves the root
    /// does not depend on get zeros.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.adjoint(var)
    }

    /// Trainable leaves in registration order.
    pub fn leaves(&self) -> &[Var] {
        &self.trainable
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.adjoints.get_mut(var.0).and_then(Option::take)
    }
}

fn rows_of(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.last_axis() {
        Some(cols) => Ok((t.len() / cols, cols)),
        None => Err(Error::EmptyAxis { op }),
    }
}

/// Dot product over eight independent partial sums so the loop vectorizes.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `c[n×m] = a[n×k] · b[k×m]`, with optional transposition through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // Single rows and outer products skip dgemm, which would repack the
    // whole weight matrix on every call.
    if n == 1 {
        if !accumulate {
            c.fill(0.0);
        }
        if b_trans {
            for (cj, row) in c.iter_mut().zip(b.chunks_exact(k)) {
                *cj += dot(row, a);
            }
        } else {
            for (&ai, row) in a.iter().zip(b.chunks_exact(m)) {
                for (cj, bj) in c.iter_mut().zip(row) {
                    *cj += ai * bj;
                }
            }
        }
        return;
    }
    if k == 1 {
        for (&ai, crow) in a.iter().zip(c.chunks_exact_mut(m)) {
            for (cj, bj) in crow.iter_mut().zip(b) {
                *cj = if accumulate { *cj + ai * bj } else { ai * bj };
            }
        }
        return;
    }
    // a is stored as n×k (or k×n when transposed), b as k×m (or m×k).
    let (rsa, csa) = if a_trans { (1, n as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (m as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked by the callers against n, k and m,
    // and the strides above address only elements inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// Interprets `x` as a batch of row vectors for matmul/affine.
fn matmul_dims(op: &'static str, x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, Vec<usize>)> {
    if w.len() != 2 {
        return Err(Error::shape(op, x, w));
    }
    let (k, m) = (w[0], w[1]);
    match x {
        [kk] if *kk == k => Ok((1, k, m, vec![m])),
        [n, kk] if *kk == k => Ok((*n, k, m, vec![*n, m])),
        _ => Err(Error::shape(op, x, w)),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    /// Parent indices of a node, for inspecting the recorded graph.
    pub fn parents(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.parents()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            needs_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<&Tensor> {
        self.nodes
            .get(var.0)
            .map(|n| n.value.as_ref())
            .ok_or(Error::UnknownNode {
                index: var.0,
                len: self.nodes.len(),
            })
    }

    /// Registers a leaf whose gradient `backward` reports.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Arc::new(value),
            needs_grad: true,
            trainable: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf without copying `value`.
    pub fn variable_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
            trainable: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, kind: OpKind, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.dims() != tb.dims() {
            return Err(Error::shape(kind.name(), ta.dims(), tb.dims()));
        }
        let value = ta.zip_map(tb, f)?;
        let op = match kind {
            OpKind::Add => Op::Add(a, b),
            OpKind::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.check(a)?.map(|x| x * factor);
        Ok(self.push(Op::Scale(a, factor), value))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, offset: f64) -> Result<Var> {
        let value = self.check(a)?.map(|x| x + offset);
        Ok(self.push(Op::Shift(a), value))
    }

    /// `x · w` for `x` of dims `[k]` or `[n, k]` and `w` of dims `[k, m]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.check(x)?, self.check(w)?);
        let (n, k, m, out_dims) = matmul_dims("matmul", tx.dims(), tw.dims())?;
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, tx.data(), false, tw.data(), false, &mut out, false);
        Ok(self.push(Op::MatMul(x, w), Tensor::from_parts(out_dims, out)))
    }

    /// `x · w + b`, broadcasting `b` of dims `[m]` over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (n, k, m, out_dims) = matmul_dims("affine", tx.dims(), tw.dims())?;
        if tb.dims() != [m] {
            return Err(Error::shape("affine", tw.dims(), tb.dims()));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(tb.data());
        }
        gemm(n, k, m, tx.data(), false, tw.data(), false, &mut out, true);
        Ok(self.push(Op::Affine(x, w, b), Tensor::from_parts(out_dims, out)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.check(a)?.map(|x| x.max(0.0));
        Ok(self.push(Op::Relu(a), value))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.check(a)?.map(f64::tanh);
        Ok(self.push(Op::Tanh(a), value))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        let (_, cols) = rows_of(t, "softmax")?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let dims = t.dims().to_vec();
        Ok(self.push(Op::Softmax(a), Tensor::from_parts(dims, out)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        let (_, cols) = rows_of(t, "log_softmax")?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let dims = t.dims().to_vec();
        Ok(self.push(Op::LogSoftmax(a), Tensor::from_parts(dims, out)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.data().iter().sum();
        Ok(self.push(Op::Sum(a), Tensor::scalar(s)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Op::Mean(a), Tensor::scalar(s)))
    }

    /// Sum of squares of all elements.
    pub fn squared_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.data().iter().map(|x| x * x).sum();
        Ok(self.push(Op::SquaredNorm(a), Tensor::scalar(s)))
    }

    /// Elementwise `max(a, floor)`.
    pub fn max_const(&mut self, a: Var, floor: f64) -> Result<Var> {
        let value = self.check(a)?.map(|x| x.max(floor));
        Ok(self.push(Op::MaxConst(a, floor), value))
    }

    /// Picks one element per row along the last axis.
    ///
    /// For `a` of dims `[..., c]` with `r` rows, `indices` must hold `r`
    /// entries below `c`. The result drops the last axis, or is `[1]` when
    /// `a` is rank 1.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.check(a)?;
        let (rows, cols) = rows_of(t, "gather")?;
        if indices.len() != rows {
            return Err(Error::shape("gather", t.dims(), &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(Error::Domain {
                op: "gather",
                detail: format!("index {bad} out of range for axis of size {cols}"),
            });
        }
        let out: Vec<f64> = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| t.data()[r * cols + i])
            .collect();
        let mut dims = t.dims()[..t.dims().len() - 1].to_vec();
        if dims.is_empty() {
            dims.push(1);
        }
        Ok(self.push(Op::Gather(a, indices.to_vec()), Tensor::from_parts(dims, out)))
    }

    /// Concatenates along the first axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyAxis { op: "concat" })?;
        let head = self.check(*first)?;
        if head.dims().is_empty() {
            return Err(Error::EmptyAxis { op: "concat" });
        }
        let tail = head.dims()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.check(p)?;
            if t.dims().is_empty() || t.dims()[1..] != tail[..] {
                return Err(Error::shape("concat", head.dims(), t.dims()));
            }
            lead += t.dims()[0];
            data.extend_from_slice(t.data());
        }
        let mut dims = vec![lead];
        dims.extend(tail);
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::from_parts(dims, data)))
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        if let Some(bad) = t.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        let value = t.map(f64::sqrt);
        Ok(self.push(Op::Sqrt(a), value))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        let (_, cols) = rows_of(t, "normalize")?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Domain {
                    op: "normalize",
                    detail: "zero-norm row".into(),
                });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let dims = t.dims().to_vec();
        Ok(self.push(Op::Normalize(a), Tensor::from_parts(dims, out)))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let t = self.check(a)?;
        let value = t
            .reshape(dims)
            .map_err(|_| Error::shape("reshape", t.dims(), dims))?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.check(root)?;
        if !root_value.is_scalar() {
            return Err(Error::NotScalar(root_value.dims().to_vec()));
        }

        let mut adjoints: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(Tensor::ones(root_value.dims()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                adjoints[i] = None;
                continue;
            }
            let Some(grad) = adjoints[i].take() else {
                continue;
            };
            for (parent, contribution) in self.local_grads(node, &grad) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut adjoints[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            adjoints[i] = Some(grad);
        }

        let trainable: Vec<Var> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, _)| Var(i))
            .collect();
        adjoints.resize(self.nodes.len(), None);
        for &v in &trainable {
            if adjoints[v.0].is_none() {
                adjoints[v.0] = Some(Tensor::zeros(self.nodes[v.0].value.dims()));
            }
        }
        Ok(Gradients {
            adjoints,
            trainable,
        })
    }

    /// Vector-Jacobian products of `node` toward the parents that need them.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| self.nodes[v.0].value.as_ref();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let y = node.value.as_ref();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.zip_map(val(*b), |x, y| x * y).unwrap()));
                }
                if wants(*b) {
                    out.push((*b, g.zip_map(val(*a), |x, y| x * y).unwrap()));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.map(|x| x * f))),
            Op::Shift(a) | Op::Reshape(a) => {
                out.push((*a, Tensor::from_parts(val(*a).dims().to_vec(), g.data().to_vec())));
            }
            Op::MatMul(x, w) | Op::Affine(x, w, _) => {
                let (tx, tw) = (val(*x), val(*w));
                let (k, m) = (tw.dims()[0], tw.dims()[1]);
                let n = tx.len() / k;
                if wants(*x) {
                    let mut dx = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), false, tw.data(), true, &mut dx, false);
                    out.push((*x, Tensor::from_parts(tx.dims().to_vec(), dx)));
                }
                if wants(*w) {
                    let mut dw = vec![0.0; k * m];
                    gemm(k, n, m, tx.data(), true, g.data(), false, &mut dw, false);
                    out.push((*w, Tensor::from_parts(tw.dims().to_vec(), dw)));
                }
                if let Op::Affine(_, _, b) = &node.op {
                    if wants(*b) {
                        let mut db = vec![0.0; m];
                        for row in g.data().chunks(m) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        out.push((*b, Tensor::from_parts(vec![m], db)));
                    }
                }
            }
            Op::Relu(a) => {
                out.push((*a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }).unwrap()));
            }
            Op::Tanh(a) => out.push((*a, g.zip_map(y, |g, t| g * (1.0 - t * t)).unwrap())),
            Op::Softmax(a) => {
                let cols = y.last_axis().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                out.push((*a, Tensor::from_parts(y.dims().to_vec(), dx)));
            }
            Op::LogSoftmax(a) => {
                let cols = y.last_axis().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let total: f64 = gr.iter().sum();
                    dx.extend(yr.iter().zip(gr).map(|(yi, gi)| gi - yi.exp() * total));
                }
                out.push((*a, Tensor::from_parts(y.dims().to_vec(), dx)));
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                out.push((*a, Tensor::full(val(*a).dims(), s)));
            }
            Op::Mean(a) => {
                let t = val(*a);
                let s = g.data()[0] / t.len() as f64;
                out.push((*a, Tensor::full(t.dims(), s)));
            }
            Op::SquaredNorm(a) => {
                let s = g.data()[0];
                out.push((*a, val(*a).map(|x| 2.0 * s * x)));
            }
            Op::MaxConst(a, floor) => {
                let f = *floor;
                out.push((*a, g.zip_map(val(*a), |g, x| if x > f { g } else { 0.0 }).unwrap()));
            }
            Op::Gather(a, indices) => {
                let t = val(*a);
                let cols = t.last_axis().unwrap();
                let mut dx = vec![0.0; t.len()];
                for (r, (&i, &gv)) in indices.iter().zip(g.data()).enumerate() {
                    dx[r * cols + i] += gv;
                }
                out.push((*a, Tensor::from_parts(t.dims().to_vec(), dx)));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    let slice = g.data()[offset..offset + t.len()].to_vec();
                    offset += t.len();
                    out.push((p, Tensor::from_parts(t.dims().to_vec(), slice)));
                }
            }
            Op::Sqrt(a) => {
                out.push((*a, g.zip_map(y, |g, s| if s > 0.0 { g / (2.0 * s) } else { 0.0 }).unwrap()));
            }
            Op::Normalize(a) => {
                let x = val(*a);
                let cols = y.last_axis().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), xr) in y
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(x.data().chunks(cols))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yi, gi)| (gi - yi * dot) / norm));
                }
                out.push((*a, Tensor::from_parts(y.dims().to_vec(), dx)));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn gemm_matches_naive_product() {
        let val = |i: usize| ((i * 37 + 11) % 17) as f64 / 8.0 - 1.0;
        for (n, k, m) in [(1, 4, 3), (3, 1, 2), (3, 4, 2), (1, 1, 5), (1, 19, 3)] {
            for a_trans in [false, true] {
                for b_trans in [false, true] {
                    for accumulate in [false, true] {
                        let a: Vec<f64> = (0..n * k).map(val).collect();
                        let b: Vec<f64> = (0..k * m).map(|i| val(i + 5)).collect();
                        let at = |i: usize, p: usize| if a_trans { a[p * n + i] } else { a[i * k + p] };
                        let bt = |p: usize, j: usize| if b_trans { b[j * k + p] } else { b[p * m + j] };
                        let mut c = vec![0.5; n * m];
                        gemm(n, k, m, &a, a_trans, &b, b_trans, &mut c, accumulate);
                        for i in 0..n {
                            for j in 0..m {
                                let base = if accumulate { 0.5 } else { 0.0 };
                                let want = base + (0..k).map(|p| at(i, p) * bt(p, j)).sum::<f64>();
                                assert!((c[i * m + j] - want).abs() < 1e-12, "{n} {k} {m} {a_trans} {b_trans}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(v(&[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn tanh_of_zero_tensor() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn squared_norm_of_three_four() {
        let mut tape = Tape::new();
        let x = tape.constant(v(&[3.0, 4.0]));
        let y = tape.squared_norm(x).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 25.0);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(v(&[1.0, 2.0]));
        let b = tape.constant(v(&[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");

        let w = tape.constant(Tensor::zeros(&[3, 4]));
        let err = tape.matmul(a, w).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
    }

    #[test]
    fn softmax_without_axis_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![], vec![1.0]).unwrap());
        assert!(matches!(tape.softmax(x), Err(Error::EmptyAxis { op: "softmax" })));
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let s = tape.sum(w).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(w).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn gradient_of_squared_norm() {
        let mut tape = Tape::new();
        let w = tape.variable(v(&[1.0, -2.0]));
        let s = tape.squared_norm(w).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let w = tape.variable(v(&[1.0, 2.0]));
        let y = tape.tanh(w).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn backward_before_forward_errors() {
        let tape = Tape::new();
        assert!(matches!(
            tape.backward(Var(0)),
            Err(Error::UnknownNode { index: 0, len: 0 })
        ));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.variable(v(&[1.0, 2.0]));
        let b = tape.variable(v(&[3.0]));
        let s = tape.sum(a).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[0.0]);
        assert_eq!(grads.leaves(), &[a, b]);
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::ones(&[2, 2]));
        let x = tape.variable(v(&[1.0, 2.0]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.adjoint(w).is_none());
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.adjoint(s).unwrap().data(), &[1.0]);
    }

    #[test]
    fn relu_and_max_kinks_use_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.variable(v(&[0.0, 1.0, -1.0]));
        let r = tape.relu(x).unwrap();
        let m = tape.max_const(x, 1.0).unwrap();
        let both = tape.add(r, m).unwrap();
        let s = tape.sum(both).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_and_concat_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let g = tape.gather(x, &[2, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 4.0]);
        assert!(tape.gather(x, &[3, 0]).is_err());
        let c = tape.concat(&[g, g]).unwrap();
        assert_eq!(tape.value(c).dims(), &[4]);
        let bad = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(tape.concat(&[x, bad]).is_err());
    }
}
