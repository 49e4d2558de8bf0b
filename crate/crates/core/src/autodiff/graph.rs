use std::collections::{BTreeMap, HashMap};

use super::tensor::{matmul, matmul_nt, matmul_tn};
use super::{GraphError, ParamSet, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    L2Norm(Var),
    NormalizeRows(Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    Row(Var, usize),
    RowDot(Var, Var),
    WeightedSum(Var, Vec<Var>),
    Resize(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Operations run eagerly as they are recorded, so the
/// forward pass is the sequence of calls that built the graph; every node
/// keeps its output value for the backward sweep.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    watched: Vec<Var>,
}

/// Result of a backward sweep.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    inputs: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn input(&self, var: Var) -> Option<&Tensor> {
        self.inputs.get(&var)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn take_input(&mut self, var: Var) -> Option<Tensor> {
        self.inputs.remove(&var)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), GraphError> {
    if a.shape() != b.shape() {
        return Err(GraphError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), GraphError> {
    if t.shape().len() != 2 {
        return Err(GraphError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Registers a named trainable tensor. Registering a name twice returns
    /// the first handle.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    /// Registers every tensor of a parameter set.
    pub fn params_from(&mut self, set: &ParamSet) -> BTreeMap<String, Var> {
        set.iter()
            .map(|(name, t)| (name.clone(), self.param(name, t)))
            .collect()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.param_index.get(name).copied()
    }

    /// Records an input. With `requires_grad` the backward sweep reports its
    /// gradient through [`Gradients::input`].
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let v = self.leaf(value, requires_grad);
        if requires_grad {
            self.watched.push(v);
        }
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var, GraphError> {
        if !value.is_finite() {
            return Err(GraphError::NonFinite { op: name });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::RowDot(a, b) => vec![*a, *b],
            Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Scale(a, _)
            | Op::L2Norm(a)
            | Op::NormalizeRows(a)
            | Op::SliceRows(a, _)
            | Op::Row(a, _)
            | Op::Resize(a)
            | Op::CrossEntropy(a, _) => vec![*a],
            Op::ConcatCols(vs) => vs.clone(),
            Op::WeightedSum(w, xs) => {
                let mut v = vec![*w];
                v.extend(xs.iter().copied());
                v
            }
        }
    }

    fn check(&self, v: Var) -> Result<&Tensor, GraphError> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(GraphError::UnknownVar(v.0))
    }

    // ---- operations ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (n, k) = require_matrix("matmul", ta)?;
        let (k2, m) = require_matrix("matmul", tb)?;
        if k != k2 {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = Tensor::matrix(n, m, matmul(ta.data(), tb.data(), n, k, m));
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, GraphError> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, out, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector (`[m]` or `[1, m]`) to every row of `x[n, m]`.
    /// This is the only broadcasting operation.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, GraphError> {
        let (tx, tb) = (self.check(x)?, self.check(bias)?);
        let (n, m) = require_matrix("add_bias", tx)?;
        if tb.numel() != m || tb.cols() != m {
            return Err(GraphError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for i in 0..n {
            for (o, b) in data[i * m..(i + 1) * m].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push(Op::AddBias(x, bias), Tensor::matrix(n, m, data), "add_bias")
    }

    fn unary(
        &mut self,
        x: Var,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, GraphError> {
        let out = self.check(x)?.map(f);
        self.push(op, out, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(x, "relu", |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(x, "tanh", f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(x, "exp", f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(x, "log", f64::ln, Op::Log(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, GraphError> {
        self.unary(x, "scale", |v| c * v, Op::Scale(x, c))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, GraphError> {
        let tx = self.check(x)?;
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(Op::Softmax(x), out, "softmax")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, GraphError> {
        let s = self.check(x)?.data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, GraphError> {
        let t = self.check(x)?;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s), "mean")
    }

    /// Euclidean norm of the whole tensor.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var, GraphError> {
        let n = self.check(x)?.l2_norm();
        self.push(Op::L2Norm(x), Tensor::scalar(n), "l2_norm")
    }

    /// Scales every row to unit Euclidean norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, GraphError> {
        let tx = self.check(x)?;
        let (_, m) = require_matrix("normalize_rows", tx)?;
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(m) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(GraphError::ZeroNorm);
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(Op::NormalizeRows(x), out, "normalize_rows")
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, GraphError> {
        if xs.is_empty() {
            return Err(GraphError::Empty("concat_cols"));
        }
        let first = self.check(xs[0])?;
        let (n, _) = require_matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let t = self.check(v)?;
            let (r, c) = require_matrix("concat_cols", t)?;
            if r != n {
                return Err(GraphError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![n],
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[v.0].value.data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            Op::ConcatCols(xs.to_vec()),
            Tensor::matrix(n, total, data),
            "concat_cols",
        )
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, GraphError> {
        let tx = self.check(x)?;
        let (n, _) = require_matrix("slice_rows", tx)?;
        if start >= end || end > n {
            return Err(GraphError::ShapeMismatch {
                op: "slice_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let out = tx.slice_rows(start, end);
        self.push(Op::SliceRows(x, start), out, "slice_rows")
    }

    /// Row `i` of a matrix as a `[1, m]` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var, GraphError> {
        let tx = self.check(x)?;
        let (n, m) = require_matrix("row", tx)?;
        if i >= n {
            return Err(GraphError::ShapeMismatch {
                op: "row",
                lhs: tx.shape().to_vec(),
                rhs: vec![i],
            });
        }
        let out = Tensor::matrix(1, m, tx.row(i).to_vec());
        self.push(Op::Row(x, i), out, "row")
    }

    /// Per-row dot product of two `[n, m]` matrices, giving `[n, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        same_shape("row_dot", ta, tb)?;
        let (n, m) = require_matrix("row_dot", ta)?;
        let data = (0..n)
            .map(|i| {
                ta.data()[i * m..(i + 1) * m]
                    .iter()
                    .zip(&tb.data()[i * m..(i + 1) * m])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        self.push(Op::RowDot(a, b), Tensor::matrix(n, 1, data), "row_dot")
    }

    /// `sum_o w[o] * xs[o]`. Terms whose weight is exactly zero are skipped
    /// in the forward value, so one-hot weights reproduce the selected input
    /// bit for bit.
    pub fn weighted_sum(&mut self, weights: Var, xs: &[Var]) -> Result<Var, GraphError> {
        let tw = self.check(weights)?;
        if tw.numel() != xs.len() || xs.is_empty() {
            return Err(GraphError::ShapeMismatch {
                op: "weighted_sum",
                lhs: tw.shape().to_vec(),
                rhs: vec![xs.len()],
            });
        }
        let w = tw.data().to_vec();
        let shape = self.check(xs[0])?.shape().to_vec();
        let mut out = Tensor::zeros(shape);
        for (&wo, &x) in w.iter().zip(xs) {
            let tx = self.check(x)?;
            same_shape("weighted_sum", &out, tx)?;
            if wo == 0.0 {
                continue;
            }
            for (o, &v) in out.data_mut().iter_mut().zip(tx.data()) {
                *o += wo * v;
            }
        }
        self.push(Op::WeightedSum(weights, xs.to_vec()), out, "weighted_sum")
    }

    /// Fixed projection of `x[n, k]` to `[n, m]`: keeps the first
    /// `min(k, m)` columns and zero-pads the rest.
    pub fn resize_cols(&mut self, x: Var, m: usize) -> Result<Var, GraphError> {
        let tx = self.check(x)?;
        let (n, k) = require_matrix("resize_cols", tx)?;
        let keep = k.min(m);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            data[i * m..i * m + keep].copy_from_slice(&tx.data()[i * k..i * k + keep]);
        }
        self.push(Op::Resize(x), Tensor::matrix(n, m, data), "resize_cols")
    }

    /// Mean softmax cross-entropy of `logits[n, c]` against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, GraphError> {
        let tl = self.check(logits)?;
        let (n, c) = require_matrix("cross_entropy", tl)?;
        if targets.len() != n {
            return Err(GraphError::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(GraphError::TargetOutOfRange { target: bad, classes: c });
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = tl.row(i);
            total += log_sum_exp(row) - row[t];
        }
        let out = Tensor::scalar(total / n as f64);
        self.push(
            Op::CrossEntropy(logits, targets.to_vec()),
            out,
            "cross_entropy",
        )
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GraphError> {
        let t = self.check(loss)?;
        if !t.is_scalar() {
            return Err(GraphError::NotScalar(t.shape().to_vec()));
        }
        let seed = Tensor::filled(t.shape().to_vec(), 1.0);
        self.backward_seeded(loss, &seed)
    }

    /// Vector-Jacobian product: propagates `seed` (the gradient of some
    /// downstream loss with respect to `output`) back to every parameter and
    /// watched input.
    pub fn backward_seeded(&self, output: Var, seed: &Tensor) -> Result<Gradients, GraphError> {
        let t = self.check(output)?;
        same_shape("backward_seed", t, seed)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            // Keep the gradient around only for leaves; interior nodes are done.
        }

        let mut out = Gradients::default();
        for (name, v) in &self.params {
            let g = match grads.get(v.0).and_then(|g| g.clone()) {
                Some(g) => g,
                None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
            };
            out.params.insert(name.clone(), g);
        }
        for &v in &self.watched {
            let g = match grads.get(v.0).and_then(|g| g.clone()) {
                Some(g) => g,
                None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
            };
            out.inputs.insert(v, g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    let ga = matmul_nt(g.data(), tb.data(), n, m, k);
                    self.accumulate(grads, *a, Tensor::matrix(n, k, ga));
                }
                if self.nodes[b.0].requires_grad {
                    let gb = matmul_tn(ta.data(), g.data(), n, k, m);
                    self.accumulate(grads, *b, Tensor::matrix(k, m, gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let ga = zip_with(g, tb, |x, y| x * y);
                let gb = zip_with(g, ta, |x, y| x * y);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let tb = val(b);
                let m = tb.numel();
                let mut gb = vec![0.0; m];
                for row in g.data().chunks(m) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb).expect("bias"));
            }
            Op::Relu(x) => {
                let gx = zip_with(g, val(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = zip_with(g, out, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = zip_with(g, out, |gv, y| gv * y);
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = zip_with(g, val(x), |gv, xv| gv / xv);
                self.accumulate(grads, *x, gx);
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scaled(*c)),
            Op::Softmax(x) => {
                let c = out.cols();
                let mut gx = vec![0.0; out.numel()];
                for ((gr, yr), o) in g
                    .data()
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(gx.chunks_mut(c))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &y) in o.iter_mut().zip(gr).zip(yr) {
                        *o = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx).expect("softmax"));
            }
            Op::Sum(x) => {
                let t = val(x);
                self.accumulate(grads, *x, Tensor::filled(t.shape().to_vec(), g.item()));
            }
            Op::Mean(x) => {
                let t = val(x);
                let v = g.item() / t.numel() as f64;
                self.accumulate(grads, *x, Tensor::filled(t.shape().to_vec(), v));
            }
            Op::L2Norm(x) => {
                let t = val(x);
                let n = out.item();
                let gx = if n == 0.0 {
                    Tensor::zeros(t.shape().to_vec())
                } else {
                    t.scaled(g.item() / n)
                };
                self.accumulate(grads, *x, gx);
            }
            Op::NormalizeRows(x) => {
                let t = val(x);
                let m = t.cols();
                let mut gx = vec![0.0; t.numel()];
                for (((xr, yr), gr), o) in t
                    .data()
                    .chunks(m)
                    .zip(out.data().chunks(m))
                    .zip(g.data().chunks(m))
                    .zip(gx.chunks_mut(m))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &y) in o.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - y * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), gx).expect("norm"));
            }
            Op::ConcatCols(xs) => {
                let n = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for v in xs {
                    let w = val(v).cols();
                    if self.nodes[v.0].requires_grad {
                        let mut gv = Vec::with_capacity(n * w);
                        for i in 0..n {
                            gv.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, *v, Tensor::matrix(n, w, gv));
                    }
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                let t = val(x);
                let m = t.cols();
                let mut gx = Tensor::zeros(t.shape().to_vec());
                let s = start * m;
                gx.data_mut()[s..s + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::Row(x, i) => {
                let t = val(x);
                let m = t.cols();
                let mut gx = Tensor::zeros(t.shape().to_vec());
                gx.data_mut()[i * m..(i + 1) * m].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let m = ta.cols();
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                for (i, &gi) in g.data().iter().enumerate() {
                    for j in 0..m {
                        ga[i * m + j] = gi * tb.data()[i * m + j];
                        gb[i * m + j] = gi * ta.data()[i * m + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga).expect("row_dot"));
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb).expect("row_dot"));
            }
            Op::WeightedSum(w, xs) => {
                let tw = val(w);
                if self.nodes[w.0].requires_grad {
                    let gw: Vec<f64> = xs
                        .iter()
                        .map(|x| val(x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *w, Tensor::new(tw.shape().to_vec(), gw).expect("ws"));
                }
                for (x, &wo) in xs.iter().zip(tw.data()) {
                    if self.nodes[x.0].requires_grad {
                        self.accumulate(grads, *x, g.scaled(wo));
                    }
                }
            }
            Op::Resize(x) => {
                let t = val(x);
                let (n, k) = (t.rows(), t.cols());
                let m = out.cols();
                let keep = k.min(m);
                let mut gx = vec![0.0; n * k];
                for i in 0..n {
                    gx[i * k..i * k + keep].copy_from_slice(&g.data()[i * m..i * m + keep]);
                }
                self.accumulate(grads, *x, Tensor::matrix(n, k, gx));
            }
            Op::CrossEntropy(logits, targets) => {
                let t = val(logits);
                let c = t.cols();
                let n = targets.len() as f64;
                let scale = g.item() / n;
                let mut gl = t.data().to_vec();
                for (row, &tgt) in gl.chunks_mut(c).zip(targets) {
                    softmax_in_place(row);
                    row[tgt] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, Tensor::new(t.shape().to_vec(), gl).expect("ce"));
            }
        }
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip shapes")
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
