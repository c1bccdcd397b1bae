use std::collections::HashMap;

use super::kernels::{bmm_order_free, matmul_acc, order_free_sum, transpose};
use super::{GradStore, NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    PowScalar(Var, f64),
    SmoothL1(Var, f64),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
    Reshape(Var),
    Reduce { x: Var, op: ReduceOp, outer: usize, len: usize, inner: usize, argmax: Vec<usize> },
    #[cfg(test)]
    BrokenSquare(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the append
/// order is a topological order and backward simply walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    backward_visits: usize,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> NumericsError {
    NumericsError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Number of nodes processed by the most recent backward pass.
    pub fn backward_visits(&self) -> usize {
        self.backward_visits
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumericsError> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), NumericsError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    /// `a · b`, or `a · bᵀ` when `trans_b` is set.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (br, bc) = self.mat_dims(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        if trans_b {
            let bt = transpose(self.value(b).data(), br, bc);
            matmul_acc(self.value(a).data(), &bt, m, k, n, &mut out);
        } else {
            matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn batch_dims(&self, v: Var) -> Result<(usize, usize, usize), NumericsError> {
        let s = self.shape(v);
        if s.len() != 3 {
            return Err(shape_err("batch_matmul", s, &[]));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Batched `a[B×m×k] · bᵀ` with `b[B×n×k]`.
    pub fn batch_matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ba, m, k) = self.batch_dims(a)?;
        let (bb, n, kb) = self.batch_dims(b)?;
        if ba != bb || k != kb {
            return Err(shape_err("batch_matmul", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; ba * m * n];
        for bi in 0..ba {
            let bt = transpose(&bv[bi * n * k..(bi + 1) * n * k], n, k);
            matmul_acc(
                &av[bi * m * k..(bi + 1) * m * k],
                &bt,
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![ba, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b: true },
            rg,
        ))
    }

    /// Batched `a[B×m×k] · b[B×k×n]` whose reduction over `k` is independent
    /// of the order of the `k` entries. Used for attention-weighted sums so
    /// that permuting keys leaves outputs bitwise unchanged.
    pub fn batch_matmul_order_free(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ba, m, k) = self.batch_dims(a)?;
        let (bb, kb, n) = self.batch_dims(b)?;
        if ba != bb || k != kb {
            return Err(shape_err("batch_matmul", self.shape(a), self.shape(b)));
        }
        let out = bmm_order_free(self.value(a).data(), self.value(b).data(), ba, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![ba, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b: false },
            rg,
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `bias[d]` to every length-`d` slice along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.value(bias).len() != d {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(x, bias), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumericsError> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(NumericsError::Domain { op: "log", value: bad });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn pow_scalar(&mut self, x: Var, exponent: f64) -> Var {
        self.unary(x, |v| v.powf(exponent), Op::PowScalar(x, exponent))
    }

    /// Elementwise Huber-style smooth L1 with switch point `beta`.
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Var {
        self.unary(
            x,
            |v| {
                let a = v.abs();
                if a < beta {
                    0.5 * v * v / beta
                } else {
                    a - 0.5 * beta
                }
            },
            Op::SmoothL1(x, beta),
        )
    }

    /// Softmax along the trailing axis with per-row max subtraction. Row
    /// sums use order-free accumulation, so the result for one entry does not
    /// depend on how the rest of its row is ordered.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap_or(&1);
        let mut data = vec![0.0; t.len()];
        for (src, dst) in t.data().chunks(n.max(1)).zip(data.chunks_mut(n.max(1))) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
            }
            let sum = order_free_sum(dst.iter().copied(), n as f64);
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Normalizes each trailing-axis row to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let t = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = t.len() / d;
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                xhat[r * d + c] = xh;
                out[r * d + c] = g[c] * xh + b[c];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Copies rows (leading-axis slices) in index order.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let m = t.rows();
        let c = t.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(NumericsError::Index {
                op: "gather_rows",
                index: bad,
                extent: m,
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::GatherRows { x, idx }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::EmptyInput { op: "concat_rows" })?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::EmptyInput { op: "concat_cols" })?;
        let (m, _) = self.mat_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pc) = self.mat_dims(p, "concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (m, c) = self.mat_dims(x, "slice_cols")?;
        if start > end || end > c {
            return Err(NumericsError::Index {
                op: "slice_cols",
                index: end,
                extent: c,
            });
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * c + start..r * c + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, w], data)?, Op::SliceCols { x, start, end }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.is_empty() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let value = self.value(x).clone().with_shape(shape.to_vec());
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reduces along `axis`, removing it (a full reduction yields shape `[1]`).
    /// Max routes its gradient to the first maximal element.
    pub fn reduce(&mut self, x: Var, op: ReduceOp, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let len = shape[axis];
        if len == 0 {
            return Err(NumericsError::EmptyInput { op: "reduce" });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if op == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| src[(o * len + l) * inner + i];
                let slot = o * inner + i;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let s: f64 = (0..len).map(at).sum();
                        out[slot] = if op == ReduceOp::Mean { s / len as f64 } else { s };
                    }
                    ReduceOp::Max => {
                        let mut best = 0;
                        for l in 1..len {
                            if at(l) > at(best) {
                                best = l;
                            }
                        }
                        argmax[slot] = best;
                        out[slot] = at(best);
                    }
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Reduce {
                x,
                op,
                outer,
                len,
                inner,
                argmax,
            },
            rg,
        ))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).len();
        if n == 0 {
            return Ok(self.constant(Tensor::scalar(0.0)));
        }
        let flat = self.reshape(x, &[n])?;
        self.reduce(flat, ReduceOp::Sum, 0)
    }

    #[cfg(test)]
    pub(crate) fn broken_square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::BrokenSquare(x))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        self.backward_visits = 0;
        for id in (0..=loss.0).rev() {
            self.backward_visits += 1;
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Collects parameter gradients into store order (zeros for unused ones).
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> GradStore {
        let mut out = GradStore::zeros_like(store);
        for (&id, &var) in &self.params {
            if id.0 < store.len() {
                if let Some(g) = grads.wrt(var) {
                    out.get_mut(id).copy_from_slice(g);
                }
            }
        }
        out
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                acc(*a, &|da| {
                    if *trans_b {
                        matmul_acc(g, bv.data(), m, n, k, da);
                    } else {
                        let bt = transpose(bv.data(), k, n);
                        matmul_acc(g, &bt, m, n, k, da);
                    }
                });
                acc(*b, &|db| {
                    if *trans_b {
                        let gt = transpose(g, m, n);
                        matmul_acc(&gt, av.data(), n, m, k, db);
                    } else {
                        let at = transpose(av.data(), m, k);
                        matmul_acc(&at, g, k, m, n, db);
                    }
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                acc(*a, &|da| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv.data()[bi * k * n..(bi + 1) * k * n];
                        let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            matmul_acc(gb, bb, m, n, k, dab);
                        } else {
                            matmul_acc(gb, &transpose(bb, k, n), m, n, k, dab);
                        }
                    }
                });
                acc(*b, &|db| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            matmul_acc(&transpose(gb, m, n), ab, n, m, k, dbb);
                        } else {
                            matmul_acc(&transpose(ab, m, k), gb, k, m, n, dbb);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*bias, &|d| {
                    let w = d.len();
                    for row in g.chunks(w.max(1)) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d += f * g)),
            Op::AddScalar(x) => acc(*x, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / xv[i];
                    }
                });
            }
            Op::Exp(x) => acc(*x, &|d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i];
                }
            }),
            Op::Sigmoid(x) => acc(*x, &|d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                acc(*x, &|d| {
                    for i in 0..d.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::PowScalar(x, e) => {
                let xv = self.value(*x).data();
                acc(*x, &|d| {
                    if *e == 0.0 {
                        return;
                    }
                    for i in 0..d.len() {
                        d[i] += g[i] * e * xv[i].powf(e - 1.0);
                    }
                });
            }
            Op::SmoothL1(x, beta) => {
                let xv = self.value(*x).data();
                acc(*x, &|d| {
                    for i in 0..d.len() {
                        let v = xv[i];
                        let slope = if v.abs() < *beta { v / beta } else { v.signum() };
                        d[i] += g[i] * slope;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                acc(*x, &|d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            drow[i] += yrow[i] * (grow[i] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let dm = gv.len();
                acc(*x, &|d| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let off = r * dm;
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..dm {
                            let dxh = g[off + c] * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[off + c];
                        }
                        mean_dxh /= dm as f64;
                        mean_dxh_xh /= dm as f64;
                        for c in 0..dm {
                            let dxh = g[off + c] * gv[c];
                            d[off + c] += is * (dxh - mean_dxh - xhat[off + c] * mean_dxh_xh);
                        }
                    }
                });
                acc(*gain, &|d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[i % dm] += gi * xhat[i];
                    }
                });
                acc(*bias, &|d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[i % dm] += gi;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                acc(*x, &|d| {
                    for (slot, &src) in idx.iter().enumerate() {
                        let grow = &g[slot * c..(slot + 1) * c];
                        d[src * c..(src + 1) * c].iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let slice = &g[offset..offset + n];
                    acc(p, &|d| d.iter_mut().zip(slice).for_each(|(d, g)| *d += g));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let m = node.value.shape()[0];
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    acc(p, &|d| {
                        for r in 0..m {
                            for c in 0..w {
                                d[r * w + c] += g[r * total + col + c];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::SliceCols { x, start, end } => {
                let c = self.value(*x).shape()[1];
                let w = end - start;
                acc(*x, &|d| {
                    for (r, grow) in g.chunks(w.max(1)).enumerate() {
                        for (i, gv) in grow.iter().enumerate() {
                            d[r * c + start + i] += gv;
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::Reduce {
                x,
                op,
                outer,
                len,
                inner,
                argmax,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &|d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let gs = g[o * inner + i];
                            match op {
                                ReduceOp::Sum => {
                                    for l in 0..len {
                                        d[(o * len + l) * inner + i] += gs;
                                    }
                                }
                                ReduceOp::Mean => {
                                    for l in 0..len {
                                        d[(o * len + l) * inner + i] += gs / len as f64;
                                    }
                                }
                                ReduceOp::Max => {
                                    let l = argmax[o * inner + i];
                                    d[(o * len + l) * inner + i] += gs;
                                }
                            }
                        }
                    }
                });
            }
            #[cfg(test)]
            Op::BrokenSquare(x) => {
                let xv = self.value(*x).data();
                // deliberately wrong: derivative of x² reported as x
                acc(*x, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * xv[i];
                    }
                });
            }
        }
    }
}
