//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probabilities entering `log` and leaving `sigmoid` are clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Constant,
    Variable,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul,
    AddScalar,
    Pow,
    Log,
    Exp,
    Sigmoid,
    Relu,
    Gelu,
    Softmax,
    Concat,
    GatherRows,
    SliceCols,
    Reshape,
    Sum,
    Mean,
    Transpose,
    LayerNorm,
    StraightThrough,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, T),
    AddScalar(Var),
    Pow(Var, T),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    LayerNorm(Var),
    StraightThrough { soft: Var },
}

#[derive(Clone, Debug)]
struct Node<T> {
    kind: OpKind,
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// How the right operand of an elementwise binary op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if a.rank() == 2 && b.rank() == 2 {
        if b.shape() == [1, 1] {
            return Ok(Broadcast::Scalar);
        }
        if b.rows() == 1 && b.cols() == a.cols() {
            return Ok(Broadcast::Row);
        }
    }
    Err(Error::shape(op, a.shape(), b.shape()))
}

fn binary_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, bc: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
    match bc {
        Broadcast::Same => a.zip_map(b, f),
        Broadcast::Scalar => {
            let s = b.item();
            a.map(|x| f(x, s))
        }
        Broadcast::Row => {
            let cols = a.cols();
            let mut out = a.clone();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                *v = f(*v, b.data()[k % cols]);
            }
            out
        }
    }
}

/// Sums a full-shape gradient down to the broadcast operand's shape.
fn reduce_broadcast<T: Scalar>(grad: &Tensor<T>, bc: Broadcast, target: &Tensor<T>) -> Tensor<T> {
    match bc {
        Broadcast::Same => grad.clone(),
        Broadcast::Scalar => Tensor::scalar(grad.sum()),
        Broadcast::Row => {
            let cols = grad.cols();
            let mut out = Tensor::zeros_like(target);
            for (k, &g) in grad.data().iter().enumerate() {
                out.data_mut()[k % cols] += g;
            }
            out
        }
    }
}

fn sigmoid_raw<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = x.clone();
    let (outer, inner, stride_o, stride_i) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
    let d = out.data_mut();
    for o in 0..outer {
        let base = o * stride_o;
        let mut max = T::neg_infinity();
        for i in 0..inner {
            max = max.max(d[base + i * stride_i]);
        }
        let mut total = T::zero();
        for i in 0..inner {
            let e = (d[base + i * stride_i] - max).exp();
            d[base + i * stride_i] = e;
            total += e;
        }
        for i in 0..inner {
            d[base + i * stride_i] /= total;
        }
    }
    out
}

fn layer_norm_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.rows(), x.cols());
    let n = T::from_usize(c).unwrap();
    let mut out = x.clone();
    let d = out.data_mut();
    for i in 0..r {
        let row = &mut d[i * c..(i + 1) * c];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Computation graph for one forward pass. Rebuilt every training step.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].kind
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, kind: OpKind, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            kind,
            op,
            value,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(OpKind::Constant, Op::Leaf, t, false)
    }

    /// Input whose gradient is tracked (used for gradient checks on inputs).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(OpKind::Variable, Op::Leaf, t, true)
    }

    /// Leaf for a learnable parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(OpKind::Param, Op::Leaf, store.get(id).clone(), true);
        self.nodes[v.0].param = Some(id);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(OpKind::MatMul, Op::MatMul(a, b), value, rg))
    }

    fn binary(&mut self, kind: OpKind, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let bc = broadcast_kind(name, va, vb)?;
        let value = binary_map(va, vb, bc, f);
        let rg = self.rg(a) || self.rg(b);
        let op = match kind {
            OpKind::Add => Op::Add(a, b),
            OpKind::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(kind, op, value, rg))
    }

    /// Elementwise sum; `b` may be a `1 x cols` row or a `1 x 1` scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, "sub", a, b, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product with the same broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(OpKind::ScalarMul, Op::ScalarMul(a, s), value, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(OpKind::AddScalar, Op::AddScalar(a), value, rg)
    }

    /// `s - a`, elementwise.
    pub fn rsub_scalar(&mut self, s: T, a: Var) -> Var {
        let neg = self.scalar_mul(a, -T::one());
        self.add_scalar(neg, s)
    }

    /// Elementwise `a^exponent` for a constant exponent; inputs must be positive
    /// unless the exponent is a non-negative integer.
    pub fn pow(&mut self, a: Var, exponent: T) -> Var {
        let value = self.value(a).map(|x| {
            if exponent == T::zero() {
                T::one()
            } else {
                x.powf(exponent)
            }
        });
        let rg = self.rg(a);
        self.push(OpKind::Pow, Op::Pow(a, exponent), value, rg)
    }

    /// Natural log of a probability, input clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn log(&mut self, a: Var) -> Var {
        let (lo, hi) = (T::lit(PROB_EPS), T::one() - T::lit(PROB_EPS));
        let value = self.value(a).map(|x| x.max(lo).min(hi).ln());
        let rg = self.rg(a);
        self.push(OpKind::Log, Op::Log(a), value, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        let rg = self.rg(a);
        self.push(OpKind::Exp, Op::Exp(a), value, rg)
    }

    /// Logistic sigmoid, output clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (lo, hi) = (T::lit(PROB_EPS), T::one() - T::lit(PROB_EPS));
        let value = self.value(a).map(|x| sigmoid_raw(x).max(lo).min(hi));
        let rg = self.rg(a);
        self.push(OpKind::Sigmoid, Op::Sigmoid(a), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(OpKind::Relu, Op::Relu(a), value, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(OpKind::Gelu, Op::Gelu(a), value, rg)
    }

    /// Softmax along `axis` (1: within each row, 0: within each column).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.value(a).expect_matrix("softmax")?;
        if axis > 1 {
            return Err(Error::contract(format!("softmax axis {axis} out of range")));
        }
        let value = softmax_forward(self.value(a), axis);
        let rg = self.rg(a);
        Ok(self.push(OpKind::Softmax, Op::Softmax(a, axis), value, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let first = self.value(parts[0]).clone();
        first.expect_matrix("concat")?;
        let value = if axis == 0 {
            let cols = first.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let t = self.value(p);
                if t.rank() != 2 || t.cols() != cols {
                    return Err(Error::shape("concat", first.shape(), t.shape()));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, cols, data)?
        } else if axis == 1 {
            let rows = first.rows();
            let mut cols = 0;
            for &p in parts {
                let t = self.value(p);
                if t.rank() != 2 || t.rows() != rows {
                    return Err(Error::shape("concat", first.shape(), t.shape()));
                }
                cols += t.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        } else {
            return Err(Error::contract(format!("concat axis {axis} out of range")));
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(OpKind::Concat, Op::Concat(parts.to_vec(), axis), value, rg))
    }

    /// Rows of `a` at `indices` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.expect_matrix("gather_rows")?;
        if indices.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape("gather_rows", t.shape(), &[i]));
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::matrix(indices.len(), cols, data)?;
        let rg = self.rg(a);
        Ok(self.push(OpKind::GatherRows, Op::GatherRows(a, indices.to_vec()), value, rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.expect_matrix("slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::shape("slice_cols", t.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let value = Tensor::matrix(rows, len, data)?;
        let rg = self.rg(a);
        Ok(self.push(OpKind::SliceCols, Op::SliceCols(a, start), value, rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshape(vec![rows, cols])?;
        let rg = self.rg(a);
        Ok(self.push(OpKind::Reshape, Op::Reshape(a), value, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(OpKind::Sum, Op::Sum(a), value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / T::from_usize(t.len()).unwrap());
        let rg = self.rg(a);
        self.push(OpKind::Mean, Op::Mean(a), value, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.value(a).expect_matrix("transpose")?;
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(OpKind::Transpose, Op::Transpose(a), value, rg))
    }

    /// Per-row normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.value(a).expect_matrix("layer_norm")?;
        let value = layer_norm_forward(self.value(a));
        let rg = self.rg(a);
        Ok(self.push(OpKind::LayerNorm, Op::LayerNorm(a), value, rg))
    }

    /// Forward value of `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Var, soft: Var) -> Result<Var> {
        if self.shape(hard) != self.shape(soft) {
            return Err(Error::shape("straight_through", self.shape(hard), self.shape(soft)));
        }
        let value = self.value(hard).clone();
        let rg = self.rg(soft);
        Ok(self.push(OpKind::StraightThrough, Op::StraightThrough { soft }, value, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(1, 1).reshape(self.shape(loss).to_vec())?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let acc = |v: Var, delta: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_nt(self.value(*b))?, grads);
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).matmul_tn(g)?, grads);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let bc = broadcast_kind("add", self.value(*a), self.value(*b))?;
                acc(*a, g.clone(), grads);
                if self.rg(*b) {
                    let mut gb = reduce_broadcast(g, bc, self.value(*b));
                    if matches!(node.op, Op::Sub(..)) {
                        gb = gb.scale(-T::one());
                    }
                    acc(*b, gb, grads);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let bc = broadcast_kind("mul", va, vb)?;
                if self.rg(*a) {
                    acc(*a, binary_map(g, vb, bc, |x, y| x * y), grads);
                }
                if self.rg(*b) {
                    let full = g.zip_map(va, |x, y| x * y);
                    acc(*b, reduce_broadcast(&full, bc, vb), grads);
                }
            }
            Op::ScalarMul(a, s) => acc(*a, g.scale(*s), grads),
            Op::AddScalar(a) => acc(*a, g.clone(), grads),
            Op::Pow(a, c) => {
                let c = *c;
                let d = if c == T::zero() {
                    Tensor::zeros_like(g)
                } else {
                    let x = self.value(*a);
                    let local = x.map(|v| c * v.powf(c - T::one()));
                    g.zip_map(&local, |x, y| x * y)
                };
                acc(*a, d, grads);
            }
            Op::Log(a) => {
                let (lo, hi) = (T::lit(PROB_EPS), T::one() - T::lit(PROB_EPS));
                let x = self.value(*a);
                let d = g.zip_map(x, |gv, xv| if xv > lo && xv < hi { gv / xv } else { T::zero() });
                acc(*a, d, grads);
            }
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y), grads),
            Op::Sigmoid(a) => {
                let (lo, hi) = (T::lit(PROB_EPS), T::one() - T::lit(PROB_EPS));
                let d = g.zip_map(&node.value, |gv, s| {
                    if s > lo && s < hi {
                        gv * s * (T::one() - s)
                    } else {
                        T::zero()
                    }
                });
                acc(*a, d, grads);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }), grads);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |gv, xv| gv * gelu_grad(xv)), grads);
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut d = Tensor::zeros_like(y);
                let (outer, inner, so, si) = if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                for o in 0..outer {
                    let base = o * so;
                    let mut dot = T::zero();
                    for i in 0..inner {
                        let k = base + i * si;
                        dot += g.data()[k] * y.data()[k];
                    }
                    for i in 0..inner {
                        let k = base + i * si;
                        d.data_mut()[k] = y.data()[k] * (g.data()[k] - dot);
                    }
                }
                acc(*a, d, grads);
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let n = t.len();
                        if self.rg(p) {
                            let piece = Tensor::new(t.shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                            acc(p, piece, grads);
                        }
                        offset += n;
                    }
                } else {
                    let rows = g.rows();
                    let mut col = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let w = t.cols();
                        if self.rg(p) {
                            let mut data = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                data.extend_from_slice(&g.row_slice(r)[col..col + w]);
                            }
                            acc(p, Tensor::matrix(rows, w, data)?, grads);
                        }
                        col += w;
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                let src = self.value(*a);
                let cols = src.cols();
                let mut d = Tensor::zeros_like(src);
                for (k, &i) in indices.iter().enumerate() {
                    let row = &g.data()[k * cols..(k + 1) * cols];
                    for (dst, &v) in d.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                        *dst += v;
                    }
                }
                acc(*a, d, grads);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (rows, cols, w) = (src.rows(), src.cols(), g.cols());
                let mut d = Tensor::zeros_like(src);
                for r in 0..rows {
                    d.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row_slice(r));
                }
                acc(*a, d, grads);
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                acc(*a, g.reshape(shape)?, grads);
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                acc(*a, Tensor::new(t.shape().to_vec(), vec![g.item(); t.len()])?, grads);
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = g.item() / T::from_usize(t.len()).unwrap();
                acc(*a, Tensor::new(t.shape().to_vec(), vec![v; t.len()])?, grads);
            }
            Op::Transpose(a) => acc(*a, g.transpose(), grads),
            Op::LayerNorm(a) => {
                let xhat = &node.value;
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let n = T::from_usize(c).unwrap();
                let mut d = Tensor::zeros_like(x);
                for i in 0..r {
                    let xr = x.row_slice(i);
                    let mean = xr.iter().copied().sum::<T>() / n;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let inv = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
                    let gr = g.row_slice(i);
                    let hr = xhat.row_slice(i);
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgh = gr.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for k in 0..c {
                        d.data_mut()[i * c + k] = inv * (gr[k] - mg - hr[k] * mgh);
                    }
                }
                acc(*a, d, grads);
            }
            Op::StraightThrough { soft } => acc(*soft, g.clone(), grads),
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, or zeros when `v` does not reach the loss.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros_like(graph.value(v)),
        }
    }

    /// Gradients for every parameter of `store`, in store order. Parameters
    /// absent from the graph or unreachable from the loss get zeros.
    pub fn for_params(&self, graph: &Graph<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| {
                match graph.param_vars.get(id.0).copied().flatten() {
                    Some(v) => self.wrt(graph, v),
                    None => Tensor::zeros_like(store.get(id)),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, d: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let a = g.constant(t(2, 3, &[1.0, -2.0, 0.5, 3.0, 4.0, 7.0]));
        let out = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(out), g.value(a));

        let x = g.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = g.constant(t(2, 1, &[5.0, 6.0]));
        let xy = g.matmul(x, y).unwrap();
        assert_eq!(g.value(xy).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        match g.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::<f64>::zeros(1, 3));
        let s = g.softmax(z, 1).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gradient_is_ones_and_square_gradient_is_doubled() {
        let mut g = Graph::new();
        let x = g.variable(t(2, 2, &[0.3, -1.0, 2.0, 5.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.variable(t(1, 2, &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::<f64>::ones(2, 2));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add("used", Tensor::ones(1, 2));
        let unused = store.add("unused", Tensor::ones(3, 1));
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let _other = g.param(&store, unused);
        let s = g.sum(u);
        let grads = g.backward(s).unwrap().for_params(&g, &store);
        assert_eq!(grads[0].data(), &[1.0, 1.0]);
        assert_eq!(grads[1], Tensor::zeros(3, 1));
    }

    #[test]
    fn straight_through_uses_hard_value_and_soft_gradient() {
        let mut g = Graph::new();
        let hard = g.constant(t(1, 2, &[1.0, 0.0]));
        let soft = g.variable(t(1, 2, &[0.7, 0.3]));
        let st = g.straight_through(hard, soft).unwrap();
        assert_eq!(g.value(st).data(), &[1.0, 0.0]);
        let w = g.constant(t(1, 2, &[2.0, -3.0]));
        let prod = g.mul(st, w).unwrap();
        let s = g.sum(prod);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, soft).data(), &[2.0, -3.0]);
    }

    #[test]
    fn row_broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::<f64>::ones(3, 2));
        let b = g.variable(t(1, 2, &[1.0, 2.0]));
        let y = g.add(x, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, b).data(), &[3.0, 3.0]);
    }
}
