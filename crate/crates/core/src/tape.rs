//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! The tape records primitive applications in forward order and replays them
//! in reverse to accumulate vector-Jacobian products. Values are immutable
//! once recorded, so [`Tape::backward`] may run any number of times and
//! always produces bit-identical gradients.
//!
//! Shape agreement between operands is an internal invariant: builders panic
//! on mismatch. Public modules validate their inputs before recording ops and
//! surface contract errors through [`crate::error::Error`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::special;
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<R: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, R),
    AddScalar(NodeId, R),
    Relu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    Digamma(NodeId),
    LogGamma(NodeId),
    Abs(NodeId),
    Clamp(NodeId, R, R),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    MulCols(NodeId, NodeId),
    DivCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
}

#[derive(Debug)]
struct Node<R: Scalar> {
    op: Op<R>,
    value: Tensor<R>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients<R: Scalar> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Scalar> Gradients<R> {
    /// Gradient of the loss with respect to `id`, if any flowed to it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<R>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a registered trainable node; exact zeros when the node
    /// did not participate in the loss.
    pub fn wrt(&self, id: NodeId) -> &Tensor<R> {
        self.grads[id.0]
            .as_ref()
            .expect("wrt() requires a registered trainable node")
    }
}

/// Wengert tape: records forward primitives, replays them in reverse.
pub struct Tape<R: Scalar> {
    nodes: Vec<Node<R>>,
    trainable: Vec<NodeId>,
}

impl<R: Scalar> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Scalar> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            trainable: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<R>, value: Tensor<R>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Register a trainable leaf; it will receive a gradient (exact zeros if
    /// it does not participate in the loss).
    pub fn param(&mut self, value: Tensor<R>) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.trainable.push(id);
        id
    }

    /// Non-trainable leaf (inputs, frozen weights, label constants).
    pub fn constant(&mut self, value: Tensor<R>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Nodes registered as trainable, in registration order.
    pub fn trainable_nodes(&self) -> &[NodeId] {
        &self.trainable
    }

    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    // ---- elementwise and binary primitives ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, n) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![R::zero(); m * n];
        matmul_into(self.value(a).values(), self.value(b).values(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out).expect("matmul output shape");
        self.push(Op::MatMul(a, b), t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "add");
        let t = self.value(a).zip(self.value(b), |x, y| x + y).unwrap();
        self.push(Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "sub");
        let t = self.value(a).zip(self.value(b), |x, y| x - y).unwrap();
        self.push(Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "mul");
        let t = self.value(a).zip(self.value(b), |x, y| x * y).unwrap();
        self.push(Op::Mul(a, b), t)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "div");
        let t = self.value(a).zip(self.value(b), |x, y| x / y).unwrap();
        self.push(Op::Div(a, b), t)
    }

    /// Row-broadcast bias add: `a` is `m x n`, `bias` is `n`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(bias).numel(), n, "add_bias: bias length");
        let mut out = Vec::with_capacity(m * n);
        let av = self.value(a).values();
        let bv = self.value(bias).values();
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + bv[j]);
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out).unwrap();
        self.push(Op::AddBias(a, bias), t)
    }

    pub fn scale(&mut self, a: NodeId, c: R) -> NodeId {
        let t = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), t)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: R) -> NodeId {
        let t = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), t)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|x| x.max(R::zero()));
        self.push(Op::Relu(a), t)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(softplus);
        self.push(Op::Softplus(a), t)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), t)
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        let av = self.value(a).values();
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().fold(R::neg_infinity(), |acc, &v| acc.max(v));
            let mut denom = R::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                denom = denom + e;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] / denom;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out).unwrap();
        self.push(Op::SoftmaxRows(a), t)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|x| x.ln());
        self.push(Op::Ln(a), t)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), t)
    }

    /// Elementwise digamma; arguments must be strictly positive.
    pub fn digamma(&mut self, a: NodeId) -> NodeId {
        let t = self
            .value(a)
            .map(|x| special::digamma(x).unwrap_or(R::nan()));
        self.push(Op::Digamma(a), t)
    }

    /// Elementwise log-gamma; arguments must be strictly positive.
    pub fn log_gamma(&mut self, a: NodeId) -> NodeId {
        let t = self
            .value(a)
            .map(|x| special::log_gamma(x).unwrap_or(R::nan()));
        self.push(Op::LogGamma(a), t)
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|x| x.abs());
        self.push(Op::Abs(a), t)
    }

    /// Clamp to `[lo, hi]`; gradient passes only where unclamped.
    pub fn clamp(&mut self, a: NodeId, lo: R, hi: R) -> NodeId {
        let t = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(Op::Clamp(a, lo, hi), t)
    }

    /// Sum of all entries to a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self
            .value(a)
            .values()
            .iter()
            .fold(R::zero(), |acc, &v| acc + v);
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Mean of all entries to a scalar.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        assert!(n > 0, "mean of empty tensor");
        let s = self
            .value(a)
            .values()
            .iter()
            .fold(R::zero(), |acc, &v| acc + v);
        let t = Tensor::scalar(s / R::c(n as f64));
        self.push(Op::Mean(a), t)
    }

    /// Row sums of an `m x n` tensor, producing an `m`-vector.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        assert_eq!(self.shape(a).len(), 2, "sum_rows needs a rank-2 tensor");
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        let av = self.value(a).values();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            out.push(
                av[i * n..(i + 1) * n]
                    .iter()
                    .fold(R::zero(), |acc, &v| acc + v),
            );
        }
        self.push(Op::SumRows(a), Tensor::vector(out))
    }

    /// Column-broadcast multiply: row `i` of `a` scaled by `v[i]`.
    pub fn mul_cols(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(v).numel(), m, "mul_cols: vector length");
        let av = self.value(a).values();
        let vv = self.value(v).values();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] * vv[i]);
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out).unwrap();
        self.push(Op::MulCols(a, v), t)
    }

    /// Column-broadcast divide: row `i` of `a` divided by `v[i]`.
    pub fn div_cols(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(v).numel(), m, "div_cols: vector length");
        let av = self.value(a).values();
        let vv = self.value(v).values();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] / vv[i]);
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out).unwrap();
        self.push(Op::DivCols(a, v), t)
    }

    /// Concatenate rank-2 tensors along rows.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut vals = Vec::new();
        for &p in parts {
            assert_eq!(self.value(p).cols(), n, "concat_rows: column mismatch");
            assert_eq!(self.shape(p).len(), 2, "concat_rows needs rank-2 parts");
            rows += self.value(p).rows();
            vals.extend_from_slice(self.value(p).values());
        }
        let t = Tensor::new(vec![rows, n], vals).unwrap();
        self.push(Op::ConcatRows(parts.to_vec()), t)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss node.
    ///
    /// Fails with a contract error for non-scalar losses and with a numeric
    /// error naming the first node whose forward value is non-finite.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<R>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.value.first_nonfinite().is_some() {
                return Err(Error::Numeric {
                    node: i,
                    message: "non-finite forward value".into(),
                });
            }
        }

        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), R::one()));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // Non-participating trainables get exact zeros.
        for &p in &self.trainable {
            if grads[p.0].is_none() {
                grads[p.0] = Some(Tensor::zeros(self.shape(p)));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<R>>], id: NodeId, contrib: Tensor<R>) {
        match &mut grads[id.0] {
            Some(existing) => {
                let ev = existing.values_mut();
                for (e, c) in ev.iter_mut().zip(contrib.values()) {
                    *e = *e + *c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_op(&self, idx: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        let gv = g.values();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                let mut da = vec![R::zero(); m * k];
                let mut db = vec![R::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = R::zero();
                        for j in 0..n {
                            acc = acc + gv[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = R::zero();
                        for i in 0..m {
                            acc = acc + av[i * k + p] * gv[i * n + j];
                        }
                        db[p * n + j] = acc;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let da = g.zip(self.value(*b), |x, y| x * y).unwrap();
                let db = g.zip(self.value(*a), |x, y| x * y).unwrap();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                let da = g.zip(bv, |x, y| x / y).unwrap();
                let out = &self.nodes[idx].value;
                let db_partial = g.zip(out, |x, c| x * c).unwrap();
                let db = db_partial.zip(bv, |x, y| -(x / y)).unwrap();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::AddBias(a, bias) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let mut db = vec![R::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] = db[j] + gv[i * n + j];
                    }
                }
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *bias, Tensor::vector(db));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let da = g
                    .zip(self.value(*a), |x, v| {
                        if v > R::zero() {
                            x
                        } else {
                            R::zero()
                        }
                    })
                    .unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::Softplus(a) => {
                let da = g.zip(self.value(*a), |x, v| x * sigmoid(v)).unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[idx].value;
                let da = g.zip(out, |x, y| x * y * (R::one() - y)).unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let out = &self.nodes[idx].value;
                let (m, n) = (out.rows(), out.cols());
                let yv = out.values();
                let mut da = vec![R::zero(); m * n];
                for i in 0..m {
                    let mut dot = R::zero();
                    for j in 0..n {
                        dot = dot + gv[i * n + j] * yv[i * n + j];
                    }
                    for j in 0..n {
                        da[i * n + j] = yv[i * n + j] * (gv[i * n + j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da).unwrap());
            }
            Op::Ln(a) => {
                let da = g.zip(self.value(*a), |x, v| x / v).unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::Exp(a) => {
                let out = &self.nodes[idx].value;
                let da = g.zip(out, |x, y| x * y).unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::Digamma(a) => {
                let da = g
                    .zip(self.value(*a), |x, v| {
                        x * special::trigamma(v).unwrap_or(R::nan())
                    })
                    .unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::LogGamma(a) => {
                let da = g
                    .zip(self.value(*a), |x, v| {
                        x * special::digamma(v).unwrap_or(R::nan())
                    })
                    .unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::Abs(a) => {
                let da = g
                    .zip(self.value(*a), |x, v| {
                        if v > R::zero() {
                            x
                        } else if v < R::zero() {
                            -x
                        } else {
                            R::zero()
                        }
                    })
                    .unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let da = g
                    .zip(self.value(*a), |x, v| {
                        if v >= lo && v <= hi {
                            x
                        } else {
                            R::zero()
                        }
                    })
                    .unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let s = gv[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let s = gv[0] / R::c(n as f64);
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::SumRows(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let mut da = Vec::with_capacity(m * n);
                for i in 0..m {
                    for _ in 0..n {
                        da.push(gv[i]);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), da).unwrap());
            }
            Op::MulCols(a, v) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let av = self.value(*a).values();
                let vv = self.value(*v).values();
                let mut da = Vec::with_capacity(m * n);
                let mut dv = vec![R::zero(); m];
                for i in 0..m {
                    for j in 0..n {
                        da.push(gv[i * n + j] * vv[i]);
                        dv[i] = dv[i] + gv[i * n + j] * av[i * n + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), da).unwrap());
                self.accumulate(grads, *v, Tensor::vector(dv));
            }
            Op::DivCols(a, v) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let out = self.nodes[idx].value.values();
                let vv = self.value(*v).values();
                let mut da = Vec::with_capacity(m * n);
                let mut dv = vec![R::zero(); m];
                for i in 0..m {
                    for j in 0..n {
                        da.push(gv[i * n + j] / vv[i]);
                        dv[i] = dv[i] - gv[i * n + j] * out[i * n + j] / vv[i];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), da).unwrap());
                self.accumulate(grads, *v, Tensor::vector(dv));
            }
            Op::ConcatRows(parts) => {
                let n = self.nodes[idx].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let slice = gv[offset * n..(offset + rows) * n].to_vec();
                    self.accumulate(
                        grads,
                        p,
                        Tensor::new(self.shape(p).to_vec(), slice).unwrap(),
                    );
                    offset += rows;
                }
            }
        }
    }
}

/// Run the reverse sweep for a recorded computation.
pub fn forward_and_backward<R: Scalar>(tape: &Tape<R>, loss: NodeId) -> Result<Gradients<R>> {
    tape.backward(loss)
}

fn softplus<R: Scalar>(x: R) -> R {
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<R: Scalar>(x: R) -> R {
    if x >= R::zero() {
        (R::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}
