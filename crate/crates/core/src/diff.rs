//! Reverse-mode differentiation on a flat tape of registered primitives.
//!
//! A [`Graph`] is rebuilt for every loss evaluation: leaves are bound from
//! parameter values or constants, ops append nodes in topological order, and
//! [`Graph::backward`] walks the tape in reverse. All shapes are dense and
//! row-major; batched 3-d tensors are (batch, rows, cols).
//!
//! Registered primitives and their adjoints live in the single `Op` enum so
//! the finite-difference check in [`crate::verify`] can enumerate them.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    // unary elementwise
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Clamp(Var, f64, f64),
    // binary elementwise, equal shapes
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    // broadcasting
    AddRow(Var, Var),
    MulRow(Var, Var),
    ColScale(Var, Var),
    Tile(Var, usize),
    // linear maps
    Affine { x: Var, w: Var, b: Var },
    Matmul(Var, Var),
    Bmm(Var, Var),
    BmmT(Var, Var),
    // reductions and row-wise normalizers
    Sum(Var),
    RowSums(Var),
    LogSumExpRows(Var),
    LogSoftmaxRows(Var),
    // densities and matrix functionals
    GaussianLogDensity { x: Var, mean: Var, logstd: Var },
    TraceExpm(Var),
    LogAbsDet(Var),
    // structural
    ConcatCols(Vec<Var>),
    ColSlice { x: Var, from: usize, to: usize },
    PlaneSlice { x: Var, index: usize },
    GatherRows { x: Var, indices: Vec<usize> },
    Reshape(Var),
    Detach(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Exp(_) => "exp",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Clamp(..) => "clamp",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::ColScale(..) => "col_scale",
            Op::Tile(..) => "tile",
            Op::Affine { .. } => "affine",
            Op::Matmul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::BmmT(..) => "bmm_t",
            Op::Sum(_) => "sum",
            Op::RowSums(_) => "row_sums",
            Op::LogSumExpRows(_) => "log_sum_exp_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::GaussianLogDensity { .. } => "gaussian_log_density",
            Op::TraceExpm(_) => "trace_expm",
            Op::LogAbsDet(_) => "log_abs_det",
            Op::ConcatCols(_) => "concat_cols",
            Op::ColSlice { .. } => "col_slice",
            Op::PlaneSlice { .. } => "plane_slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::Detach(_) => "detach",
        }
    }
}

struct Node<S> {
    op: Op,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Tape of values and operations for one loss evaluation.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `v`; zeros if the node was not reached.
    pub fn get(&self, g: &Graph<S>, v: Var) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&g.nodes[v.0].value.shape),
        }
    }

    pub fn is_zero(&self, v: Var) -> bool {
        match &self.grads[v.0] {
            None => true,
            Some(t) => t.data.iter().all(|x| *x == S::zero()),
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, op: Op, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar_const(&mut self, v: S) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(S) -> S) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.nodes[x.0].requires_grad;
        self.push(op, value, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid_scalar)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus_scalar)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let a = S::from_f64(alpha);
        self.unary(x, Op::LeakyRelu(x, alpha), move |v| if v > S::zero() { v } else { a * v })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        self.unary(x, Op::Scale(x, c), move |v| cs * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        self.unary(x, Op::AddScalar(x, c), move |v| cs + v)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let l = S::from_f64(lo);
        let h = S::from_f64(hi);
        self.unary(x, Op::Clamp(x, lo, hi), move |v| v.max(l).min(h))
    }

    /// x * sigmoid(x), the activation used by the learned networks.
    pub fn swish(&mut self, x: Var) -> Var {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(S, S) -> S) -> Var {
        assert_eq!(self.nodes[a.0].value.shape, self.nodes[b.0].value.shape, "{} shape mismatch", op.name());
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(self.nodes[b.0].value.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let rg = self.any_grad(&[a, b]);
        self.push(op, Tensor::new(data, shape), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-d row vector to every row of an (n, d) matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(self.value(b).len(), d, "add_row width mismatch");
        let mut out = self.value(x).data.clone();
        let bv = &self.nodes[b.0].value.data;
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += bv[j];
            }
        }
        let shape = self.value(x).shape.clone();
        let rg = self.any_grad(&[x, b]);
        self.push(Op::AddRow(x, b), Tensor::new(out, shape), rg)
    }

    /// Multiplies every row of an (n, d) matrix elementwise by a length-d vector.
    pub fn mul_row(&mut self, x: Var, b: Var) -> Var {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(self.value(b).len(), d, "mul_row width mismatch");
        let mut out = self.value(x).data.clone();
        let bv = &self.nodes[b.0].value.data;
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] *= bv[j];
            }
        }
        let shape = self.value(x).shape.clone();
        let rg = self.any_grad(&[x, b]);
        self.push(Op::MulRow(x, b), Tensor::new(out, shape), rg)
    }

    /// Scales row i of an (n, d) matrix by c[i].
    pub fn col_scale(&mut self, x: Var, c: Var) -> Var {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(self.value(c).len(), n, "col_scale length mismatch");
        let mut out = self.value(x).data.clone();
        let cv = &self.nodes[c.0].value.data;
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] *= cv[i];
            }
        }
        let shape = self.value(x).shape.clone();
        let rg = self.any_grad(&[x, c]);
        self.push(Op::ColScale(x, c), Tensor::new(out, shape), rg)
    }

    /// Repeats a tensor n times along a new leading axis.
    pub fn tile(&mut self, x: Var, n: usize) -> Var {
        let v = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(v.len() * n);
        for _ in 0..n {
            data.extend_from_slice(&v.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&v.shape);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Tile(x, n), Tensor::new(data, shape), rg)
    }

    /// x @ w + b row-wise: x (n, i), w (i, o), b (o).
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let n = self.value(x).rows();
        let i = self.value(x).cols();
        let (wi, wo) = (self.value(w).rows(), self.value(w).cols());
        assert_eq!(i, wi, "affine inner dim");
        assert_eq!(self.value(b).len(), wo, "affine bias dim");
        let mut out = vec![S::zero(); n * wo];
        S::gemm(n, i, wo, S::one(), &self.value(x).data, &self.value(w).data, S::zero(), &mut out);
        let bv = &self.nodes[b.0].value.data;
        for r in 0..n {
            for c in 0..wo {
                out[r * wo + c] += bv[c];
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        self.push(Op::Affine { x, w, b }, Tensor::new(out, vec![n, wo]), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, n) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, k2, "matmul inner dim");
        let out = tensor::matmul(m, k, n, &self.value(a).data, &self.value(b).data);
        let rg = self.any_grad(&[a, b]);
        self.push(Op::Matmul(a, b), Tensor::new(out, vec![m, n]), rg)
    }

    /// Batched matmul: a (n, p, q) @ b (n, q, r) -> (n, p, r).
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "bmm batch dim");
        assert_eq!(sa[2], sb[1], "bmm inner dim");
        let (n, p, q, r) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); n * p * r];
        for e in 0..n {
            S::gemm(
                p,
                q,
                r,
                S::one(),
                &self.value(a).data[e * p * q..(e + 1) * p * q],
                &self.value(b).data[e * q * r..(e + 1) * q * r],
                S::zero(),
                &mut out[e * p * r..(e + 1) * p * r],
            );
        }
        let rg = self.any_grad(&[a, b]);
        self.push(Op::Bmm(a, b), Tensor::new(out, vec![n, p, r]), rg)
    }

    /// Batched matmul with transposed second factor:
    /// a (n, p, q) @ b (n, r, q)^T -> (n, p, r).
    pub fn bmm_t(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "bmm_t batch dim");
        assert_eq!(sa[2], sb[2], "bmm_t inner dim");
        let (n, p, q, r) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![S::zero(); n * p * r];
        for e in 0..n {
            let av = &self.value(a).data[e * p * q..(e + 1) * p * q];
            let bv = &self.value(b).data[e * r * q..(e + 1) * r * q];
            let o = &mut out[e * p * r..(e + 1) * p * r];
            for i in 0..p {
                for j in 0..r {
                    let mut acc = S::zero();
                    for l in 0..q {
                        acc += av[i * q + l] * bv[j * q + l];
                    }
                    o[i * r + j] = acc;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push(Op::BmmT(a, b), Tensor::new(out, vec![n, p, r]), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data.iter().copied().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    /// Sum over each row of an (n, d) matrix -> length-n vector.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        let data = (0..n)
            .map(|i| self.value(x).data[i * d..(i + 1) * d].iter().copied().sum())
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::RowSums(x), Tensor::new(data, vec![n]), rg)
    }

    /// log(sum(exp(row))) per row of an (n, d) matrix -> length-n vector.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Var {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        let data = (0..n)
            .map(|i| log_sum_exp(&self.value(x).data[i * d..(i + 1) * d]))
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::LogSumExpRows(x), Tensor::new(data, vec![n]), rg)
    }

    /// Row-wise log-softmax of an (n, d) matrix.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        let mut data = self.value(x).data.clone();
        for i in 0..n {
            let row = &mut data[i * d..(i + 1) * d];
            let lse = log_sum_exp(row);
            for v in row {
                *v -= lse;
            }
        }
        let shape = self.value(x).shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::LogSoftmaxRows(x), Tensor::new(data, shape), rg)
    }

    /// Elementwise log N(x | mean, exp(logstd)^2); all three operands share a shape.
    pub fn gaussian_log_density(&mut self, x: Var, mean: Var, logstd: Var) -> Var {
        let shape = self.value(x).shape.clone();
        assert_eq!(self.value(mean).shape, shape);
        assert_eq!(self.value(logstd).shape, shape);
        let half_ln_2pi = S::from_f64(0.5) * S::TAU().ln();
        let data: Vec<S> = self
            .value(x)
            .data
            .iter()
            .zip(self.value(mean).data.iter())
            .zip(self.value(logstd).data.iter())
            .map(|((&xv, &mv), &lv)| {
                let z = (xv - mv) * (-lv).exp();
                S::from_f64(-0.5) * z * z - lv - half_ln_2pi
            })
            .collect();
        let rg = self.any_grad(&[x, mean, logstd]);
        self.push(Op::GaussianLogDensity { x, mean, logstd }, Tensor::new(data, shape), rg)
    }

    /// tr(exp(A)) for a square matrix, the acyclicity functional.
    pub fn trace_expm(&mut self, a: Var) -> Var {
        let n = self.value(a).rows();
        assert_eq!(self.value(a).cols(), n, "trace_expm needs square input");
        let e = tensor::expm(n, &self.value(a).data);
        let tr = tensor::trace(n, &e);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::TraceExpm(a), Tensor::scalar(tr), rg)
    }

    /// log|det W| for a square matrix.
    pub fn log_abs_det(&mut self, w: Var) -> Var {
        let n = self.value(w).rows();
        assert_eq!(self.value(w).cols(), n, "log_abs_det needs square input");
        let (ld, _) = tensor::log_abs_det(n, &self.value(w).data)
            .unwrap_or((S::from_f64(f64::NEG_INFINITY), S::one()));
        let rg = self.nodes[w.0].requires_grad;
        self.push(Op::LogAbsDet(w), Tensor::scalar(ld), rg)
    }

    /// Column-wise concatenation of (n, d_i) matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(self.value(*p).rows(), n, "concat_cols row mismatch");
                self.value(*p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![S::zero(); n * total];
        let mut offset = 0;
        for (p, w) in parts.iter().zip(widths.iter()) {
            let src = &self.value(*p).data;
            for i in 0..n {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = self.any_grad(parts);
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(data, vec![n, total]), rg)
    }

    /// Columns [from, to) of an (n, d) matrix.
    pub fn col_slice(&mut self, x: Var, from: usize, to: usize) -> Var {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        assert!(from < to && to <= d, "col_slice out of range");
        let w = to - from;
        let mut data = vec![S::zero(); n * w];
        for i in 0..n {
            data[i * w..(i + 1) * w].copy_from_slice(&self.value(x).data[i * d + from..i * d + to]);
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::ColSlice { x, from, to }, Tensor::new(data, vec![n, w]), rg)
    }

    /// Plane `index` along the middle axis of an (n, p, q) tensor -> (n, q).
    pub fn plane_slice(&mut self, x: Var, index: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "plane_slice needs a 3-d input");
        let (n, p, q) = (s[0], s[1], s[2]);
        assert!(index < p);
        let mut data = vec![S::zero(); n * q];
        for e in 0..n {
            data[e * q..(e + 1) * q]
                .copy_from_slice(&self.value(x).data[e * p * q + index * q..e * p * q + (index + 1) * q]);
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::PlaneSlice { x, index }, Tensor::new(data, vec![n, q]), rg)
    }

    /// Row subset of an (n, d) matrix.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let d = self.value(x).cols();
        let n = self.value(x).rows();
        let mut data = vec![S::zero(); indices.len() * d];
        for (i, &r) in indices.iter().enumerate() {
            assert!(r < n, "gather_rows index out of range");
            data[i * d..(i + 1) * d].copy_from_slice(self.value(x).row(r));
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            Op::GatherRows { x, indices: indices.to_vec() },
            Tensor::new(data, vec![indices.len(), d]),
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Reshape(x), value, rg)
    }

    /// Identity forward, zero backward. Used where one objective must not
    /// push gradients into another's parameters.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Op::Detach(x), value, false)
    }

    /// Mean of all entries as a scalar node.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Scans the tape for the first node with a non-finite output.
    fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse pass from a scalar loss. Errors if the loss is non-finite,
    /// naming the first offending primitive on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        if !self.value(loss).all_finite() {
            let (node, op) = self.first_non_finite().unwrap_or((loss.0, "loss"));
            return Err(Error::NumericFailure {
                op,
                node,
                detail: format!("loss value {:?}", self.value(loss).data[0]),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let dy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor<S>>], v: Var, delta: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(delta.data.iter()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, idx: usize, dy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Detach(x) => {
                let _ = x;
            }
            Op::Tanh(x) => {
                let y = &self.nodes[idx].value;
                let dx = zip3(dy, y, |d, yv| d * (S::one() - yv * yv));
                self.add_grad(grads, x, dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                let dx = zip3(dy, y, |d, yv| d * yv * (S::one() - yv));
                self.add_grad(grads, x, dx);
            }
            Op::Softplus(x) => {
                let xs = &self.nodes[x.0].value;
                let dx = zip3(dy, xs, |d, xv| d * sigmoid_scalar(xv));
                self.add_grad(grads, x, dx);
            }
            Op::LeakyRelu(x, alpha) => {
                let a = S::from_f64(alpha);
                let xs = &self.nodes[x.0].value;
                let dx = zip3(dy, xs, |d, xv| if xv > S::zero() { d } else { a * d });
                self.add_grad(grads, x, dx);
            }
            Op::Exp(x) => {
                let y = &self.nodes[idx].value;
                let dx = zip3(dy, y, |d, yv| d * yv);
                self.add_grad(grads, x, dx);
            }
            Op::Neg(x) => {
                self.add_grad(grads, x, dy.map(|v| -v));
            }
            Op::Scale(x, c) => {
                let cs = S::from_f64(c);
                self.add_grad(grads, x, dy.map(|v| cs * v));
            }
            Op::AddScalar(x, c) => {
                let _ = c;
                self.add_grad(grads, x, dy.clone());
            }
            Op::Clamp(x, lo, hi) => {
                let (l, h) = (S::from_f64(lo), S::from_f64(hi));
                let xs = &self.nodes[x.0].value;
                let dx = zip3(dy, xs, |d, xv| if xv >= l && xv <= h { d } else { S::zero() });
                self.add_grad(grads, x, dx);
            }
            Op::Add(a, b) => {
                self.add_grad(grads, a, dy.clone());
                self.add_grad(grads, b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, a, dy.clone());
                self.add_grad(grads, b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                self.add_grad(grads, a, zip3(dy, bv, |d, v| d * v));
                self.add_grad(grads, b, zip3(dy, av, |d, v| d * v));
            }
            Op::AddRow(x, b) => {
                self.add_grad(grads, x, dy.clone());
                let (n, d) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let mut db = vec![S::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += dy.data[i * d + j];
                    }
                }
                let shape = self.nodes[b.0].value.shape.clone();
                self.add_grad(grads, b, Tensor::new(db, shape));
            }
            Op::MulRow(x, b) => {
                let (n, d) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let bv = &self.nodes[b.0].value.data;
                let xv = &self.nodes[x.0].value.data;
                let mut dx = vec![S::zero(); n * d];
                let mut db = vec![S::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = dy.data[i * d + j] * bv[j];
                        db[j] += dy.data[i * d + j] * xv[i * d + j];
                    }
                }
                let xshape = self.nodes[x.0].value.shape.clone();
                let bshape = self.nodes[b.0].value.shape.clone();
                self.add_grad(grads, x, Tensor::new(dx, xshape));
                self.add_grad(grads, b, Tensor::new(db, bshape));
            }
            Op::ColScale(x, c) => {
                let (n, d) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let cv = &self.nodes[c.0].value.data;
                let xv = &self.nodes[x.0].value.data;
                let mut dx = vec![S::zero(); n * d];
                let mut dc = vec![S::zero(); n];
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = dy.data[i * d + j] * cv[i];
                        dc[i] += dy.data[i * d + j] * xv[i * d + j];
                    }
                }
                let xshape = self.nodes[x.0].value.shape.clone();
                let cshape = self.nodes[c.0].value.shape.clone();
                self.add_grad(grads, x, Tensor::new(dx, xshape));
                self.add_grad(grads, c, Tensor::new(dc, cshape));
            }
            Op::Tile(x, n) => {
                let len = self.nodes[x.0].value.len();
                let mut dx = vec![S::zero(); len];
                for r in 0..n {
                    for j in 0..len {
                        dx[j] += dy.data[r * len + j];
                    }
                }
                let shape = self.nodes[x.0].value.shape.clone();
                self.add_grad(grads, x, Tensor::new(dx, shape));
            }
            Op::Affine { x, w, b } => {
                let (n, i) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let o = self.nodes[w.0].value.cols();
                let xv = &self.nodes[x.0].value.data;
                let wv = &self.nodes[w.0].value.data;
                if self.nodes[x.0].requires_grad {
                    let wt = tensor::transpose(i, o, wv);
                    let dx = tensor::matmul(n, o, i, &dy.data, &wt);
                    let shape = self.nodes[x.0].value.shape.clone();
                    self.add_grad(grads, x, Tensor::new(dx, shape));
                }
                if self.nodes[w.0].requires_grad {
                    let xt = tensor::transpose(n, i, xv);
                    let dw = tensor::matmul(i, n, o, &xt, &dy.data);
                    let shape = self.nodes[w.0].value.shape.clone();
                    self.add_grad(grads, w, Tensor::new(dw, shape));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![S::zero(); o];
                    for r in 0..n {
                        for c in 0..o {
                            db[c] += dy.data[r * o + c];
                        }
                    }
                    let shape = self.nodes[b.0].value.shape.clone();
                    self.add_grad(grads, b, Tensor::new(db, shape));
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                if self.nodes[a.0].requires_grad {
                    let bt = tensor::transpose(k, n, &self.nodes[b.0].value.data);
                    let da = tensor::matmul(m, n, k, &dy.data, &bt);
                    let shape = self.nodes[a.0].value.shape.clone();
                    self.add_grad(grads, a, Tensor::new(da, shape));
                }
                if self.nodes[b.0].requires_grad {
                    let at = tensor::transpose(m, k, &self.nodes[a.0].value.data);
                    let db = tensor::matmul(k, m, n, &at, &dy.data);
                    let shape = self.nodes[b.0].value.shape.clone();
                    self.add_grad(grads, b, Tensor::new(db, shape));
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.nodes[a.0].value.shape.clone();
                let sb = self.nodes[b.0].value.shape.clone();
                let (n, p, q, r) = (sa[0], sa[1], sa[2], sb[2]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![S::zero(); n * p * q];
                    for e in 0..n {
                        let bt = tensor::transpose(q, r, &self.nodes[b.0].value.data[e * q * r..(e + 1) * q * r]);
                        S::gemm(
                            p,
                            r,
                            q,
                            S::one(),
                            &dy.data[e * p * r..(e + 1) * p * r],
                            &bt,
                            S::zero(),
                            &mut da[e * p * q..(e + 1) * p * q],
                        );
                    }
                    self.add_grad(grads, a, Tensor::new(da, sa.clone()));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![S::zero(); n * q * r];
                    for e in 0..n {
                        let at = tensor::transpose(p, q, &self.nodes[a.0].value.data[e * p * q..(e + 1) * p * q]);
                        S::gemm(
                            q,
                            p,
                            r,
                            S::one(),
                            &at,
                            &dy.data[e * p * r..(e + 1) * p * r],
                            S::zero(),
                            &mut db[e * q * r..(e + 1) * q * r],
                        );
                    }
                    self.add_grad(grads, b, Tensor::new(db, sb));
                }
            }
            Op::BmmT(a, b) => {
                // out[e,i,j] = sum_l a[e,i,l] b[e,j,l]
                let sa = self.nodes[a.0].value.shape.clone();
                let sb = self.nodes[b.0].value.shape.clone();
                let (n, p, q, r) = (sa[0], sa[1], sa[2], sb[1]);
                if self.nodes[a.0].requires_grad {
                    // da[e,i,l] = sum_j dy[e,i,j] b[e,j,l]
                    let mut da = vec![S::zero(); n * p * q];
                    for e in 0..n {
                        S::gemm(
                            p,
                            r,
                            q,
                            S::one(),
                            &dy.data[e * p * r..(e + 1) * p * r],
                            &self.nodes[b.0].value.data[e * r * q..(e + 1) * r * q],
                            S::zero(),
                            &mut da[e * p * q..(e + 1) * p * q],
                        );
                    }
                    self.add_grad(grads, a, Tensor::new(da, sa.clone()));
                }
                if self.nodes[b.0].requires_grad {
                    // db[e,j,l] = sum_i dy[e,i,j] a[e,i,l]
                    let mut db = vec![S::zero(); n * r * q];
                    for e in 0..n {
                        let dyt = tensor::transpose(p, r, &dy.data[e * p * r..(e + 1) * p * r]);
                        S::gemm(
                            r,
                            p,
                            q,
                            S::one(),
                            &dyt,
                            &self.nodes[a.0].value.data[e * p * q..(e + 1) * p * q],
                            S::zero(),
                            &mut db[e * r * q..(e + 1) * r * q],
                        );
                    }
                    self.add_grad(grads, b, Tensor::new(db, sb));
                }
            }
            Op::Sum(x) => {
                let d = dy.data[0];
                let shape = self.nodes[x.0].value.shape.clone();
                let len = self.nodes[x.0].value.len();
                self.add_grad(grads, x, Tensor::new(vec![d; len], shape));
            }
            Op::RowSums(x) => {
                let (n, d) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let mut dx = vec![S::zero(); n * d];
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = dy.data[i];
                    }
                }
                let shape = self.nodes[x.0].value.shape.clone();
                self.add_grad(grads, x, Tensor::new(dx, shape));
            }
            Op::LogSumExpRows(x) => {
                let (n, d) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let xv = &self.nodes[x.0].value.data;
                let yv = &self.nodes[idx].value.data;
                let mut dx = vec![S::zero(); n * d];
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = dy.data[i] * (xv[i * d + j] - yv[i]).exp();
                    }
                }
                let shape = self.nodes[x.0].value.shape.clone();
                self.add_grad(grads, x, Tensor::new(dx, shape));
            }
            Op::LogSoftmaxRows(x) => {
                let (n, d) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let yv = &self.nodes[idx].value.data;
                let mut dx = vec![S::zero(); n * d];
                for i in 0..n {
                    let mut dsum = S::zero();
                    for j in 0..d {
                        dsum += dy.data[i * d + j];
                    }
                    for j in 0..d {
                        dx[i * d + j] = dy.data[i * d + j] - yv[i * d + j].exp() * dsum;
                    }
                }
                let shape = self.nodes[x.0].value.shape.clone();
                self.add_grad(grads, x, Tensor::new(dx, shape));
            }
            Op::GaussianLogDensity { x, mean, logstd } => {
                let xv = &self.nodes[x.0].value.data;
                let mv = &self.nodes[mean.0].value.data;
                let lv = &self.nodes[logstd.0].value.data;
                let len = xv.len();
                let mut dx = vec![S::zero(); len];
                let mut dm = vec![S::zero(); len];
                let mut dl = vec![S::zero(); len];
                for i in 0..len {
                    let inv_var = (S::from_f64(-2.0) * lv[i]).exp();
                    let diff = xv[i] - mv[i];
                    dx[i] = dy.data[i] * (-diff * inv_var);
                    dm[i] = dy.data[i] * (diff * inv_var);
                    dl[i] = dy.data[i] * (diff * diff * inv_var - S::one());
                }
                let shape = self.nodes[x.0].value.shape.clone();
                self.add_grad(grads, x, Tensor::new(dx, shape.clone()));
                self.add_grad(grads, mean, Tensor::new(dm, shape.clone()));
                self.add_grad(grads, logstd, Tensor::new(dl, shape));
            }
            Op::TraceExpm(a) => {
                // d tr(exp(A)) / dA = exp(A)^T
                let n = self.nodes[a.0].value.rows();
                let e = tensor::expm(n, &self.nodes[a.0].value.data);
                let et = tensor::transpose(n, n, &e);
                let d = dy.data[0];
                let da: Vec<S> = et.iter().map(|&v| d * v).collect();
                let shape = self.nodes[a.0].value.shape.clone();
                self.add_grad(grads, a, Tensor::new(da, shape));
            }
            Op::LogAbsDet(w) => {
                // d log|det W| / dW = (W^-1)^T
                let n = self.nodes[w.0].value.rows();
                if let Some(inv) = tensor::inverse(n, &self.nodes[w.0].value.data) {
                    let invt = tensor::transpose(n, n, &inv);
                    let d = dy.data[0];
                    let dw: Vec<S> = invt.iter().map(|&v| d * v).collect();
                    let shape = self.nodes[w.0].value.shape.clone();
                    self.add_grad(grads, w, Tensor::new(dw, shape));
                }
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[idx].value.rows();
                let total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if self.nodes[p.0].requires_grad {
                        let mut dp = vec![S::zero(); n * w];
                        for i in 0..n {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&dy.data[i * total + offset..i * total + offset + w]);
                        }
                        let shape = self.nodes[p.0].value.shape.clone();
                        self.add_grad(grads, p, Tensor::new(dp, shape));
                    }
                    offset += w;
                }
            }
            Op::ColSlice { x, from, to } => {
                let (n, d) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let w = to - from;
                let mut dx = vec![S::zero(); n * d];
                for i in 0..n {
                    dx[i * d + from..i * d + to].copy_from_slice(&dy.data[i * w..(i + 1) * w]);
                }
                let shape = self.nodes[x.0].value.shape.clone();
                self.add_grad(grads, x, Tensor::new(dx, shape));
            }
            Op::PlaneSlice { x, index } => {
                let s = self.nodes[x.0].value.shape.clone();
                let (n, p, q) = (s[0], s[1], s[2]);
                let mut dx = vec![S::zero(); n * p * q];
                for e in 0..n {
                    dx[e * p * q + index * q..e * p * q + (index + 1) * q]
                        .copy_from_slice(&dy.data[e * q..(e + 1) * q]);
                }
                self.add_grad(grads, x, Tensor::new(dx, s));
            }
            Op::GatherRows { x, indices } => {
                let d = self.nodes[x.0].value.cols();
                let n = self.nodes[x.0].value.rows();
                let mut dx = vec![S::zero(); n * d];
                for (i, &r) in indices.iter().enumerate() {
                    for j in 0..d {
                        dx[r * d + j] += dy.data[i * d + j];
                    }
                }
                let shape = self.nodes[x.0].value.shape.clone();
                self.add_grad(grads, x, Tensor::new(dx, shape));
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.shape.clone();
                self.add_grad(grads, x, dy.clone().reshape(&shape));
            }
        }
    }
}

#[inline]
fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

#[inline]
fn softplus_scalar<S: Scalar>(v: S) -> S {
    // ln(1 + e^x), stable on both tails
    if v > S::from_f64(30.0) {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let mut m = S::neg_infinity();
    for &v in row {
        if v > m {
            m = v;
        }
    }
    if m == S::neg_infinity() {
        return S::neg_infinity();
    }
    let s: S = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

fn zip3<S: Scalar>(dy: &Tensor<S>, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    Tensor::new(
        dy.data.iter().zip(other.data.iter()).map(|(&d, &o)| f(d, o)).collect(),
        dy.shape.clone(),
    )
}

/// Relaxed categorical draw over the entries of `logits` at the given
/// temperature. Entries of -inf are allowed and receive exactly zero mass;
/// a vector of only -inf is an invalid distribution.
pub fn gumbel_softmax_draw<S: Scalar>(logits: &[S], temperature: S, rng: &mut Rng) -> Result<Vec<S>> {
    if temperature <= S::zero() {
        return Err(Error::InvalidDistribution("temperature must be positive".into()));
    }
    if logits.iter().all(|v| *v == S::neg_infinity()) {
        return Err(Error::InvalidDistribution("all logits are -inf".into()));
    }
    let perturbed: Vec<S> = logits
        .iter()
        .map(|&l| {
            if l == S::neg_infinity() {
                S::neg_infinity()
            } else {
                (l + S::from_f64(rng.gumbel())) / temperature
            }
        })
        .collect();
    let lse = log_sum_exp(&perturbed);
    Ok(perturbed
        .iter()
        .map(|&v| if v == S::neg_infinity() { S::zero() } else { (v - lse).exp() })
        .collect())
}

/// Tape version of the relaxed categorical draw: one draw per row of the
/// (n, k) logits node, differentiable w.r.t. the logits.
pub fn gumbel_softmax_rows<S: Scalar>(g: &mut Graph<S>, logits: Var, temperature: S, rng: &mut Rng) -> Var {
    let (n, k) = (g.value(logits).rows(), g.value(logits).cols());
    let mut noise = Tensor::zeros(&[n, k]);
    for v in noise.data.iter_mut() {
        *v = S::from_f64(rng.gumbel());
    }
    let noise = g.constant(noise);
    let perturbed = g.add(logits, noise);
    let scaled = g.scale(perturbed, S::one().to_f64() / temperature.to_f64());
    let logp = g.log_softmax_rows(scaled);
    g.exp(logp)
}

/// Named, ordered collection of learnable tensors. Values and gradient
/// accumulators always share a shape and stay finite.
#[derive(Debug, Clone)]
pub struct ParamSet<S> {
    entries: Vec<ParamTensor<S>>,
}

#[derive(Debug, Clone)]
pub struct ParamTensor<S> {
    pub name: String,
    pub values: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, values: Tensor<S>) -> ParamId {
        let grad = Tensor::zeros(&values.shape);
        self.entries.push(ParamTensor { name: name.into(), values, grad });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].values
    }

    pub fn entries(&self) -> &[ParamTensor<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamTensor<S>] {
        &mut self.entries
    }

    /// Binds every parameter as a trainable leaf on a fresh tape, in
    /// declaration order.
    pub fn bind(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.entries.iter().map(|p| g.leaf(p.values.clone())).collect()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|p| p.values.len()).sum()
    }

    /// Flat copy of all values in declaration order.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.total_len());
        for p in &self.entries {
            out.extend_from_slice(&p.values.data);
        }
        out
    }

    /// Restores values from a flat buffer in declaration order.
    pub fn unflatten(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.total_len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} parameter values", self.total_len()),
                actual: format!("{}", flat.len()),
                context: "ParamSet::unflatten".into(),
            });
        }
        let mut offset = 0;
        for p in &mut self.entries {
            let n = p.values.len();
            p.values.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Evaluates a loss built from registered primitives and returns its value
/// together with the gradient w.r.t. every parameter, in declaration order.
/// Pure: neither the parameter set nor any hidden state is mutated.
pub fn value_and_grad<S: Scalar>(
    params: &ParamSet<S>,
    build: impl FnOnce(&mut Graph<S>, &[Var]) -> Var,
) -> Result<(S, Vec<Tensor<S>>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss)?;
    let out = vars.iter().map(|&v| grads.get(&g, v)).collect();
    Ok((g.value(loss).item(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::scalar(3.0f64));
        let (v, g) = value_and_grad(&params, |g, vars| {
            let x = vars[0];
            g.mul(x, x)
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g[0].data[0], 6.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::scalar(0.0f64));
        let (v, g) = value_and_grad(&params, |g, vars| g.sigmoid(vars[0])).unwrap();
        assert_eq!(v, 0.5);
        assert_eq!(g[0].data[0], 0.25);
    }

    #[test]
    fn non_finite_loss_names_the_primitive() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::scalar(1000.0f64));
        let err = value_and_grad(&params, |g, vars| {
            let e = g.exp(vars[0]); // overflows to +inf
            g.sum(e)
        })
        .unwrap_err();
        match err {
            Error::NumericFailure { op, .. } => assert_eq!(op, "exp"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::scalar(2.0f64));
        let (v, g) = value_and_grad(&params, |g, vars| {
            let d = g.detach(vars[0]);
            let prod = g.mul(vars[0], d); // x * stop(x): d/dx = stop(x) = 2
            g.sum(prod)
        })
        .unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(g[0].data[0], 2.0);
    }

    #[test]
    fn gumbel_softmax_rows_sum_to_one() {
        let mut rng = Rng::new(11, 0);
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::new(vec![0.3, -1.0, 2.0, 0.0, 0.0, 0.0], vec![2, 3]));
        let y = gumbel_softmax_rows(&mut g, logits, 1.0, &mut rng);
        for i in 0..2 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_softmax_draw_handles_neg_infinity() {
        let mut rng = Rng::new(4, 0);
        let y = gumbel_softmax_draw(&[0.0f64, f64::NEG_INFINITY, 1.0], 0.5, &mut rng).unwrap();
        assert_eq!(y[1], 0.0);
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gumbel_softmax_draw(&[f64::NEG_INFINITY; 3], 1.0, &mut rng).is_err());
    }

    #[test]
    fn gumbel_softmax_low_temperature_concentrates() {
        let mut rng = Rng::new(9, 0);
        let mut hits = 0;
        let n = 10_000;
        for _ in 0..n {
            let y = gumbel_softmax_draw(&[10.0f64, 0.0, 0.0], 0.01, &mut rng).unwrap();
            if (y[0] - 1.0).abs() < 1e-3 && y[1] < 1e-3 && y[2] < 1e-3 {
                hits += 1;
            }
        }
        assert!(hits as f64 / n as f64 >= 0.99, "only {hits}/{n} concentrated draws");
    }

    #[test]
    fn gumbel_softmax_uniform_argmax_frequencies() {
        let mut rng = Rng::new(10, 0);
        let k = 4;
        let n = 100_000;
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            let y = gumbel_softmax_draw(&vec![0.5f64; k], 1.0, &mut rng).unwrap();
            let argmax = y
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            counts[argmax] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / k as f64).abs() < 0.01);
        }
    }
}
