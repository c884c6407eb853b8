//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node holding
//! its forward value and the handles of its inputs; [`Graph::backward`] walks
//! the tape once in reverse append order and accumulates gradients additively,
//! so a value consumed N times receives the sum of N contributions.
//!
//! Broadcasting is limited to a one-element tensor combined with a tensor of
//! any shape. Dot products and reductions accumulate in `f64` before rounding
//! back to the storage precision.

mod attention;
mod gradcheck;

pub use attention::{multi_head_attention, AttentionOutput, AttentionParams, AttentionScale, LogitSource};
pub use gradcheck::{check_gradients, check_gradients_reference, GradCheckReport};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddConst(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    RepeatRows(Var),
    Softmax { x: Var, tau: Var },
    Dropout { x: Var, mask: Vec<S> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, inv_std: Vec<S> },
}

impl<S> Op<S> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Transpose(a) | Reshape(a) | Scale(a, _) | AddConst(a) | Relu(a) | Abs(a)
            | Square(a) | Sum(a) | Mean(a) | RepeatRows(a) => vec![*a],
            Concat(xs) => xs.clone(),
            SliceCols { x, .. } | Dropout { x, .. } => vec![*x],
            Softmax { x, tau } => vec![*x, *tau],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    training: bool,
    checked: bool,
    rng: Option<RngState>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled when no gradient reached `v`.
    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape matches value"),
            None => Tensor::zeros(shape),
        }
    }
}

fn dot_f64<S: Scalar>(a: impl Iterator<Item = S>, b: impl Iterator<Item = S>) -> S {
    S::of(a.zip(b).map(|(x, y)| x.f64() * y.f64()).sum::<f64>())
}

/// `out[m×n] = op(a) · op(b)` where `op` optionally transposes a row-major matrix.
fn matmul_raw<S: Scalar>(
    a: &[S],
    b: &[S],
    (m, k, n): (usize, usize, usize),
    trans_a: bool,
    trans_b: bool,
) -> Vec<S> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                let x = if trans_a { a[p * m + i] } else { a[i * k + p] };
                let y = if trans_b { b[j * k + p] } else { b[p * n + j] };
                acc += x.f64() * y.f64();
            }
            out.push(S::of(acc));
        }
    }
    out
}

impl<S: Scalar> Graph<S> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
            checked: false,
            rng: None,
        }
    }

    /// Training-mode graph; dropout masks are drawn from `rng`.
    pub fn training(rng: RngState) -> Self {
        Graph {
            nodes: Vec::new(),
            training: true,
            checked: false,
            rng: Some(rng),
        }
    }

    /// In checked mode every op verifies that its output is finite.
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn is_training(&self) -> bool {
        self.training
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
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(S::of(value)))
    }

    fn push(&mut self, name: &'static str, op: Op<S>, value: Tensor<S>) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), (m, k, n), false, false);
        let value = Tensor::new(&[m, n], data)?;
        self.push("matmul", Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                data.push(src[i * n + j]);
            }
        }
        let value = Tensor::new(&[n, m], data)?;
        self.push("transpose", Op::Transpose(a), value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", Op::Reshape(a), value)
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.value(b).numel() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).numel() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, format!("shapes {sa:?} and {sb:?} are incompatible")))
        }
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<(Vec<usize>, Vec<S>)> {
        let shape = self.broadcast_shape(name, a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let x = if va.len() == 1 { va[0] } else { va[i] };
                let y = if vb.len() == 1 { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect();
        Ok((shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", Op::Add(a, b), Tensor::new(&shape, data)?)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", Op::Sub(a, b), Tensor::new(&shape, data)?)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", Op::Mul(a, b), Tensor::new(&shape, data)?)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = S::of(c);
        let value = self.map(a, |x| x * c);
        self.push("scale", Op::Scale(a, c), value)
    }

    /// Addition of a constant.
    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = S::of(c);
        let value = self.map(a, |x| x + c);
        self.push("add_const", Op::AddConst(a), value)
    }

    fn map(&self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| if x > S::zero() { x } else { S::zero() });
        self.push("relu", Op::Relu(a), value)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| x.abs());
        self.push("abs", Op::Abs(a), value)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| x * x);
        self.push("square", Op::Square(a), value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|x| x.f64()).sum();
        self.push("sum", Op::Sum(a), Tensor::scalar(S::of(s)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|x| x.f64()).sum::<f64>() / t.numel() as f64;
        self.push("mean", Op::Mean(a), Tensor::scalar(S::of(s)))
    }

    /// Concatenation along the last axis. All inputs must agree on every
    /// other extent.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &x in xs {
            let s = self.shape(x);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape(
                    "concat",
                    format!("leading extents differ: {:?} vs {:?}", self.shape(first), s),
                ));
            }
        }
        let rows = self.value(first).rows();
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        self.push("concat", Op::Concat(xs.to_vec()), value)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if len == 0 || start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{} out of bounds for shape {:?}", start + len, t.shape()),
            ));
        }
        let data = (0..t.rows())
            .flat_map(|r| t.row(r)[start..start + len].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(&shape, data)?;
        self.push("slice_cols", Op::SliceCols { x, start }, value)
    }

    /// Stacks `n` copies of a single row (shape `[d]` or `[1, d]`) into `[n, d]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != 1 || n == 0 {
            return Err(Error::shape(
                "repeat_rows",
                format!("expected a single row, got shape {:?} (n = {n})", t.shape()),
            ));
        }
        let d = t.cols();
        let data = t.data().repeat(n);
        let value = Tensor::new(&[n, d], data)?;
        self.push("repeat_rows", Op::RepeatRows(x), value)
    }

    /// Softmax of `x / tau` along the last axis, with max subtraction.
    /// `tau` is a one-element node and receives a gradient when it is a
    /// parameter.
    pub fn softmax(&mut self, x: Var, tau: Var) -> Result<Var> {
        if self.value(tau).numel() != 1 {
            return Err(Error::shape(
                "softmax",
                format!("temperature must be a scalar, got {:?}", self.shape(tau)),
            ));
        }
        let tau_v = self.scalar_value(tau);
        if !(tau_v > S::zero()) {
            return Err(Error::Domain(format!("softmax temperature must be > 0, got {tau_v}")));
        }
        let t = self.value(x);
        let tau_f = tau_v.f64();
        let mut data = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            let row = t.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let exps: Vec<f64> = row.iter().map(|v| ((v.f64() - max) / tau_f).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| S::of(e / z)));
        }
        let value = Tensor::new(t.shape(), data)?;
        self.push("softmax", Op::Softmax { x, tau }, value)
    }

    /// Softmax with a fixed temperature.
    pub fn softmax_const(&mut self, x: Var, tau: f64) -> Result<Var> {
        let tau = self.scalar(tau);
        self.softmax(x, tau)
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` in training mode;
    /// the identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_mut()
            .expect("training graphs always carry an rng");
        let keep = S::of(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<S> = (0..n)
            .map(|_| if rng.uniform() < p { S::zero() } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(t.shape(), data)?;
        self.push("dropout", Op::Dropout { x, mask }, value)
    }

    /// Normalization over the last axis with learnable gain and bias of
    /// extent `d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?} with gain {:?} and bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let t = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(t.rows());
        let mut data = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            let row = t.row(r);
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(S::of(is));
            for (j, v) in row.iter().enumerate() {
                let h = (v.f64() - mean) * is;
                xhat.push(S::of(h));
                data.push(S::of(h * g[j].f64() + b[j].f64()));
            }
        }
        let value = Tensor::new(t.shape(), data)?;
        self.push(
            "layer_norm",
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            value,
        )
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, op: &Op<S>, out: &Tensor<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let mut acc = |v: Var, contrib: &mut dyn Iterator<Item = S>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
            if n == 1 {
                // Broadcast operand: fold every contribution into the scalar.
                let s: f64 = contrib.map(|c| c.f64()).sum();
                slot[0] = slot[0] + S::of(s);
            } else {
                for (s, c) in slot.iter_mut().zip(contrib) {
                    *s = *s + c;
                }
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let pick = |d: &[S], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.requires_grad(*a) {
                    let da = matmul_raw(g, val(*b), (m, n, k), false, true);
                    acc(*a, &mut da.into_iter());
                }
                if self.requires_grad(*b) {
                    let db = matmul_raw(val(*a), g, (k, m, n), true, false);
                    acc(*b, &mut db.into_iter());
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut da = Vec::with_capacity(m * n);
                for i in 0..m {
                    for j in 0..n {
                        da.push(g[j * m + i]);
                    }
                }
                acc(*a, &mut da.into_iter());
            }
            Op::Reshape(a) | Op::AddConst(a) => acc(*a, &mut g.iter().copied()),
            Op::Add(a, b) => {
                acc(*a, &mut g.iter().copied());
                acc(*b, &mut g.iter().copied());
            }
            Op::Sub(a, b) => {
                acc(*a, &mut g.iter().copied());
                acc(*b, &mut g.iter().map(|&x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut g.iter().enumerate().map(|(i, &x)| x * pick(vb, i)));
                acc(*b, &mut g.iter().enumerate().map(|(i, &x)| x * pick(va, i)));
            }
            Op::Scale(a, c) => acc(*a, &mut g.iter().map(|&x| x * *c)),
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut g.iter().zip(va).map(|(&x, &v)| if v > S::zero() { x } else { S::zero() }));
            }
            Op::Abs(a) => {
                // Subgradient 0 at the kink.
                let va = val(*a);
                acc(
                    *a,
                    &mut g.iter().zip(va).map(|(&x, &v)| {
                        if v > S::zero() {
                            x
                        } else if v < S::zero() {
                            -x
                        } else {
                            S::zero()
                        }
                    }),
                );
            }
            Op::Square(a) => {
                let two = S::of(2.0);
                acc(*a, &mut g.iter().zip(val(*a)).map(|(&x, &v)| two * v * x));
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                acc(*a, &mut std::iter::repeat_n(g[0], n));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let share = S::of(g[0].f64() / n as f64);
                acc(*a, &mut std::iter::repeat_n(share, n));
            }
            Op::Concat(xs) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    acc(x, &mut part.into_iter());
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let (cols, len) = (src.cols(), out.cols());
                let mut dx = vec![S::zero(); src.numel()];
                for r in 0..src.rows() {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*x, &mut dx.into_iter());
            }
            Op::RepeatRows(x) => {
                let d = out.cols();
                let dx: Vec<S> = (0..d)
                    .map(|j| S::of((0..out.rows()).map(|r| g[r * d + j].f64()).sum::<f64>()))
                    .collect();
                acc(*x, &mut dx.into_iter());
            }
            Op::Softmax { x, tau } => {
                let tau_v = self.scalar_value(*tau).f64();
                let y = out.data();
                let xs = val(*x);
                let cols = out.cols();
                let mut dz = Vec::with_capacity(y.len());
                for r in 0..out.rows() {
                    let span = r * cols..(r + 1) * cols;
                    let inner = dot_f64::<S>(g[span.clone()].iter().copied(), y[span.clone()].iter().copied()).f64();
                    for i in span {
                        dz.push(y[i].f64() * (g[i].f64() - inner));
                    }
                }
                if self.requires_grad(*x) {
                    acc(*x, &mut dz.iter().map(|&v| S::of(v / tau_v)));
                }
                if self.requires_grad(*tau) {
                    // z = x / tau  =>  dz/dtau = -x / tau^2
                    let dtau: f64 = dz
                        .iter()
                        .zip(xs)
                        .map(|(d, v)| -d * v.f64() / (tau_v * tau_v))
                        .sum();
                    acc(*tau, &mut std::iter::once(S::of(dtau)));
                }
            }
            Op::Dropout { x, mask } => acc(*x, &mut g.iter().zip(mask).map(|(&a, &m)| a * m)),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gv = val(*gain);
                if self.requires_grad(*x) {
                    let mut dx = Vec::with_capacity(out.numel());
                    for r in 0..out.rows() {
                        let span = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> =
                            span.clone().map(|i| g[i].f64() * gv[i - r * d].f64()).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat[span.clone()])
                            .map(|(a, h)| a * h.f64())
                            .sum::<f64>()
                            / d as f64;
                        let is = inv_std[r].f64();
                        for (j, i) in span.enumerate() {
                            dx.push(S::of(is * (dxhat[j] - mean_d - xhat[i].f64() * mean_dx)));
                        }
                    }
                    acc(*x, &mut dx.into_iter());
                }
                if self.requires_grad(*gain) {
                    let dg: Vec<S> = (0..d)
                        .map(|j| {
                            S::of((0..out.rows()).map(|r| g[r * d + j].f64() * xhat[r * d + j].f64()).sum::<f64>())
                        })
                        .collect();
                    acc(*gain, &mut dg.into_iter());
                }
                if self.requires_grad(*bias) {
                    let db: Vec<S> = (0..d)
                        .map(|j| S::of((0..out.rows()).map(|r| g[r * d + j].f64()).sum::<f64>()))
                        .collect();
                    acc(*bias, &mut db.into_iter());
                }
            }
        }
    }
}
