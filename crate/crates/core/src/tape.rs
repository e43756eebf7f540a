//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the operand
//! handles it needs for the backward rule. [`Tape::backward`] replays the
//! nodes in reverse insertion order, which is a valid topological order.

use std::collections::HashMap;

use crate::error::{contract, Error, Result};
use crate::normal::{relu_moment_partials, relu_moments, VARIANCE_FLOOR};
use crate::tensor::{channel_dims, matmul_at_into, matmul_bt_into, matmul_dims, ConvGeometry, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv1d(Var, Var, usize),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Flush(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ChannelMean(Var),
    ChannelSub(Var, Var),
    ChannelMul(Var, Var),
    ReluAdfMean(Var, Var),
    ReluAdfVar(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    SampledNll {
        mu: Var,
        sigma: Var,
        eps: Vec<f64>,
        draws: usize,
        labels: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match self {
            Leaf => [None, None],
            Relu(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Sqrt(a) | Square(a) | Recip(a) | Flush(a)
            | Sum(a) | Mean(a) | Reshape(a) | ChannelMean(a) | CrossEntropy(a, _) => [Some(*a), None],
            MatMul(a, b)
            | AddBias(a, b)
            | Conv1d(a, b, _)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | ChannelSub(a, b)
            | ChannelMul(a, b)
            | ReluAdfMean(a, b)
            | ReluAdfVar(a, b) => [Some(*a), Some(*b)],
            SampledNll { mu, sigma, .. } => [Some(*mu), Some(*sigma)],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_leaf.get(&var)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().flatten().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        Ok(self.push(value, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a per-channel bias: `[B, F] + [F]` or `[B, C, N] + [C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (outer, c, inner) = channel_dims(self.value(x).shape())?;
        let b = self.value(bias);
        if b.rank() != 1 || b.len() != c {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.value(x).shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut value = self.value(x).clone();
        let bd = b.data().to_vec();
        for o in 0..outer {
            for (ch, &bv) in bd.iter().enumerate() {
                let start = (o * c + ch) * inner;
                value.data_mut()[start..start + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    pub fn conv1d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        let value = self.value(x).conv1d(self.value(kernels), None, stride)?;
        Ok(self.push(value, Op::Conv1d(x, kernels, stride)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// Square root; the gradient at exactly zero is defined as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), |v| 1.0 / v)
    }

    /// Variance floor: values below `VARIANCE_FLOOR` (including negative
    /// rounding residue) are flushed to exactly zero.
    pub fn flush(&mut self, x: Var) -> Var {
        self.unary(x, Op::Flush(x), |v| if v >= VARIANCE_FLOOR { v } else { 0.0 })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(0.0, |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(0.0, |acc, &v| acc + v) / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Mean over every axis except the channel axis, giving `[C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (outer, c, inner) = channel_dims(t.shape())?;
        let mut out = vec![0.0; c];
        for o in 0..outer {
            for (ch, slot) in out.iter_mut().enumerate() {
                let start = (o * c + ch) * inner;
                for &v in &t.data()[start..start + inner] {
                    *slot += v;
                }
            }
        }
        let n = (outer * inner) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Ok(self.push(Tensor::vector(out), Op::ChannelMean(x)))
    }

    fn channel_binary(&mut self, x: Var, s: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let t = self.value(x);
        let (outer, c, inner) = channel_dims(t.shape())?;
        let sv = self.value(s);
        if sv.rank() != 1 || sv.len() != c {
            return Err(Error::Shape {
                op: name,
                lhs: t.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let mut value = t.clone();
        for o in 0..outer {
            for ch in 0..c {
                let start = (o * c + ch) * inner;
                let k = sv.data()[ch];
                value.data_mut()[start..start + inner].iter_mut().for_each(|v| *v = f(*v, k));
            }
        }
        Ok(value)
    }

    pub fn channel_sub(&mut self, x: Var, m: Var) -> Result<Var> {
        let value = self.channel_binary(x, m, "channel_sub", |a, b| a - b)?;
        Ok(self.push(value, Op::ChannelSub(x, m)))
    }

    pub fn channel_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let value = self.channel_binary(x, s, "channel_mul", |a, b| a * b)?;
        Ok(self.push(value, Op::ChannelMul(x, s)))
    }

    /// Moment-matched ReLU: returns `(mean', variance')` for inputs `N(mean, variance)`.
    pub fn relu_adf(&mut self, mean: Var, var: Var) -> Result<(Var, Var)> {
        self.value(mean).expect_same_shape(self.value(var), "relu_adf")?;
        let (m, v) = (self.value(mean), self.value(var));
        let mut out_m = m.clone();
        let mut out_v = v.clone();
        for ((om, ov), (&mu, &va)) in out_m
            .data_mut()
            .iter_mut()
            .zip(out_v.data_mut().iter_mut())
            .zip(m.data().iter().zip(v.data()))
        {
            let (a, b) = relu_moments(mu, va);
            *om = a;
            *ov = b;
        }
        let m_var = self.push(out_m, Op::ReluAdfMean(mean, var));
        let v_var = self.push(out_v, Op::ReluAdfVar(mean, var));
        Ok((m_var, v_var))
    }

    /// Mean softmax cross-entropy of `[B, n]` logits against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (batch, classes) = rows(t.shape(), labels.len(), "cross_entropy")?;
        check_labels(labels, classes)?;
        let mut total = 0.0;
        for (b, &c) in labels.iter().enumerate() {
            let row = &t.data()[b * classes..(b + 1) * classes];
            total += log_sum_exp(row) - row[c];
        }
        let value = Tensor::scalar(total / batch as f64);
        Ok(self.push(value, Op::CrossEntropy(logits, labels.to_vec())))
    }

    /// Negative log of the Monte-Carlo average true-class softmax probability
    /// over logits `mu + sigma * eps_t`, averaged over the batch.
    /// `eps` has shape `[T, B, n]`.
    pub fn sampled_class_nll(&mut self, mu: Var, sigma: Var, eps: &Tensor, labels: &[usize]) -> Result<Var> {
        self.value(mu).expect_same_shape(self.value(sigma), "sampled_class_nll")?;
        let (batch, classes) = rows(self.value(mu).shape(), labels.len(), "sampled_class_nll")?;
        check_labels(labels, classes)?;
        let draws = match *eps.shape() {
            [t, b, n] if b == batch && n == classes && t >= 1 => t,
            _ => {
                return Err(Error::Shape {
                    op: "sampled_class_nll",
                    lhs: self.value(mu).shape().to_vec(),
                    rhs: eps.shape().to_vec(),
                })
            }
        };
        let (m, s) = (self.value(mu).data(), self.value(sigma).data());
        let mut total = 0.0;
        let mut logits = vec![0.0; classes];
        let mut log_probs = vec![0.0; draws];
        for (b, &c) in labels.iter().enumerate() {
            for (t, lp) in log_probs.iter_mut().enumerate() {
                let e = &eps.data()[(t * batch + b) * classes..][..classes];
                for i in 0..classes {
                    logits[i] = m[b * classes + i] + s[b * classes + i] * e[i];
                }
                *lp = logits[c] - log_sum_exp(&logits);
            }
            total += -(log_sum_exp(&log_probs) - (draws as f64).ln());
        }
        let value = Tensor::scalar(total / batch as f64);
        Ok(self.push(
            value,
            Op::SampledNll {
                mu,
                sigma,
                eps: eps.data().to_vec(),
                draws,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gradients of the scalar `loss` for every leaf that requires them.
    /// The tape is cleared afterwards so it can record the next pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.apply_rule(idx, &g, &mut grads)?;
        }
        let mut by_leaf = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                by_leaf.insert(Var(idx), Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        self.clear();
        Ok(Gradients { by_leaf })
    }

    fn apply_rule(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = matmul_dims(self.value(*a).shape(), self.value(*b).shape())?;
                acc(*a, &mut |da| matmul_bt_into(g, val(*b), da, m, n, k));
                acc(*b, &mut |db| matmul_at_into(val(*a), g, db, m, k, n));
            }
            Op::AddBias(x, bias) => {
                let (outer, c, inner) = channel_dims(self.value(*x).shape())?;
                acc(*x, &mut |dx| add_assign(dx, g));
                acc(*bias, &mut |db| {
                    for o in 0..outer {
                        for (ch, d) in db.iter_mut().enumerate() {
                            let start = (o * c + ch) * inner;
                            *d += g[start..start + inner].iter().fold(0.0, |s, &v| s + v);
                        }
                    }
                });
            }
            Op::Conv1d(x, k, stride) => {
                let geom = ConvGeometry::new(self.value(*x).shape(), self.value(*k).shape(), *stride)?;
                acc(*x, &mut |dx| geom.backward(val(*x), val(*k), g, Some(dx), None));
                acc(*k, &mut |dk| geom.backward(val(*x), val(*k), g, None, Some(dk)));
            }
            Op::Relu(x) => acc(*x, &mut |dx| {
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }),
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_assign(d, g));
                acc(*b, &mut |d| add_assign(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_assign(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |d| zip3(d, g, val(*b), |gv, o| gv * o));
                acc(*b, &mut |d| zip3(d, g, val(*a), |gv, o| gv * o));
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += c * gv)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |d| add_assign(d, g)),
            Op::Exp(x) => acc(*x, &mut |d| zip3(d, g, y, |gv, yv| gv * yv)),
            Op::Log(x) => acc(*x, &mut |d| zip3(d, g, val(*x), |gv, xv| gv / xv)),
            Op::Sqrt(x) => acc(*x, &mut |d| {
                zip3(d, g, y, |gv, yv| if yv > 0.0 { gv / (2.0 * yv) } else { 0.0 })
            }),
            Op::Square(x) => acc(*x, &mut |d| zip3(d, g, val(*x), |gv, xv| 2.0 * xv * gv)),
            Op::Recip(x) => acc(*x, &mut |d| zip3(d, g, y, |gv, yv| -gv * yv * yv)),
            Op::Flush(x) => acc(*x, &mut |d| {
                zip3(d, g, val(*x), |gv, xv| if xv >= VARIANCE_FLOOR { gv } else { 0.0 })
            }),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::ChannelMean(x) => {
                let (outer, c, inner) = channel_dims(self.value(*x).shape())?;
                let n = (outer * inner) as f64;
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for (ch, &gv) in g.iter().enumerate() {
                            let start = (o * c + ch) * inner;
                            d[start..start + inner].iter_mut().for_each(|d| *d += gv / n);
                        }
                    }
                });
            }
            Op::ChannelSub(x, m) => {
                let (outer, c, inner) = channel_dims(self.value(*x).shape())?;
                acc(*x, &mut |d| add_assign(d, g));
                acc(*m, &mut |dm| {
                    for o in 0..outer {
                        for (ch, d) in dm.iter_mut().enumerate() {
                            let start = (o * c + ch) * inner;
                            *d -= g[start..start + inner].iter().fold(0.0, |s, &v| s + v);
                        }
                    }
                });
            }
            Op::ChannelMul(x, s) => {
                let (outer, c, inner) = channel_dims(self.value(*x).shape())?;
                let sv = val(*s);
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for (ch, &k) in sv.iter().enumerate() {
                            let start = (o * c + ch) * inner;
                            for (dd, &gv) in d[start..start + inner].iter_mut().zip(&g[start..start + inner]) {
                                *dd += gv * k;
                            }
                        }
                    }
                });
                acc(*s, &mut |ds| {
                    for o in 0..outer {
                        for (ch, d) in ds.iter_mut().enumerate() {
                            let start = (o * c + ch) * inner;
                            for (&gv, &x) in g[start..start + inner].iter().zip(&xv[start..start + inner]) {
                                *d += gv * x;
                            }
                        }
                    }
                });
            }
            Op::ReluAdfMean(m, v) | Op::ReluAdfVar(m, v) => {
                let (dm_off, dv_off) = if matches!(node.op, Op::ReluAdfMean(..)) { (0, 1) } else { (2, 3) };
                let (mv, vv) = (val(*m), val(*v));
                let partial = |i: usize, which: usize| relu_moment_partials(mv[i], vv[i])[which];
                acc(*m, &mut |d| {
                    for (i, (dd, &gv)) in d.iter_mut().zip(g).enumerate() {
                        if gv != 0.0 {
                            *dd += gv * partial(i, dm_off);
                        }
                    }
                });
                acc(*v, &mut |d| {
                    for (i, (dd, &gv)) in d.iter_mut().zip(g).enumerate() {
                        if gv != 0.0 {
                            *dd += gv * partial(i, dv_off);
                        }
                    }
                });
            }
            Op::CrossEntropy(logits, labels) => {
                let classes = self.value(*logits).shape()[1];
                let batch = labels.len() as f64;
                let z = val(*logits);
                acc(*logits, &mut |d| {
                    for (b, &c) in labels.iter().enumerate() {
                        let row = &z[b * classes..(b + 1) * classes];
                        let lse = log_sum_exp(row);
                        for i in 0..classes {
                            let p = (row[i] - lse).exp();
                            let onehot = if i == c { 1.0 } else { 0.0 };
                            d[b * classes + i] += g[0] * (p - onehot) / batch;
                        }
                    }
                });
            }
            Op::SampledNll {
                mu,
                sigma,
                eps,
                draws,
                labels,
            } => {
                let classes = self.value(*mu).shape()[1];
                let batch = labels.len();
                let (m, s) = (val(*mu), val(*sigma));
                // d loss / d logit_t for every draw, then chain to mu and sigma.
                let mut dmu = vec![0.0; m.len()];
                let mut dsigma = vec![0.0; m.len()];
                let mut logits = vec![0.0; draws * classes];
                let mut log_probs = vec![0.0; *draws];
                let mut lses = vec![0.0; *draws];
                for (b, &c) in labels.iter().enumerate() {
                    for t in 0..*draws {
                        let e = &eps[(t * batch + b) * classes..][..classes];
                        let row = &mut logits[t * classes..(t + 1) * classes];
                        for i in 0..classes {
                            row[i] = m[b * classes + i] + s[b * classes + i] * e[i];
                        }
                        lses[t] = log_sum_exp(row);
                        log_probs[t] = row[c] - lses[t];
                    }
                    let norm = log_sum_exp(&log_probs);
                    for t in 0..*draws {
                        let w = (log_probs[t] - norm).exp();
                        let e = &eps[(t * batch + b) * classes..][..classes];
                        for i in 0..classes {
                            let p = (logits[t * classes + i] - lses[t]).exp();
                            let onehot = if i == c { 1.0 } else { 0.0 };
                            let dz = g[0] * w * (p - onehot) / batch as f64;
                            dmu[b * classes + i] += dz;
                            dsigma[b * classes + i] += dz * e[i];
                        }
                    }
                }
                acc(*mu, &mut |d| add_assign(d, &dmu));
                acc(*sigma, &mut |d| add_assign(d, &dsigma));
            }
        }
        Ok(())
    }
}

fn add_assign(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
}

fn zip3(d: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((dd, &gv), &o) in d.iter_mut().zip(g).zip(other) {
        *dd += f(gv, o);
    }
}

fn rows(shape: &[usize], labels: usize, op: &'static str) -> Result<(usize, usize)> {
    match *shape {
        [b, n] if b == labels => Ok((b, n)),
        _ => Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![labels],
        }),
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&c| c >= classes) {
        Some(c) => Err(contract(format!("class index {c} out of range for {classes} classes"))),
        None => Ok(()),
    }
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().fold(0.0, |s, &v| s + (v - max).exp()).ln()
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|&v| (v - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient_is_input() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0, 5.0]);
        assert!(grads.get(x).is_none());
        assert!(tape.is_empty());
    }

    #[test]
    fn relu_active_region_gives_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.5, 1.0, 2.0]));
        let r = tape.relu(w);
        let loss = tape.sum(r);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_kink_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.0]));
        let r = tape.relu(w);
        let loss = tape.sum(r);
        assert_eq!(tape.backward(loss).unwrap().get(w).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_operand_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![3.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        assert_eq!(tape.backward(loss).unwrap().get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 3, vec![10.0, 0.0, 0.0]).unwrap());
        let l = tape.cross_entropy(z, &[0]).unwrap();
        let expected = (1.0 + 2.0 * (-10f64).exp()).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-15);
        assert!((tape.value(l).item() - 9.08e-5).abs() < 1e-7);
        let u = tape.constant(Tensor::matrix(1, 4, vec![0.3; 4]).unwrap());
        let l = tape.cross_entropy(u, &[2]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-15);
        assert!(tape.cross_entropy(u, &[4]).is_err());
    }
}
