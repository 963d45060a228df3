use std::collections::HashMap;

use rand::Rng;

use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{GraphError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm, per channel.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over the batch.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Column(Var, usize),
    GlobalAvgPool(Var),
    AvgPool(Var, usize),
    Dropout(Var, Vec<f64>),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation tape. Build a fresh graph for every forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// New tape. Finite-value checks are on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(GraphError::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            op => op_parents(op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free leaf that receives a gradient, used for gradient checks.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Binding the same id twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GraphError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        self.push(t, op, name)
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(va.shape(), data)?;
        self.push(t, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), "scale", |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), "add_scalar", |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Softplus(a), "softplus", softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), "log", f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Square(a), "square", |x| x * x)
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            0.0,
            &mut out,
            n as isize,
            1,
        );
        let t = Tensor::new(&[m, n], out)?;
        self.push(t, Op::MatMul(a, b), "matmul")
    }

    /// Adds a per-channel bias `[C]` to `[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, inner) = channel_layout(self.shape(x));
        if self.shape(bias) != [c] || n == 0 {
            return Err(GraphError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bc = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let t = Tensor::new(self.shape(x), out)?;
        self.push(t, Op::AddBias(x, bias), "add_bias")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let width = *va.shape().last().unwrap_or(&1);
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let t = Tensor::new(va.shape(), out)?;
        self.push(t, Op::Softmax(a), "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let width = *va.shape().last().unwrap_or(&1);
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(va.shape(), out)?;
        self.push(t, Op::LogSoftmax(a), "log_softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(GraphError::Empty { op: "mean" });
        }
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    /// Column `j` of a `[N, C]` matrix as `[N, 1]`.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || j >= s[1] {
            return Err(GraphError::ShapeMismatch {
                op: "column",
                lhs: s.to_vec(),
                rhs: vec![j],
            });
        }
        let (n, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let out = (0..n).map(|i| d[i * c + j]).collect();
        let t = Tensor::new(&[n, 1], out)?;
        self.push(t, Op::Column(a, j), "column")
    }

    /// Mean over the last axis: `[N, C, L] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[2] == 0 {
            return Err(GraphError::ShapeMismatch {
                op: "global_avg_pool",
                lhs: s,
                rhs: vec![],
            });
        }
        let l = s[2];
        let out = self
            .value(a)
            .data()
            .chunks(l)
            .map(|c| c.iter().sum::<f64>() / l as f64)
            .collect();
        let t = Tensor::new(&[s[0], s[1]], out)?;
        self.push(t, Op::GlobalAvgPool(a), "global_avg_pool")
    }

    /// Non-overlapping average pooling along the last axis. A trailing
    /// remainder shorter than `factor` is dropped.
    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || factor == 0 || s[2] < factor {
            return Err(GraphError::ShapeMismatch {
                op: "avg_pool",
                lhs: s,
                rhs: vec![factor],
            });
        }
        if factor == 1 {
            return self.reshape(a, &s);
        }
        let (l, lo) = (s[2], s[2] / factor);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * lo);
        for row in src.chunks(l) {
            for t in 0..lo {
                out.push(row[t * factor..(t + 1) * factor].iter().sum::<f64>() / factor as f64);
            }
        }
        let t = Tensor::new(&[s[0], s[1], lo], out)?;
        self.push(t, Op::AvgPool(a, factor), "avg_pool")
    }

    /// Inverted dropout. With `train == false` or `rate == 0` this is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GraphError::InvalidArgument("dropout rate must lie in [0, 1)"));
        }
        let n = self.value(a).len();
        let mask: Vec<f64> = if train && rate > 0.0 {
            let keep = 1.0 / (1.0 - rate);
            (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
        } else {
            vec![1.0; n]
        };
        let va = self.value(a);
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(va.shape(), data)?;
        self.push(t, Op::Dropout(a, mask), "dropout")
    }

    /// 1-D convolution. `input: [N, C_in, L]`, `weight: [C_out, C_in, K]`,
    /// `bias: [C_out]`; zero padding on both ends.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let mismatch = || GraphError::ShapeMismatch {
            op: "conv1d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || stride == 0 || xs[2] + 2 * padding < ws[2] {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(mismatch());
            }
        }
        let geo = ConvGeometry::new(&xs, &ws, stride, padding);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; geo.n * geo.c_out * geo.l_out];
        let mut cols = vec![0.0; geo.rows() * geo.l_out];
        for n in 0..geo.n {
            geo.im2col(&x[n * geo.c_in * geo.l..(n + 1) * geo.c_in * geo.l], &mut cols);
            let o = &mut out[n * geo.c_out * geo.l_out..(n + 1) * geo.c_out * geo.l_out];
            gemm(
                geo.c_out,
                geo.rows(),
                geo.l_out,
                1.0,
                w,
                geo.rows() as isize,
                1,
                &cols,
                geo.l_out as isize,
                1,
                0.0,
                o,
                geo.l_out as isize,
                1,
            );
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (co, row) in o.chunks_mut(geo.l_out).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let t = Tensor::new(&[geo.n, geo.c_out, geo.l_out], out)?;
        self.push(
            t,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            "conv1d",
        )
    }

    /// Training-mode batch norm over `[N, C]` or `[N, C, L]`, normalizing each
    /// channel with the batch statistics. Returns the statistics so the caller
    /// can update its running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, inner) = self.bn_layout(x, gamma, beta)?;
        let count = n * inner;
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, chunk) in src.chunks(inner).enumerate() {
            mean[i % c] += chunk.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for (i, chunk) in src.chunks(inner).enumerate() {
            let m = mean[i % c];
            var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let v = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Evaluation-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[f64], running_var: &[f64], eps: f64) -> Result<Var> {
        let (_, c, _) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(GraphError::InvalidArgument("running statistics do not match channel count"));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 || s[0] == 0 {
            return Err(GraphError::ShapeMismatch {
                op: "batch_norm",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (n, c, inner) = channel_layout(s);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(GraphError::ShapeMismatch {
                op: "batch_norm",
                lhs: s.to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        Ok((n, c, inner))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, batch: bool) -> Result<Var> {
        let (_, c, inner) = channel_layout(self.shape(x));
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for (i, (chunk, (xh, o))) in src
            .chunks(inner)
            .zip(xhat.chunks_mut(inner).zip(out.chunks_mut(inner)))
            .enumerate()
        {
            let ch = i % c;
            for j in 0..inner {
                xh[j] = (chunk[j] - mean[ch]) * inv_std[ch];
                o[j] = g[ch] * xh[j] + b[ch];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        self.push(
            t,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
            "batch_norm",
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(GraphError::NonScalarOutput(self.shape(output).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let params = self
            .params
            .iter()
            .map(|(id, v)| (*id, v.0))
            .collect::<Vec<_>>();
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * vb[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / vb[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] -= dy[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let (_, c, inner) = channel_layout(self.nodes[x.0].value.shape());
                acc(*x, &mut |g| add_into(g, dy));
                acc(*bias, &mut |g| {
                    for (i, chunk) in dy.chunks(inner).enumerate() {
                        g[i % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |g| add_into(g, dy)),
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if va[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Softplus(a) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * sigmoid(va[i]);
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / va[i];
                    }
                });
            }
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * dy[i] * va[i];
                    }
                });
            }
            Op::Softmax(a) => {
                let width = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_mut(width).zip(dy.chunks(width)).zip(y.chunks(width)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                        for j in 0..width {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let width = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_mut(width).zip(dy.chunks(width)).zip(y.chunks(width)) {
                        let total: f64 = dr.iter().sum();
                        for j in 0..width {
                            gr[j] += dr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::Column(a, j) => {
                let c = self.nodes[a.0].value.shape()[1];
                acc(*a, &mut |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i * c + j] += d;
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let l = self.nodes[a.0].value.shape()[2];
                acc(*a, &mut |g| {
                    for (row, d) in g.chunks_mut(l).zip(dy) {
                        row.iter_mut().for_each(|g| *g += d / l as f64);
                    }
                });
            }
            Op::AvgPool(a, factor) => {
                let l = self.nodes[a.0].value.shape()[2];
                let lo = l / factor;
                acc(*a, &mut |g| {
                    for (row, drow) in g.chunks_mut(l).zip(dy.chunks(lo)) {
                        for (t, d) in drow.iter().enumerate() {
                            row[t * factor..(t + 1) * factor]
                                .iter_mut()
                                .for_each(|g| *g += d / *factor as f64);
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => acc(*a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * mask[i];
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                // dA = dY . B^T
                acc(*a, &mut |g| gemm(m, n, k, 1.0, dy, n as isize, 1, vb, 1, n as isize, 1.0, g, k as isize, 1));
                // dB = A^T . dY
                acc(*b, &mut |g| gemm(k, m, n, 1.0, va, 1, k as isize, dy, n as isize, 1, 1.0, g, n as isize, 1));
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let xs = self.nodes[input.0].value.shape();
                let ws = self.nodes[weight.0].value.shape();
                let geo = ConvGeometry::new(xs, ws, *stride, *padding);
                let (x, w) = (val(*input), val(*weight));
                let per_out = geo.c_out * geo.l_out;
                if let Some(b) = bias {
                    acc(*b, &mut |g| {
                        for (i, row) in dy.chunks(geo.l_out).enumerate() {
                            g[i % geo.c_out] += row.iter().sum::<f64>();
                        }
                    });
                }
                let mut cols = vec![0.0; geo.rows() * geo.l_out];
                acc(*weight, &mut |g| {
                    for n in 0..geo.n {
                        geo.im2col(&x[n * geo.c_in * geo.l..(n + 1) * geo.c_in * geo.l], &mut cols);
                        let d = &dy[n * per_out..(n + 1) * per_out];
                        // dW += dY_n . cols^T
                        gemm(
                            geo.c_out,
                            geo.l_out,
                            geo.rows(),
                            1.0,
                            d,
                            geo.l_out as isize,
                            1,
                            &cols,
                            1,
                            geo.l_out as isize,
                            1.0,
                            g,
                            geo.rows() as isize,
                            1,
                        );
                    }
                });
                acc(*input, &mut |g| {
                    for n in 0..geo.n {
                        let d = &dy[n * per_out..(n + 1) * per_out];
                        // dcols = W^T . dY_n
                        gemm(
                            geo.rows(),
                            geo.c_out,
                            geo.l_out,
                            1.0,
                            w,
                            1,
                            geo.rows() as isize,
                            d,
                            geo.l_out as isize,
                            1,
                            0.0,
                            &mut cols,
                            geo.l_out as isize,
                            1,
                        );
                        geo.col2im_add(&cols, &mut g[n * geo.c_in * geo.l..(n + 1) * geo.c_in * geo.l]);
                    }
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let (_, c, inner) = channel_layout(self.nodes[input.0].value.shape());
                let gv = val(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (i, (d, xh)) in dy.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    let ch = i % c;
                    sum_dy[ch] += d.iter().sum::<f64>();
                    sum_dy_xhat[ch] += d.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                }
                acc(*gamma, &mut |g| add_into(g, &sum_dy_xhat));
                acc(*beta, &mut |g| add_into(g, &sum_dy));
                let count = (dy.len() / c) as f64;
                acc(*input, &mut |g| {
                    for (i, ((gr, d), xh)) in g.chunks_mut(inner).zip(dy.chunks(inner)).zip(xhat.chunks(inner)).enumerate() {
                        let ch = i % c;
                        let scale = gv[ch] * inv_std[ch];
                        if *batch {
                            let mean_dy = sum_dy[ch] / count;
                            let mean_dy_xhat = sum_dy_xhat[ch] / count;
                            for j in 0..inner {
                                gr[j] += scale * (d[j] - mean_dy - xh[j] * mean_dy_xhat);
                            }
                        } else {
                            for j in 0..inner {
                                gr[j] += scale * d[j];
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Gradients of one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if `v` lies on a
    /// differentiable path.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound parameter, ordered by parameter id.
    pub fn params(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, node)| self.grads[*node].as_deref().map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn op_parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::AddBias(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Square(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a)
        | Op::Column(a, _)
        | Op::GlobalAvgPool(a)
        | Op::AvgPool(a, _)
        | Op::Dropout(a, _) => vec![*a],
        Op::Conv1d {
            input, weight, bias, ..
        } => {
            let mut v = vec![*input, *weight];
            v.extend(bias);
            v
        }
        Op::BatchNorm {
            input, gamma, beta, ..
        } => vec![*input, *gamma, *beta],
    }
}

/// `(batch, channels, inner)` for a `[N, C, ...]` shape.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [] => (0, 0, 1),
        [n] => (*n, 1, 1),
        [n, c, rest @ ..] => (*n, *c, rest.iter().product()),
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    g.iter_mut().zip(d).for_each(|(g, d)| *g += d);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct ConvGeometry {
    n: usize,
    c_in: usize,
    l: usize,
    c_out: usize,
    k: usize,
    l_out: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, padding: usize) -> Self {
        let l_out = (xs[2] + 2 * padding - ws[2]) / stride + 1;
        Self {
            n: xs[0],
            c_in: xs[1],
            l: xs[2],
            c_out: ws[0],
            k: ws[2],
            l_out,
            stride,
            padding,
        }
    }

    fn rows(&self) -> usize {
        self.c_in * self.k
    }

    /// Input position read by output `t` at tap `kk`, if inside the signal.
    #[inline]
    fn source(&self, t: usize, kk: usize) -> Option<usize> {
        (t * self.stride + kk).checked_sub(self.padding).filter(|&p| p < self.l)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        for ci in 0..self.c_in {
            let xrow = &x[ci * self.l..(ci + 1) * self.l];
            for kk in 0..self.k {
                let crow = &mut cols[(ci * self.k + kk) * self.l_out..(ci * self.k + kk + 1) * self.l_out];
                for (t, c) in crow.iter_mut().enumerate() {
                    *c = self.source(t, kk).map_or(0.0, |p| xrow[p]);
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], g: &mut [f64]) {
        for ci in 0..self.c_in {
            for kk in 0..self.k {
                let crow = &cols[(ci * self.k + kk) * self.l_out..(ci * self.k + kk + 1) * self.l_out];
                for (t, c) in crow.iter().enumerate() {
                    if let Some(p) = self.source(t, kk) {
                        g[ci * self.l + p] += c;
                    }
                }
            }
        }
    }
}

/// `C = alpha * A B + beta * C` on strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.saturating_sub(1)) as isize * rs + (cols.saturating_sub(1)) as isize * cs
    };
    if k > 0 {
        assert!((extent(m, k, rsa, csa) as usize) < a.len(), "gemm: lhs out of bounds");
        assert!((extent(k, n, rsb, csb) as usize) < b.len(), "gemm: rhs out of bounds");
    }
    assert!((extent(m, n, rsc, csc) as usize) < c.len(), "gemm: output out of bounds");
    // SAFETY: all strides are non-negative and the extents were checked
    // against the slice lengths above; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}
