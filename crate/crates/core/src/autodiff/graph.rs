use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, matmul};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Sparse linear combination of rows: output row `r` is
/// `sum(w * x[src] for (src, w) in mix[r])`.
pub type RowMix<T> = Vec<Vec<(usize, T)>>;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Square,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize, cols: Vec<T> },
    ConvT2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize, x_rows: Vec<T> },
    Unary { x: NodeId, kind: Unary },
    Dropout { x: NodeId, mask: Vec<T> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst { x: NodeId, c: Vec<T> },
    Scale { x: NodeId, c: T },
    Shift { x: NodeId },
    Reshape { x: NodeId },
    Reparam { mu: NodeId, log_var: NodeId, eps: Vec<T> },
    SoftmaxCe { logits: NodeId, probs: Vec<T>, labels: Vec<usize> },
    BernoulliNll { logits: NodeId, targets: Vec<T> },
    Sum { x: NodeId },
    Mean { x: NodeId },
    SumCols { x: NodeId },
    SliceCols { x: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    RowMix { x: NodeId, mix: RowMix<T> },
    GaussPairLogDensity { z: NodeId, mu: NodeId, log_var: NodeId },
    LogSumExpGroups { x: NodeId, group: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Nodes are appended in execution order.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = match op {
            Op::Input => false,
            Op::Param => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            detail: detail.into(),
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Constant input (no gradient is tracked into it).
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input, &[])
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Param, &[]);
        self.params.insert(id, n);
        n
    }

    /// `x [n, k] · w [k, m] (+ b [m])`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, k) = self.value(x).dims2();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != k {
            return Err(self.err(format!("linear: input width {k} vs weight {ws:?}")));
        }
        let m = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(self.err(format!("linear: bias {:?} vs width {m}", self.shape(b))));
            }
        }
        let mut out = vec![T::ZERO; n * m];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        matmul(self.value(x).data(), false, self.value(w).data(), false, n, k, m, &mut out, b.is_some());
        let t = Tensor::from_vec(&[n, m], out)?;
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Linear { x, w, b }, &inputs))
    }

    /// 2-D convolution. `x [n, c, h, w]`, `w [o, c, k, k]`, `b [o]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || self.shape(b) != [ws[0]] {
            return Err(self.err(format!("conv2d: input {xs:?}, weight {ws:?}")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if kernels::conv_out_dim(h, k, stride, pad).is_none() || kernels::conv_out_dim(wd, k, stride, pad).is_none() {
            return Err(self.err(format!("conv2d: kernel {k} larger than padded input {h}x{wd}")));
        }
        let (cols, oh, ow) = kernels::im2col(self.value(x).data(), n, c, h, wd, k, stride, pad);
        let rows = n * oh * ow;
        let mut out_rows = vec![T::ZERO; rows * o];
        matmul(&cols, false, self.value(w).data(), true, rows, c * k * k, o, &mut out_rows, false);
        let mut out = kernels::rows_to_nchw(&out_rows, n, o, oh * ow);
        let bv = self.value(b).data();
        for (plane, chunk) in out.chunks_mut(oh * ow).enumerate() {
            let bias = bv[plane % o];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let t = Tensor::from_vec(&[n, o, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad, cols }, &[x, w, b]))
    }

    /// Transposed convolution (adjoint of [`Graph::conv2d`]).
    /// `x [n, ci, h, w]`, `w [ci, co, k, k]`, `b [co]`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] || self.shape(b) != [ws[1]] {
            return Err(self.err(format!("conv_transpose2d: input {xs:?}, weight {ws:?}")));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[1], ws[2]);
        let oh = kernels::conv_transpose_out_dim(h, k, stride, pad)
            .ok_or_else(|| self.err("conv_transpose2d: empty output"))?;
        let ow = kernels::conv_transpose_out_dim(wd, k, stride, pad)
            .ok_or_else(|| self.err("conv_transpose2d: empty output"))?;
        if kernels::conv_out_dim(oh, k, stride, pad) != Some(h) || kernels::conv_out_dim(ow, k, stride, pad) != Some(wd) {
            return Err(self.err("conv_transpose2d: geometry is not invertible"));
        }
        let x_rows = kernels::nchw_to_rows(self.value(x).data(), n, ci, h * wd);
        let mut cols = vec![T::ZERO; n * h * wd * co * k * k];
        matmul(&x_rows, false, self.value(w).data(), false, n * h * wd, ci, co * k * k, &mut cols, false);
        let mut out = kernels::col2im(&cols, n, co, oh, ow, k, stride, pad);
        let bv = self.value(b).data();
        for (plane, chunk) in out.chunks_mut(oh * ow).enumerate() {
            let bias = bv[plane % co];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let t = Tensor::from_vec(&[n, co, oh, ow], out)?;
        Ok(self.push(t, Op::ConvT2d { x, w, b, stride, pad, x_rows }, &[x, w, b]))
    }

    fn unary(&mut self, x: NodeId, kind: Unary) -> NodeId {
        let f = |v: T| -> T {
            match kind {
                Unary::Relu => v.max(T::ZERO),
                Unary::LeakyRelu(s) => {
                    if v > T::ZERO {
                        v
                    } else {
                        v * T::from_f64(s)
                    }
                }
                Unary::Sigmoid => sigmoid(v),
                Unary::Exp => v.exp(),
                Unary::Ln => v.ln(),
                Unary::Sqrt => v.sqrt(),
                Unary::Square => v * v,
            }
        };
        let t = self.value(x).map(f);
        self.push(t, Op::Unary { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Ln)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Square)
    }

    /// Inverted dropout: in train mode zeroes each entry with probability `p`
    /// and scales survivors by `1/(1-p)`; identity in eval mode.
    pub fn dropout(&mut self, x: NodeId, p: f64, mode: Mode, rng: &mut RngStream) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::ZERO } else { keep })
            .collect();
        let mut t = self.value(x).clone();
        for (v, &m) in t.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        Tensor::from_vec(va.shape(), va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, x: NodeId, c: Vec<T>) -> Result<NodeId> {
        if c.len() != self.value(x).len() {
            return Err(self.err(format!("mul_const: {} constants for {:?}", c.len(), self.shape(x))));
        }
        let mut t = self.value(x).clone();
        for (v, &m) in t.data_mut().iter_mut().zip(&c) {
            *v *= m;
        }
        Ok(self.push(t, Op::MulConst { x, c }, &[x]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::from_f64(c);
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::from_f64(c);
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::Shift { x }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshaped(shape).map_err(|e| self.err(e.to_string()))?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// `mu + exp(log_var / 2) * eps`.
    pub fn reparameterize(&mut self, mu: NodeId, log_var: NodeId, eps: Vec<T>) -> Result<NodeId> {
        self.same_shape(mu, log_var, "reparameterize")?;
        if eps.len() != self.value(mu).len() {
            return Err(self.err("reparameterize: noise length mismatch"));
        }
        let half = T::from_f64(0.5);
        let data = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(log_var).data())
            .zip(&eps)
            .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
            .collect();
        let t = Tensor::from_vec(self.shape(mu), data)?;
        Ok(self.push(t, Op::Reparam { mu, log_var, eps }, &[mu, log_var]))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, c) = self.value(logits).dims2();
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(self.err(format!("softmax_cross_entropy: {} labels for {n}x{c} logits", labels.len())));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::ZERO; n * c];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(row[0], |a, b| a.max(b));
            let z: f64 = row.iter().map(|&v| (v - mx).to_f64().exp()).sum();
            for j in 0..c {
                probs[i * c + j] = T::from_f64((row[j] - mx).to_f64().exp() / z);
            }
            loss += z.ln() - (row[labels[i]] - mx).to_f64();
        }
        let t = Tensor::scalar(T::from_f64(loss / n as f64));
        Ok(self.push(
            t,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Summed Bernoulli negative log-likelihood of `targets` in [0, 1] under `logits`.
    pub fn bernoulli_nll(&mut self, logits: NodeId, targets: Vec<T>) -> Result<NodeId> {
        if targets.len() != self.value(logits).len() {
            return Err(self.err(format!(
                "bernoulli_nll: {} targets for {:?}",
                targets.len(),
                self.shape(logits)
            )));
        }
        let s: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(&targets)
            .map(|(&l, &t)| (softplus(l) - t * l).to_f64())
            .sum();
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::BernoulliNll { logits, targets }, &[logits]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1) as f64;
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s / n)), Op::Mean { x }, &[x])
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.value(x).dims2();
        let v = self.value(x).data();
        let data = (0..r).map(|i| v[i * c..(i + 1) * c].iter().copied().sum()).collect();
        let t = Tensor::from_vec(&[r, 1], data).expect("row sums");
        self.push(t, Op::SumCols { x }, &[x])
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2();
        if start >= end || end > c {
            return Err(self.err(format!("slice_cols {start}..{end} of width {c}")));
        }
        let v = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        let t = Tensor::from_vec(&[r, w], data)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let r = self.value(parts[0]).dims2().0;
        if parts.iter().any(|&p| self.value(p).dims2().0 != r) {
            return Err(self.err("concat_cols: row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::from_vec(&[r, total], data)?;
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Gathers/averages rows; see [`RowMix`].
    pub fn row_mix(&mut self, x: NodeId, mix: RowMix<T>) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2();
        if mix.iter().flatten().any(|&(s, _)| s >= r) {
            return Err(self.err(format!("row_mix: source row out of range (rows = {r})")));
        }
        let v = self.value(x).data();
        let mut data = vec![T::ZERO; mix.len() * c];
        for (out, terms) in data.chunks_mut(c).zip(&mix) {
            for &(s, w) in terms {
                for (o, &xv) in out.iter_mut().zip(&v[s * c..(s + 1) * c]) {
                    *o += w * xv;
                }
            }
        }
        let t = Tensor::from_vec(&[mix.len(), c], data)?;
        Ok(self.push(t, Op::RowMix { x, mix }, &[x]))
    }

    /// Log density of every sample `z[i]` under every diagonal Gaussian
    /// `(mu[m], log_var[m])`, per dimension: `[b, d] x3 -> [b*b, d]`, row `i*b + m`.
    pub fn gaussian_pair_log_density(&mut self, z: NodeId, mu: NodeId, log_var: NodeId) -> Result<NodeId> {
        self.same_shape(z, mu, "gaussian_pair_log_density")?;
        self.same_shape(mu, log_var, "gaussian_pair_log_density")?;
        let (b, d) = self.value(z).dims2();
        let (zv, mv, lv) = (self.value(z).data(), self.value(mu).data(), self.value(log_var).data());
        let half = T::from_f64(0.5);
        let c = T::from_f64(LN_2PI);
        let mut data = vec![T::ZERO; b * b * d];
        for i in 0..b {
            for m in 0..b {
                for k in 0..d {
                    let diff = zv[i * d + k] - mv[m * d + k];
                    data[(i * b + m) * d + k] =
                        -half * (diff * diff * (-lv[m * d + k]).exp() + lv[m * d + k] + c);
                }
            }
        }
        let t = Tensor::from_vec(&[b * b, d], data)?;
        Ok(self.push(t, Op::GaussPairLogDensity { z, mu, log_var }, &[z, mu, log_var]))
    }

    /// Column-wise log-sum-exp over consecutive groups of `group` rows.
    pub fn logsumexp_groups(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2();
        if group == 0 || r % group != 0 {
            return Err(self.err(format!("logsumexp_groups: {r} rows not divisible by {group}")));
        }
        let v = self.value(x).data();
        let g = r / group;
        let mut data = vec![T::ZERO; g * c];
        for gi in 0..g {
            for j in 0..c {
                let col = (0..group).map(|t| v[(gi * group + t) * c + j]);
                let mx = col.clone().fold(v[gi * group * c + j], |a, b| a.max(b));
                let s: T = col.map(|x| (x - mx).exp()).sum();
                data[gi * c + j] = mx + s.ln();
            }
        }
        let t = Tensor::from_vec(&[g, c], data)?;
        Ok(self.push(t, Op::LogSumExpGroups { x, group }, &[x]))
    }

    /// Gradients of the scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "backward on node {} before it was recorded (graph has {} nodes)",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::ONE));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, data: Vec<T>) {
        let t = Tensor::from_vec(self.shape(id), data).expect("gradient shape");
        self.acc(grads, id, t);
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (n, k) = self.value(*x).dims2();
                let m = self.shape(*w)[1];
                if self.needs(*x) {
                    let mut dx = vec![T::ZERO; n * k];
                    matmul(gd, false, self.value(*w).data(), true, n, m, k, &mut dx, false);
                    self.acc_data(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::ZERO; k * m];
                    matmul(self.value(*x).data(), true, gd, false, k, n, m, &mut dw, false);
                    self.acc_data(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::ZERO; m];
                    for row in gd.chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.acc_data(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let xs = self.shape(*x);
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let os = node.value.shape();
                let (o, oh, ow) = (os[1], os[2], os[3]);
                let k = self.shape(*w)[2];
                let ckk = c * k * k;
                let rows = n * oh * ow;
                let g_rows = kernels::nchw_to_rows(gd, n, o, oh * ow);
                if self.needs(*w) {
                    let mut dw = vec![T::ZERO; o * ckk];
                    matmul(&g_rows, true, cols, false, o, rows, ckk, &mut dw, false);
                    self.acc_data(grads, *w, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![T::ZERO; o];
                    for (plane, chunk) in gd.chunks(oh * ow).enumerate() {
                        db[plane % o] += chunk.iter().copied().sum();
                    }
                    self.acc_data(grads, *b, db);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::ZERO; rows * ckk];
                    matmul(&g_rows, false, self.value(*w).data(), false, rows, o, ckk, &mut dcols, false);
                    let dx = kernels::col2im(&dcols, n, c, h, wd, k, *stride, *pad);
                    self.acc_data(grads, *x, dx);
                }
            }
            Op::ConvT2d { x, w, b, stride, pad, x_rows } => {
                let xs = self.shape(*x);
                let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let os = node.value.shape();
                let (co, oh, ow) = (os[1], os[2], os[3]);
                let k = self.shape(*w)[2];
                let (dcols, _, _) = kernels::im2col(gd, n, co, oh, ow, k, *stride, *pad);
                let rows = n * h * wd;
                let ckk = co * k * k;
                if self.needs(*w) {
                    let mut dw = vec![T::ZERO; ci * ckk];
                    matmul(x_rows, true, &dcols, false, ci, rows, ckk, &mut dw, false);
                    self.acc_data(grads, *w, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![T::ZERO; co];
                    for (plane, chunk) in gd.chunks(oh * ow).enumerate() {
                        db[plane % co] += chunk.iter().copied().sum();
                    }
                    self.acc_data(grads, *b, db);
                }
                if self.needs(*x) {
                    let mut dx_rows = vec![T::ZERO; rows * ci];
                    matmul(&dcols, false, self.value(*w).data(), true, rows, ckk, ci, &mut dx_rows, false);
                    let dx = kernels::rows_to_nchw(&dx_rows, n, ci, h * wd);
                    self.acc_data(grads, *x, dx);
                }
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let half = T::from_f64(0.5);
                let two = T::from_f64(2.0);
                let d: Vec<T> = (0..gd.len())
                    .map(|i| {
                        let (gi, xi, yi) = (gd[i], xv[i], yv[i]);
                        match kind {
                            Unary::Relu => {
                                if xi > T::ZERO {
                                    gi
                                } else {
                                    T::ZERO
                                }
                            }
                            Unary::LeakyRelu(s) => {
                                if xi > T::ZERO {
                                    gi
                                } else {
                                    gi * T::from_f64(*s)
                                }
                            }
                            Unary::Sigmoid => gi * yi * (T::ONE - yi),
                            Unary::Exp => gi * yi,
                            Unary::Ln => gi / xi,
                            Unary::Sqrt => {
                                if yi > T::ZERO {
                                    gi * half / yi
                                } else {
                                    T::ZERO
                                }
                            }
                            Unary::Square => gi * two * xi,
                        }
                    })
                    .collect();
                self.acc_data(grads, *x, d);
            }
            Op::Dropout { x, mask } => {
                let d = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.acc_data(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.needs(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.acc_data(grads, *a, gd.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.needs(*b) {
                    self.acc_data(grads, *b, gd.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::MulConst { x, c } => {
                self.acc_data(grads, *x, gd.iter().zip(c).map(|(&a, &m)| a * m).collect());
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.acc(grads, *x, g.map(|v| v * c));
            }
            Op::Shift { x } => self.acc(grads, *x, g.clone()),
            Op::Reshape { x } => self.acc_data(grads, *x, gd.to_vec()),
            Op::Reparam { mu, log_var, eps } => {
                self.acc(grads, *mu, g.clone());
                if self.needs(*log_var) {
                    let half = T::from_f64(0.5);
                    let lv = self.value(*log_var).data();
                    let d = (0..gd.len())
                        .map(|i| gd[i] * half * (lv[i] * half).exp() * eps[i])
                        .collect();
                    self.acc_data(grads, *log_var, d);
                }
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = gd[0] / T::from_f64(n as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= scale;
                }
                self.acc_data(grads, *logits, d);
            }
            Op::BernoulliNll { logits, targets } => {
                let s = gd[0];
                let d = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&l, &t)| s * (sigmoid(l) - t))
                    .collect();
                self.acc_data(grads, *logits, d);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.acc_data(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                self.acc_data(grads, *x, vec![gd[0] / T::from_f64(n as f64); n]);
            }
            Op::SumCols { x } => {
                let (r, c) = self.value(*x).dims2();
                let mut d = vec![T::ZERO; r * c];
                for i in 0..r {
                    d[i * c..(i + 1) * c].fill(gd[i]);
                }
                self.acc_data(grads, *x, d);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2();
                let w = node.value.dims2().1;
                let mut d = vec![T::ZERO; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.acc_data(grads, *x, d);
            }
            Op::ConcatCols { parts } => {
                let (r, total) = node.value.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&gd[i * total + off..i * total + off + w]);
                        }
                        self.acc_data(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::RowMix { x, mix } => {
                let (r, c) = self.value(*x).dims2();
                let mut d = vec![T::ZERO; r * c];
                for (out, terms) in gd.chunks(c).zip(mix) {
                    for &(s, w) in terms {
                        for (dv, &gv) in d[s * c..(s + 1) * c].iter_mut().zip(out) {
                            *dv += w * gv;
                        }
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::GaussPairLogDensity { z, mu, log_var } => {
                let (b, d) = self.value(*z).dims2();
                let (zv, mv, lv) = (self.value(*z).data(), self.value(*mu).data(), self.value(*log_var).data());
                let half = T::from_f64(0.5);
                let mut dz = vec![T::ZERO; b * d];
                let mut dm = vec![T::ZERO; b * d];
                let mut dl = vec![T::ZERO; b * d];
                for i in 0..b {
                    for m in 0..b {
                        for k in 0..d {
                            let gi = gd[(i * b + m) * d + k];
                            let prec = (-lv[m * d + k]).exp();
                            let diff = zv[i * d + k] - mv[m * d + k];
                            dz[i * d + k] -= gi * diff * prec;
                            dm[m * d + k] += gi * diff * prec;
                            dl[m * d + k] += gi * half * (diff * diff * prec - T::ONE);
                        }
                    }
                }
                self.acc_data(grads, *z, dz);
                self.acc_data(grads, *mu, dm);
                self.acc_data(grads, *log_var, dl);
            }
            Op::LogSumExpGroups { x, group } => {
                let (r, c) = self.value(*x).dims2();
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let mut d = vec![T::ZERO; r * c];
                for row in 0..r {
                    let gi = row / group;
                    for j in 0..c {
                        d[row * c + j] = gd[gi * c + j] * (xv[row * c + j] - yv[gi * c + j]).exp();
                    }
                }
                self.acc_data(grads, *x, d);
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&n| self.wrt(n))
    }
}
