use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, Conv2dDims};
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operator defined outside the engine.
pub trait CustomBackward {
    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Constant,
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, batched: bool },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    SumAxis(Var),
    SumAll(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Conv2d { x: Var, k: Var, dims: Conv2dDims },
    Unfold { x: Var, kernel: usize },
    Gather { x: Var, index: Vec<usize> },
    GradReverse(Var, f64),
    Custom(Vec<Var>, Box<dyn CustomBackward>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep that touches each node once.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
        }
    }

    /// A graph that can lift parameters from `params` onto the tape.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Lifts a trainable parameter onto the tape. Repeated calls return the
    /// same node, so shared parameters accumulate gradient in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("graph was created without a parameter store");
        let value = store.get(id).value.clone();
        let v = self.push(value, Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::mismatch(op, sa, sb));
        }
        sa.iter()
            .zip(sb)
            .map(|(&x, &y)| match (x, y) {
                _ if x == y => Ok(x),
                (1, _) => Ok(y),
                (_, 1) => Ok(x),
                _ => Err(Error::mismatch(op, sa, sb)),
            })
            .collect()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out_shape = self.broadcast_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = kernels::broadcast_strides(ta.shape(), &out_shape);
            let sb = kernels::broadcast_strides(tb.shape(), &out_shape);
            let mut out = vec![0.0; numel(&out_shape)];
            let (da, db) = (ta.data(), tb.data());
            kernels::for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
            out
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, op, rg))
    }

    /// Elementwise sum with same-rank broadcasting over unit axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Identity forward; the backward pass multiplies the upstream gradient
    /// by `-lambda`.
    pub fn gradient_reversal(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(value, Op::GradReverse(x, lambda), rg)
    }

    /// Inverted dropout with keep-probability `1 - p`. Identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::InvalidArgument(format!("dropout rate {p} must be < 1")));
        }
        let shape = self.shape(x).to_vec();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..numel(&shape))
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, mask)
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a rank-2 matrix shared by every leading index of `a`, or
    /// has the same rank and leading extents as `a` (batched product).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::mismatch("matmul", &sa, &sb));
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let batched = sb.len() > 2;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; numel(&out_shape)];
        if batched {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::mismatch("matmul", &sa, &sb));
            }
            let batch = numel(&sa[..sa.len() - 2]);
            for i in 0..batch {
                kernels::gemm_nn(
                    &da[i * m * k..(i + 1) * m * k],
                    &db[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        } else {
            let rows = numel(&sa) / k;
            kernels::gemm_nn(da, db, &mut out, rows, k, n);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b, batched }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::mismatch("permute", shape, perm));
        }
        let (out_shape, data) = kernels::permute(self.value(x).data(), shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::invalid_shape("transpose", self.shape(x), "rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid_shape("concat", &first, format!("axis {axis} out of range")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::mismatch("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let chunk = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid_shape(
                "narrow",
                &shape,
                format!("cannot take [{start}, {}) on axis {axis}", start + len),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Sum over `axis`, keeping it as a unit extent.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid_shape("sum_axis", &shape, format!("axis {axis} out of range")));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let n = shape[axis];
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &data[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis(x), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid_shape("mean_axis", self.shape(x), "axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// nonzero. Masked positions get exactly zero probability; a row with no
    /// unmasked position is all zeros. `mask` broadcasts over unit axes.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ms = mask.shape();
        if ms.len() != shape.len() || ms.iter().zip(&shape).any(|(&m, &s)| m != s && m != 1) {
            return Err(Error::mismatch("masked_softmax", &shape, ms));
        }
        let expanded;
        let mask_data = if ms == shape.as_slice() {
            mask.data()
        } else {
            let sm = kernels::broadcast_strides(ms, &shape);
            let zero = vec![0; shape.len()];
            let mut full = vec![0.0; numel(&shape)];
            let md = mask.data();
            kernels::for_each_broadcast(&shape, &sm, &zero, |o, i, _| full[o] = md[i]);
            expanded = full;
            &expanded
        };
        let n = *shape.last().unwrap();
        let y = kernels::masked_softmax_rows(self.value(x).data(), mask_data, n);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, y)?, Op::MaskedSoftmax(x), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ones = Tensor::ones(&vec![1; self.shape(x).len()]);
        self.masked_softmax(x, &ones)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let y = kernels::log_softmax_rows(t.data(), n);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: y,
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let (y, inv_std) = kernels::layer_norm_rows(t.data(), n, eps);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: y,
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Same-padded 2-D convolution of `x: [batch, c_in, h, w]` with
    /// `kernel: [c_out, c_in, kh, kw]` (odd kh, kw), stride 1, no bias.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(Error::mismatch("conv2d", &sx, &sk));
        }
        let dims = Conv2dDims {
            batch: sx[0],
            c_in: sx[1],
            c_out: sk[0],
            h: sx[2],
            w: sx[3],
            kh: sk[2],
            kw: sk[3],
        };
        let out = dims.forward(self.value(x).data(), self.value(kernel).data());
        let rg = self.rg(&[x, kernel]);
        let shape = vec![dims.batch, dims.c_out, dims.h, dims.w];
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, k: kernel, dims }, rg))
    }

    /// Sliding windows over time for a same-padded 1-D convolution:
    /// `[batch, t, c] -> [batch, t, kernel * c]`, zero outside the sequence.
    pub fn unfold_time(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || kernel.is_multiple_of(2) {
            return Err(Error::invalid_shape(
                "unfold_time",
                &shape,
                format!("expected [batch, time, channels] and odd kernel, got kernel {kernel}"),
            ));
        }
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let pad = kernel / 2;
        let data = self.value(x).data();
        let mut out = vec![0.0; b * t * kernel * c];
        for bi in 0..b {
            for ti in 0..t {
                for j in 0..kernel {
                    let src = ti + j;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    let s = (bi * t + src - pad) * c;
                    let d = ((bi * t + ti) * kernel + j) * c;
                    out[d..d + c].copy_from_slice(&data[s..s + c]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, t, kernel * c], out)?, Op::Unfold { x, kernel }, rg))
    }

    /// Reorders time steps per batch row: `out[b, t] = x[b, index[b * T + t]]`.
    pub fn gather_time(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || index.len() != shape[0] * shape[1] || index.iter().any(|&i| i >= shape[1]) {
            return Err(Error::invalid_shape("gather_time", &shape, "index does not match [batch, time]"));
        }
        let (t, c) = (shape[1], shape[2]);
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for (row, &src) in index.iter().enumerate() {
            let b = row / t;
            let s = (b * t + src) * c;
            out[row * c..(row + 1) * c].copy_from_slice(&data[s..s + c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, index: index.to_vec() }, rg))
    }

    /// Records an operator whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), rule), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Input | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let mut params = Vec::new();
        for (&id, &v) in &self.param_vars {
            params.push((id, v));
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape");
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data,
        }
    }

    /// Sums `g` (shaped like the broadcast output) down to the shape of `v`.
    fn reduce_to(&self, v: Var, g: &Tensor, scale: f64) -> Tensor {
        let shape = self.shape(v);
        if shape == g.shape() {
            return g.map(|x| x * scale);
        }
        let sv = kernels::broadcast_strides(shape, g.shape());
        let zero = vec![0; shape.len()];
        let mut out = vec![0.0; numel(shape)];
        let gd = g.data();
        kernels::for_each_broadcast(g.shape(), &sv, &zero, |o, i, _| out[i] += gd[o] * scale);
        self.like(v, out)
    }

    fn unary_grad(&self, x: Var, g: &Tensor, grads: &mut [Option<Tensor>], f: impl Fn(f64, f64) -> f64) {
        let xv = self.value(x).data();
        let data = g.data().iter().zip(xv).map(|(&gi, &xi)| f(gi, xi)).collect();
        self.accumulate(grads, x, self.like(x, data));
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                let ga = self.reduce_to(*a, g, 1.0);
                self.accumulate(grads, *a, ga);
                let gb = self.reduce_to(*b, g, 1.0);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_to(*a, g, 1.0);
                self.accumulate(grads, *a, ga);
                let gb = self.reduce_to(*b, g, -1.0);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let out = g.shape();
                let sa = kernels::broadcast_strides(ta.shape(), out);
                let sb = kernels::broadcast_strides(tb.shape(), out);
                let (da, db, gd) = (ta.data(), tb.data(), g.data());
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; da.len()];
                    kernels::for_each_broadcast(out, &sa, &sb, |o, i, j| ga[i] += gd[o] * db[j]);
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; db.len()];
                    kernels::for_each_broadcast(out, &sa, &sb, |o, i, j| gb[j] += gd[o] * da[i]);
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let data = g.data().to_vec();
                self.accumulate(grads, *x, self.like(*x, data));
            }
            Op::GradReverse(x, lambda) => {
                self.accumulate(grads, *x, g.map(|v| -lambda * v));
            }
            Op::MatMul { a, b, batched } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let gd = g.data();
                if *batched {
                    let batch = numel(&sa[..sa.len() - 2]);
                    if self.requires_grad(*a) {
                        let mut ga = vec![0.0; ta.numel()];
                        for i in 0..batch {
                            kernels::gemm_nt(
                                &gd[i * m * n..(i + 1) * m * n],
                                &tb.data()[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                        self.accumulate(grads, *a, self.like(*a, ga));
                    }
                    if self.requires_grad(*b) {
                        let mut gb = vec![0.0; tb.numel()];
                        for i in 0..batch {
                            kernels::gemm_tn(
                                &ta.data()[i * m * k..(i + 1) * m * k],
                                &gd[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        self.accumulate(grads, *b, self.like(*b, gb));
                    }
                } else {
                    let rows = ta.numel() / k;
                    if self.requires_grad(*a) {
                        let mut ga = vec![0.0; ta.numel()];
                        kernels::gemm_nt(gd, tb.data(), &mut ga, rows, k, n);
                        self.accumulate(grads, *a, self.like(*a, ga));
                    }
                    if self.requires_grad(*b) {
                        let mut gb = vec![0.0; tb.numel()];
                        kernels::gemm_tn(ta.data(), gd, &mut gb, rows, k, n);
                        self.accumulate(grads, *b, self.like(*b, gb));
                    }
                }
            }
            Op::Permute(x, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let (_, data) = kernels::permute(g.data(), g.shape(), &inv);
                self.accumulate(grads, *x, self.like(*x, data));
            }
            Op::Concat(xs, axis) => {
                let shape = g.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut start = 0;
                for &x in xs {
                    let chunk = self.shape(x)[*axis] * inner;
                    if self.requires_grad(x) {
                        let mut gx = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gx.extend_from_slice(&g.data()[o * total + start..o * total + start + chunk]);
                        }
                        self.accumulate(grads, x, self.like(x, gx));
                    }
                    start += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; numel(shape)];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::SumAxis(x) => {
                let gx = self.expand_from(*x, g);
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let v = g.item();
                let gx = Tensor::full(self.shape(*x), v);
                self.accumulate(grads, *x, gx);
            }
            Op::MaskedSoftmax(x) => {
                let n = *y.shape().last().unwrap();
                let mut gx = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::LogSoftmax(x) => {
                let n = *y.shape().last().unwrap();
                let mut gx = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let total: f64 = gr.iter().sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gi - yi.exp() * total;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::LayerNorm { x, inv_std } => {
                let n = *y.shape().last().unwrap();
                let nf = n as f64;
                let mut gx = vec![0.0; y.numel()];
                for (((yr, gr), dr), &inv) in y
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(gx.chunks_mut(n))
                    .zip(inv_std)
                {
                    let mean_g = gr.iter().sum::<f64>() / nf;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = inv * (gi - mean_g - yi * mean_gy);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::Gelu(x) => self.unary_grad(*x, g, grads, |gi, xi| gi * kernels::gelu_grad(xi)),
            Op::Tanh(x) => {
                let data = g.data().iter().zip(y.data()).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                self.accumulate(grads, *x, self.like(*x, data));
            }
            Op::Sigmoid(x) => {
                let data = g.data().iter().zip(y.data()).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                self.accumulate(grads, *x, self.like(*x, data));
            }
            Op::Exp(x) => {
                let data = g.data().iter().zip(y.data()).map(|(gi, yi)| gi * yi).collect();
                self.accumulate(grads, *x, self.like(*x, data));
            }
            Op::Log(x) => self.unary_grad(*x, g, grads, |gi, xi| gi / xi),
            Op::Conv2d { x, k, dims } => {
                let (gx, gk) = dims.backward(self.value(*x).data(), self.value(*k).data(), g.data());
                self.accumulate(grads, *x, self.like(*x, gx));
                self.accumulate(grads, *k, self.like(*k, gk));
            }
            Op::Unfold { x, kernel } => {
                let shape = self.shape(*x);
                let (b, t, c) = (shape[0], shape[1], shape[2]);
                let pad = kernel / 2;
                let gd = g.data();
                let mut gx = vec![0.0; b * t * c];
                for bi in 0..b {
                    for ti in 0..t {
                        for j in 0..*kernel {
                            let src = ti + j;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let s = (bi * t + src - pad) * c;
                            let d = ((bi * t + ti) * kernel + j) * c;
                            for (acc, v) in gx[s..s + c].iter_mut().zip(&gd[d..d + c]) {
                                *acc += v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::Gather { x, index } => {
                let shape = self.shape(*x);
                let (t, c) = (shape[1], shape[2]);
                let gd = g.data();
                let mut gx = vec![0.0; gd.len()];
                for (row, &src) in index.iter().enumerate() {
                    let s = (row / t * t + src) * c;
                    for (acc, v) in gx[s..s + c].iter_mut().zip(&gd[row * c..(row + 1) * c]) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::Custom(inputs, rule) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = rule.backward(&values, y, g);
                for (&v, gv) in inputs.iter().zip(gs) {
                    self.accumulate(grads, v, gv);
                }
            }
        }
    }

    /// Broadcasts `g` (with unit axes) back up to the shape of `v`.
    fn expand_from(&self, v: Var, g: &Tensor) -> Tensor {
        let shape = self.shape(v).to_vec();
        let sg = kernels::broadcast_strides(g.shape(), &shape);
        let zero = vec![0; shape.len()];
        let mut out = vec![0.0; numel(&shape)];
        let gd = g.data();
        kernels::for_each_broadcast(&shape, &sg, &zero, |o, i, _| out[o] = gd[i]);
        Tensor { shape, data: out }
    }
}

/// Gradients of the differentiable leaves after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of an input or parameter leaf; `None` if the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but materializes zeros for unreachable leaves.
    pub fn get_or_zeros(&self, graph: &Graph<'_>, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    /// Parameter gradients in parameter-id order; `None` for parameters lifted
    /// onto the graph but not reached by the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> + '_ {
        self.params.iter().map(|&(id, v)| (id, self.get(v)))
    }
}
