//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Tape`] records every operation of one forward pass as a node. Node ids
//! are handed out in creation order, so the tape is always topologically
//! sorted and [`Tape::backward`] is a single reverse sweep that visits every
//! node once.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::{split_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Conv2d {
        input: Var,
        kernels: Var,
        geometry: ConvGeometry,
    },
    Relu(Var),
    Tanh(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    SelectChannels {
        input: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    /// Binarization with a surrogate Jacobian `weight · I` toward its input.
    StraightThrough {
        input: Var,
        weight: S,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recorded computation graph of one forward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Trainable or differentiated leaf.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation (inputs, frozen masks).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of the last `backward` calls, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nn(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(vec![c, r], kernels::transpose(r, c, self.value(a).data()))?;
        Ok(self.derived(value, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    fn channel_extent(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize, usize)> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sx.len() < 2 || sv.len() != 1 || sv[0] != sx[1] {
            return Err(Error::dim(op, sx, sv));
        }
        Ok(split_axis(sx, 1))
    }

    /// `x + b` with `b` (length C) broadcast over every axis but the channel axis.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (outer, c, inner) = self.channel_extent("add_channel", x, b)?;
        let mut value = self.value(x).clone();
        let bias = self.value(b).data();
        for o in 0..outer {
            for (ch, &b) in bias.iter().enumerate().take(c) {
                let start = (o * c + ch) * inner;
                value.data_mut()[start..start + inner]
                    .iter_mut()
                    .for_each(|v| *v += b);
            }
        }
        Ok(self.derived(value, Op::AddChannel(x, b), &[x, b]))
    }

    /// `x ⊙ m` with `m` (length C) scaling each channel of `x`.
    pub fn mul_channel(&mut self, x: Var, m: Var) -> Result<Var> {
        let (outer, c, inner) = self.channel_extent("mul_channel", x, m)?;
        let mut value = self.value(x).clone();
        let scale = self.value(m).data();
        for o in 0..outer {
            for (ch, &m) in scale.iter().enumerate().take(c) {
                let start = (o * c + ch) * inner;
                value.data_mut()[start..start + inner]
                    .iter_mut()
                    .for_each(|v| *v *= m);
            }
        }
        Ok(self.derived(value, Op::MulChannel(x, m), &[x, m]))
    }

    /// Cross-correlation of `N×C×H×W` input with `C_out×C×k×k` kernels over a
    /// zero-padded input.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernels).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || sk[2] != sk[3] {
            return Err(Error::dim("conv2d", &si, &sk));
        }
        let geometry = conv_geometry(&si, sk[2], stride, padding)?;
        let out = kernels::conv2d_forward(
            &geometry,
            si[0],
            sk[0],
            self.value(input).data(),
            self.value(kernels).data(),
        );
        let value = Tensor::new(
            vec![si[0], sk[0], geometry.out_height, geometry.out_width],
            out,
        )?;
        Ok(self.derived(
            value,
            Op::Conv2d {
                input,
                kernels,
                geometry,
            },
            &[input, kernels],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > S::zero() { v } else { S::zero() });
        self.derived(value, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(S::tanh);
        self.derived(value, Op::Tanh(x), &[x])
    }

    /// Max pooling over `k×k` windows; trailing rows/columns that do not fill a
    /// window are dropped.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || stride == 0 || s[2] < k || s[3] < k {
            return Err(Error::Config(format!(
                "maxpool2d: window {k} stride {stride} does not fit input {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.derived(value, Op::MaxPool { input: x, argmax }, &[x]))
    }

    /// Mean over all axes after the channel axis: `N×C×…` → `N×C`.
    /// A rank-2 input passes through unchanged in value.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("global_avg_pool", &s, &[]));
        }
        let spatial: usize = s[2..].iter().product();
        let denom = S::of(spatial as f64);
        let src = self.value(x).data();
        let data = (0..s[0] * s[1])
            .map(|p| {
                src[p * spatial..(p + 1) * spatial]
                    .iter()
                    .copied()
                    .sum::<S>()
                    / denom
            })
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.derived(value, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(Error::Usage("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let off_axis_equal = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !off_axis_equal {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let width = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * width..(o + 1) * width]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.derived(
            value,
            Op::Concat {
                inputs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(value, Op::Reshape(x), &[x]))
    }

    /// Channels `indices` of `x` along axis 1.
    pub fn select_channels(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(x).select_axis1(indices)?;
        Ok(self.derived(
            value,
            Op::SelectChannels {
                input: x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.derived(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = S::zero();
        for (row, &label) in src.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: S = exps.iter().copied().sum();
            loss += total.ln() - (row[label] - max);
            probs.extend(exps.iter().map(|&e| e / total));
        }
        loss /= S::of(n as f64);
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Records `value` as a function of `input` whose backward rule passes the
    /// upstream gradient through scaled by `weight` (a straight-through
    /// surrogate for a piecewise-constant map).
    pub fn straight_through(&mut self, input: Var, value: Tensor<S>, weight: S) -> Result<Var> {
        if value.shape() != self.shape(input) {
            return Err(Error::dim(
                "straight_through",
                self.shape(input),
                value.shape(),
            ));
        }
        Ok(self.derived(value, Op::StraightThrough { input, weight }, &[input]))
    }

    /// Back-propagates from the scalar `loss`, adding into the stored
    /// gradients of every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut pending: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut pending);
            match &mut self.grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[S], pending: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let len_of = |v: Var| self.nodes[v.0].value.len();
        let mut accumulate = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !wants(v) {
                return;
            }
            let slot = pending[v.0].get_or_insert_with(|| vec![S::zero(); len_of(v)]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(*a, &mut |ga| kernels::gemm_nt(m, n, k, g, vb, ga));
                accumulate(*b, &mut |gb| kernels::gemm_tn(k, m, n, va, g, gb));
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let back = kernels::transpose(s[1], s[0], g);
                accumulate(*a, &mut |ga| add_into(ga, &back));
            }
            Op::Add(a, b) => {
                accumulate(*a, &mut |ga| add_into(ga, g));
                accumulate(*b, &mut |gb| add_into(gb, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(*a, &mut |ga| {
                    for ((acc, &gi), &bi) in ga.iter_mut().zip(g).zip(vb) {
                        *acc += gi * bi;
                    }
                });
                accumulate(*b, &mut |gb| {
                    for ((acc, &gi), &ai) in gb.iter_mut().zip(g).zip(va) {
                        *acc += gi * ai;
                    }
                });
            }
            Op::AddChannel(x, b) => {
                let (outer, c, inner) = split_axis(self.shape(*x), 1);
                accumulate(*x, &mut |gx| add_into(gx, g));
                accumulate(*b, &mut |gb| {
                    for o in 0..outer {
                        for (ch, acc) in gb.iter_mut().enumerate() {
                            let start = (o * c + ch) * inner;
                            *acc += g[start..start + inner].iter().copied().sum::<S>();
                        }
                    }
                });
            }
            Op::MulChannel(x, m) => {
                let (outer, c, inner) = split_axis(self.shape(*x), 1);
                let (vx, vm) = (self.value(*x).data(), self.value(*m).data());
                accumulate(*x, &mut |gx| {
                    for o in 0..outer {
                        for (ch, &m) in vm.iter().enumerate().take(c) {
                            let start = (o * c + ch) * inner;
                            for i in start..start + inner {
                                gx[i] += g[i] * m;
                            }
                        }
                    }
                });
                accumulate(*m, &mut |gm| {
                    for o in 0..outer {
                        for (ch, acc) in gm.iter_mut().enumerate() {
                            let start = (o * c + ch) * inner;
                            for i in start..start + inner {
                                *acc += g[i] * vx[i];
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernels: k,
                geometry,
            } => {
                let batch = self.shape(*input)[0];
                let out_channels = self.shape(*k)[0];
                let (vi, vk) = (self.value(*input).data(), self.value(*k).data());
                let (wi, wk) = (wants(*input), wants(*k));
                let mut gi = wi.then(|| vec![S::zero(); vi.len()]);
                let mut gk = wk.then(|| vec![S::zero(); vk.len()]);
                kernels::conv2d_backward(
                    geometry,
                    batch,
                    out_channels,
                    vi,
                    vk,
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if let Some(gi) = gi {
                    accumulate(*input, &mut |acc| add_into(acc, &gi));
                }
                if let Some(gk) = gk {
                    accumulate(*k, &mut |acc| add_into(acc, &gk));
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                accumulate(*x, &mut |gx| {
                    for ((acc, &gi), &xi) in gx.iter_mut().zip(g).zip(vx) {
                        if xi > S::zero() {
                            *acc += gi;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let out = node.value.data();
                accumulate(*x, &mut |gx| {
                    for ((acc, &gi), &yi) in gx.iter_mut().zip(g).zip(out) {
                        *acc += gi * (S::one() - yi * yi);
                    }
                });
            }
            Op::MaxPool { input, argmax } => {
                accumulate(*input, &mut |gx| {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        gx[src] += gi;
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let spatial: usize = s[2..].iter().product();
                let denom = S::of(spatial as f64);
                accumulate(*x, &mut |gx| {
                    for (p, &gi) in g.iter().enumerate() {
                        let share = gi / denom;
                        gx[p * spatial..(p + 1) * spatial]
                            .iter_mut()
                            .for_each(|v| *v += share);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let width = self.shape(v)[*axis] * inner;
                    accumulate(v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + width];
                            add_into(&mut gv[o * width..(o + 1) * width], src);
                        }
                    });
                    offset += width;
                }
            }
            Op::Reshape(x) => accumulate(*x, &mut |gx| add_into(gx, g)),
            Op::SelectChannels { input, indices } => {
                let (outer, c, inner) = split_axis(self.shape(*input), 1);
                accumulate(*input, &mut |gx| {
                    for o in 0..outer {
                        for (j, &ch) in indices.iter().enumerate() {
                            let src = (o * indices.len() + j) * inner;
                            let dst = (o * c + ch) * inner;
                            add_into(&mut gx[dst..dst + inner], &g[src..src + inner]);
                        }
                    }
                });
            }
            Op::Sum(x) => accumulate(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / S::of(n as f64);
                accumulate(*logits, &mut |gl| {
                    for (row, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { S::one() } else { S::zero() };
                            gl[row * k + j] += (probs[row * k + j] - onehot) * scale;
                        }
                    }
                });
            }
            Op::StraightThrough { input, weight } => {
                let w = *weight;
                accumulate(*input, &mut |gx| {
                    for (acc, &gi) in gx.iter_mut().zip(g) {
                        *acc += gi * w;
                    }
                });
            }
        }
    }
}

fn add_into<S: Scalar>(acc: &mut [S], g: &[S]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn conv_geometry(
    input: &[usize],
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let out_extent = |extent: usize| -> Result<usize> {
        let padded = extent + 2 * padding;
        if stride == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "conv2d: extent {extent} with kernel {kernel}, stride {stride}, padding {padding} \
                 does not give an integral output size"
            )));
        }
        Ok((padded - kernel) / stride + 1)
    };
    Ok(ConvGeometry {
        channels: input[1],
        height: input[2],
        width: input[3],
        kernel,
        stride,
        padding,
        out_height: out_extent(input[2])?,
        out_width: out_extent(input[3])?,
    })
}
