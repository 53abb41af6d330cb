//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value; nodes only reference
//! earlier nodes, so the tape is always in topological order and backward is
//! a single reverse sweep.

use std::collections::HashMap;

use super::conv::{conv3d_backward, conv3d_forward, ConvGeometry};
use super::param::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` is `[C]` against `a: [C, ...]`.
    PerChannel,
    /// `b` is `[1, ...]` against `a: [C, ...]`.
    PerVoxel,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    Add {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Slice {
        input: Var,
        start: usize,
    },
    AvgPool {
        input: Var,
    },
    InstanceNorm {
        input: Var,
        inv_std: Vec<T>,
    },
    ChannelMean {
        input: Var,
    },
    ChannelMax {
        input: Var,
        argmax: Vec<u32>,
    },
    Sum {
        input: Var,
    },
    SoftDice {
        probs: Var,
        labels: Vec<T>,
        eps: T,
    },
    MeanAbsDiff {
        a: Var,
        b: Var,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { input, weight, bias, .. } | Op::Dense { input, weight, bias } => {
                vec![*input, *weight, *bias]
            }
            Op::Add { a, b, .. } | Op::Mul { a, b, .. } | Op::MeanAbsDiff { a, b } => vec![*a, *b],
            Op::Concat { inputs } => inputs.clone(),
            Op::Upsample { input, .. }
            | Op::Act { input, .. }
            | Op::Scale { input, .. }
            | Op::Slice { input, .. }
            | Op::AvgPool { input }
            | Op::InstanceNorm { input, .. }
            | Op::ChannelMean { input }
            | Op::ChannelMax { input, .. }
            | Op::Sum { input } => vec![*input],
            Op::SoftDice { probs, .. } => vec![*probs],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a forward computation for one sample and replays it backwards.
///
/// A tape is single-owner; build one per forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bindings: Vec<(ParamId, Var)>,
    overrides: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
            overrides: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        debug_assert!(
            inputs.iter().any(|v| !self.nodes[v.0].value.is_finite()) || value.is_finite(),
            "non-finite output from finite inputs in {op:?}"
        );
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor; gradients are tracked when `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.grad = None;
        let rg = tensor.requires_grad;
        let v = self.push(tensor, Op::Leaf);
        self.nodes[v.0].value.requires_grad = rg;
        v
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Loads a model parameter as a gradient-tracked leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.overrides.get(&id) {
            return v;
        }
        let mut t: Tensor<T> = store.get(id).tensor.cast();
        t.grad = None;
        t.requires_grad = true;
        let v = self.leaf(t);
        self.bindings.push((id, v));
        v
    }

    /// Routes every later `param(_, id)` lookup to `var` instead of the store.
    pub fn override_param(&mut self, id: ParamId, var: Var) {
        self.overrides.insert(id, var);
    }

    pub fn bindings(&self) -> &[(ParamId, Var)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Mutable access to a leaf's value, for finite-difference probing.
    pub fn leaf_data_mut(&mut self, v: Var) -> Result<&mut [T]> {
        match self.nodes[v.0].op {
            Op::Leaf => Ok(self.nodes[v.0].value.data_mut()),
            _ => Err(Error::arg("leaf_data_mut", "node is not a leaf")),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_value(&self, v: Var) -> Tensor<T> {
        let mut t = self.nodes[v.0].value.clone();
        t.grad = self.grads[v.0].clone();
        t
    }

    // ---- forward ops ----------------------------------------------------

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        self.conv3d_strided(input, weight, bias, dilation, 1)
    }

    pub fn conv3d_strided(&mut self, input: Var, weight: Var, bias: Var, dilation: usize, stride: usize) -> Result<Var> {
        let geom = ConvGeometry::same(self.shape(input), self.shape(weight), dilation, stride)?;
        if self.shape(bias) != [geom.c_out] {
            return Err(Error::shape("conv3d bias", self.shape(bias), &[geom.c_out]));
        }
        let out = conv3d_forward(&geom, self.data(input), self.data(weight), self.data(bias));
        let t = Tensor::new(&geom.out_shape(), out)?;
        Ok(self.push(t, Op::Conv { input, weight, bias, geom }))
    }

    /// Nearest-neighbour upsampling of a `[C,D,H,W]` map.
    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::arg("upsample3d", format!("expected [C,D,H,W], got {shape:?}")));
        }
        if factor == 0 {
            return Err(Error::arg("upsample3d", "factor must be positive"));
        }
        if factor == 1 {
            return Ok(input);
        }
        let [c, d, h, w] = [shape[0], shape[1], shape[2], shape[3]];
        let (fd, fh, fw) = (d * factor, h * factor, w * factor);
        let src = self.data(input);
        let mut out = Vec::with_capacity(c * fd * fh * fw);
        for ci in 0..c {
            for z in 0..fd {
                for y in 0..fh {
                    let row = &src[((ci * d + z / factor) * h + y / factor) * w..][..w];
                    for &v in row {
                        out.extend(std::iter::repeat(v).take(factor));
                    }
                }
            }
        }
        let t = Tensor::new(&[c, fd, fh, fw], out)?;
        Ok(self.push(t, Op::Upsample { input, factor }))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(Error::shape("dense", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("dense bias", bs, &ws[..1]));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        let x = self.data(input);
        let w = self.data(weight);
        let b = self.data(bias);
        let out: Vec<T> = (0..n_out)
            .map(|o| {
                w[o * n_in..(o + 1) * n_in]
                    .iter()
                    .zip(x)
                    .fold(b[o], |acc, (&wi, &xi)| acc + wi * xi)
            })
            .collect();
        let t = Tensor::new(&[n_out], out)?;
        Ok(self.push(t, Op::Dense { input, weight, bias }))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        if let Activation::LeakyRelu(s) = kind {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::arg("leaky_relu", format!("slope must lie in (0,1), got {s}")));
            }
        }
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(T::zero()),
                Activation::LeakyRelu(s) => {
                    if v >= T::zero() {
                        v
                    } else {
                        v * T::of(s)
                    }
                }
                Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
            })
            .collect();
        let t = Tensor::new(x.shape(), data)?;
        Ok(self.push(t, Op::Act { input, kind }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        self.activation(input, Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sa.len() >= 2 && sb == [sa[0]] {
            Ok(Broadcast::PerChannel)
        } else if sa.len() >= 2 && sb.len() == sa.len() && sb[0] == 1 && sb[1..] == sa[1..] {
            Ok(Broadcast::PerVoxel)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(&mut self, a: Var, b: Var, bc: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        let (x, y) = (ta.data(), self.data(b));
        let data: Vec<T> = match bc {
            Broadcast::Same => x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect(),
            Broadcast::PerChannel => {
                let plane = ta.plane();
                x.iter().enumerate().map(|(i, &p)| f(p, y[i / plane])).collect()
            }
            Broadcast::PerVoxel => {
                let plane = ta.plane();
                x.iter().enumerate().map(|(i, &p)| f(p, y[i % plane])).collect()
            }
        };
        Tensor::new(ta.shape(), data).expect("shape preserved")
    }

    /// `a + b`; `b` may be a per-channel vector `[C]` or a per-voxel map `[1,...]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind("add", a, b)?;
        let t = self.binary(a, b, bc, |p, q| p + q);
        Ok(self.push(t, Op::Add { a, b, bc }))
    }

    /// Hadamard product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind("mul", a, b)?;
        let t = self.binary(a, b, bc, |p, q| p * q);
        Ok(self.push(t, Op::Mul { a, b, bc }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let x = self.value(input);
        let t = Tensor::new(x.shape(), x.data().iter().map(|&v| v * f).collect()).expect("shape preserved");
        self.push(t, Op::Scale { input, factor: f })
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn average(&mut self, inputs: &[Var]) -> Result<Var> {
        let (&first, rest) = inputs
            .split_first()
            .ok_or_else(|| Error::arg("average", "no inputs"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(self.scale(acc, 1.0 / inputs.len() as f64))
    }

    /// Concatenation along the leading (channel) axis, in argument order.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::arg("concat", "no inputs"))?;
        let rest = self.shape(*first)[1..].to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s[1..] != rest[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            channels += s[0];
            data.extend_from_slice(self.data(v));
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(&rest);
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec() }))
    }

    /// Rows `[start, start + len)` of the leading axis.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if len == 0 || start + len > s[0] {
            return Err(Error::arg("slice", format!("range {start}..{} out of {}", start + len, s[0])));
        }
        let inner: usize = s[1..].iter().product();
        let mut shape = s.to_vec();
        shape[0] = len;
        let t = Tensor::new(&shape, x.data()[start * inner..(start + len) * inner].to_vec())?;
        Ok(self.push(t, Op::Slice { input, start }))
    }

    /// `[C, ...] -> [C]`, mean over every non-channel position.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() < 2 {
            return Err(Error::arg("global_avg_pool", format!("expected [C,...], got {:?}", x.shape())));
        }
        let c = x.shape()[0];
        let n = T::of(x.plane() as f64);
        let data = (0..c).map(|ci| x.channel(ci).iter().copied().sum::<T>() / n).collect();
        let t = Tensor::new(&[c], data)?;
        Ok(self.push(t, Op::AvgPool { input }))
    }

    /// Per-channel standardisation over spatial positions, no affine.
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::arg("instance_norm", "eps must be positive"));
        }
        let x = self.value(input);
        if x.shape().len() < 2 {
            return Err(Error::arg("instance_norm", format!("expected [C,...], got {:?}", x.shape())));
        }
        let c = x.shape()[0];
        let n = T::of(x.plane() as f64);
        let mut out = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(c);
        for ci in 0..c {
            let ch = x.channel(ci);
            let mean = ch.iter().copied().sum::<T>() / n;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::of(eps)).sqrt();
            out.extend(ch.iter().map(|&v| (v - mean) * inv));
            inv_std.push(inv);
        }
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.push(t, Op::InstanceNorm { input, inv_std }))
    }

    /// `[C, ...] -> [1, ...]` mean across channels.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (c, p) = (x.shape()[0], x.plane());
        let inv = T::of(1.0 / c as f64);
        let mut out = vec![T::zero(); p];
        for ci in 0..c {
            for (o, &v) in out.iter_mut().zip(x.channel(ci)) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        let mut shape = x.shape().to_vec();
        shape[0] = 1;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::ChannelMean { input }))
    }

    /// `[C, ...] -> [1, ...]` max across channels; ties go to the lowest channel.
    pub fn channel_max(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (c, p) = (x.shape()[0], x.plane());
        let mut out = x.channel(0).to_vec();
        let mut argmax = vec![0u32; p];
        for ci in 1..c {
            for ((o, a), &v) in out.iter_mut().zip(argmax.iter_mut()).zip(x.channel(ci)) {
                if v > *o {
                    *o = v;
                    *a = ci as u32;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = 1;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::ChannelMax { input, argmax }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.data(input).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel();
        let s = self.sum(input);
        self.scale(s, 1.0 / n as f64)
    }

    /// Soft Dice loss averaged over the leading (region) axis:
    /// `mean_r 1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)`.
    pub fn soft_dice(&mut self, probs: Var, labels: &Tensor<T>, eps: f64) -> Result<Var> {
        let p = self.value(probs);
        if p.shape() != labels.shape() {
            return Err(Error::shape("soft_dice_loss", p.shape(), labels.shape()));
        }
        if p.shape().len() < 2 {
            return Err(Error::arg("soft_dice_loss", "expected [regions, ...]"));
        }
        if eps <= 0.0 {
            return Err(Error::arg("soft_dice_loss", "eps must be positive"));
        }
        let eps = T::of(eps);
        let regions = p.shape()[0];
        let mut loss = T::zero();
        for r in 0..regions {
            let (pc, yc) = (p.channel(r), labels.channel(r));
            let (i, sp, sy) = dice_sums(pc, yc);
            loss = loss + T::one() - (T::of(2.0) * i + eps) / (sp + sy + eps);
        }
        loss = loss / T::of(regions as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftDice {
                probs,
                labels: labels.data().to_vec(),
                eps,
            },
        ))
    }

    /// `mean(|a - b|)`, gradient flowing to both operands.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mean_abs_diff", self.shape(a), self.shape(b)));
        }
        let (x, y) = (self.data(a), self.data(b));
        let s = x.iter().zip(y).map(|(&p, &q)| (p - q).abs()).sum::<T>() / T::of(x.len() as f64);
        Ok(self.push(Tensor::scalar(s), Op::MeanAbsDiff { a, b }))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// recomputed. Leaves that require grad but are unreachable get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.value(loss).requires_grad {
            self.fill_leaf_zeros();
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].value.requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        self.fill_leaf_zeros();
        Ok(())
    }

    fn fill_leaf_zeros(&mut self) {
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad && g.is_none() {
                *g = Some(vec![T::zero(); node.value.numel()]);
            }
        }
    }

    /// Gradient buffer of `v`, or `None` when `v` does not need one.
    fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].value.requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        // Take the op out so node values can be borrowed while grads are written.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv { input, weight, bias, geom } => {
                let (x, w) = (self.data(*input).to_vec(), self.data(*weight).to_vec());
                if let Some(gb) = self.slot(*bias) {
                    conv3d_backward(geom, &x, &w, g, None, None, Some(gb));
                }
                if let Some(gw) = self.slot(*weight) {
                    conv3d_backward(geom, &x, &w, g, None, Some(gw), None);
                }
                if let Some(gi) = self.slot(*input) {
                    conv3d_backward(geom, &x, &w, g, Some(gi), None, None);
                }
            }
            Op::Upsample { input, factor } => {
                let f = *factor;
                let s = self.shape(*input).to_vec();
                let (d, h, w) = (s[1], s[2], s[3]);
                let (fh, fw) = (h * f, w * f);
                if let Some(gi) = self.slot(*input) {
                    for (o, &gv) in g.iter().enumerate() {
                        let x = o % fw;
                        let y = (o / fw) % fh;
                        let zc = o / (fw * fh);
                        let (c, z) = (zc / (d * f), zc % (d * f));
                        let i = ((c * d + z / f) * h + y / f) * w + x / f;
                        gi[i] = gi[i] + gv;
                    }
                }
            }
            Op::Dense { input, weight, bias } => {
                let (x, w) = (self.data(*input).to_vec(), self.data(*weight).to_vec());
                let n_in = x.len();
                if let Some(gb) = self.slot(*bias) {
                    for (b, &gv) in gb.iter_mut().zip(g) {
                        *b = *b + gv;
                    }
                }
                if let Some(gw) = self.slot(*weight) {
                    for (o, &gv) in g.iter().enumerate() {
                        for (wi, &xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(&x) {
                            *wi = *wi + gv * xi;
                        }
                    }
                }
                if let Some(gi) = self.slot(*input) {
                    for (o, &gv) in g.iter().enumerate() {
                        for (xi, &wi) in gi.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *xi = *xi + gv * wi;
                        }
                    }
                }
            }
            Op::Act { input, kind } => {
                let x = self.data(*input).to_vec();
                let y = self.nodes[idx].value.data().to_vec();
                let kind = *kind;
                if let Some(gi) = self.slot(*input) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Activation::Relu => {
                                if x[i] >= T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Activation::LeakyRelu(s) => {
                                if x[i] >= T::zero() {
                                    T::one()
                                } else {
                                    T::of(s)
                                }
                            }
                            Activation::Sigmoid => y[i] * (T::one() - y[i]),
                        };
                        gi[i] = gi[i] + g[i] * d;
                    }
                }
            }
            Op::Add { a, b, bc } => {
                let plane = self.nodes[idx].value.plane();
                if let Some(ga) = self.slot(*a) {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x = *x + gv;
                    }
                }
                if let Some(gb) = self.slot(*b) {
                    reduce_broadcast(*bc, plane, g, None, gb);
                }
            }
            Op::Mul { a, b, bc } => {
                let plane = self.nodes[idx].value.plane();
                let (xa, xb) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                if let Some(ga) = self.slot(*a) {
                    for (i, (x, &gv)) in ga.iter_mut().zip(g).enumerate() {
                        let bv = match bc {
                            Broadcast::Same => xb[i],
                            Broadcast::PerChannel => xb[i / plane],
                            Broadcast::PerVoxel => xb[i % plane],
                        };
                        *x = *x + gv * bv;
                    }
                }
                if let Some(gb) = self.slot(*b) {
                    reduce_broadcast(*bc, plane, g, Some(&xa), gb);
                }
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                if let Some(gi) = self.slot(*input) {
                    for (x, &gv) in gi.iter_mut().zip(g) {
                        *x = *x + gv * f;
                    }
                }
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let n = self.value(v).numel();
                    if let Some(gi) = self.slot(v) {
                        for (x, &gv) in gi.iter_mut().zip(&g[offset..offset + n]) {
                            *x = *x + gv;
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { input, start } => {
                let off = start * self.value(*input).plane();
                if let Some(gi) = self.slot(*input) {
                    for (x, &gv) in gi[off..off + g.len()].iter_mut().zip(g) {
                        *x = *x + gv;
                    }
                }
            }
            Op::AvgPool { input } => {
                let plane = self.value(*input).plane();
                let inv = T::of(1.0 / plane as f64);
                if let Some(gi) = self.slot(*input) {
                    for (i, x) in gi.iter_mut().enumerate() {
                        *x = *x + g[i / plane] * inv;
                    }
                }
            }
            Op::InstanceNorm { input, inv_std } => {
                let y = self.nodes[idx].value.data().to_vec();
                let plane = self.nodes[idx].value.plane();
                let n = T::of(plane as f64);
                if let Some(gi) = self.slot(*input) {
                    for (c, &inv) in inv_std.iter().enumerate() {
                        let r = c * plane..(c + 1) * plane;
                        let (gc, yc) = (&g[r.clone()], &y[r.clone()]);
                        let mg = gc.iter().copied().sum::<T>() / n;
                        let mgy = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((x, &gv), &yv) in gi[r].iter_mut().zip(gc).zip(yc) {
                            *x = *x + inv * (gv - mg - yv * mgy);
                        }
                    }
                }
            }
            Op::ChannelMean { input } => {
                let c = self.shape(*input)[0];
                let plane = g.len();
                let inv = T::of(1.0 / c as f64);
                if let Some(gi) = self.slot(*input) {
                    for (i, x) in gi.iter_mut().enumerate() {
                        *x = *x + g[i % plane] * inv;
                    }
                }
            }
            Op::ChannelMax { input, argmax } => {
                let plane = g.len();
                if let Some(gi) = self.slot(*input) {
                    for (v, (&c, &gv)) in argmax.iter().zip(g).enumerate() {
                        let i = c as usize * plane + v;
                        gi[i] = gi[i] + gv;
                    }
                }
            }
            Op::Sum { input } => {
                let gv = g[0];
                if let Some(gi) = self.slot(*input) {
                    gi.iter_mut().for_each(|x| *x = *x + gv);
                }
            }
            Op::SoftDice { probs, labels, eps } => {
                let p = self.value(*probs);
                let regions = p.shape()[0];
                let plane = p.plane();
                let pd = p.data().to_vec();
                let scale = g[0] / T::of(regions as f64);
                let eps = *eps;
                if let Some(gi) = self.slot(*probs) {
                    for r in 0..regions {
                        let rg = r * plane..(r + 1) * plane;
                        let (i, sp, sy) = dice_sums(&pd[rg.clone()], &labels[rg.clone()]);
                        let num = T::of(2.0) * i + eps;
                        let den = sp + sy + eps;
                        for (x, &y) in gi[rg.clone()].iter_mut().zip(&labels[rg]) {
                            // d/dp of -(num/den)
                            let d = -(T::of(2.0) * y * den - num) / (den * den);
                            *x = *x + scale * d;
                        }
                    }
                }
            }
            Op::MeanAbsDiff { a, b } => {
                let (x, y) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                let inv = g[0] / T::of(x.len() as f64);
                let sign: Vec<T> = x
                    .iter()
                    .zip(&y)
                    .map(|(&p, &q)| {
                        let d = p - q;
                        if d > T::zero() {
                            inv
                        } else if d < T::zero() {
                            -inv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if let Some(ga) = self.slot(*a) {
                    for (v, &s) in ga.iter_mut().zip(&sign) {
                        *v = *v + s;
                    }
                }
                if let Some(gb) = self.slot(*b) {
                    for (v, &s) in gb.iter_mut().zip(&sign) {
                        *v = *v - s;
                    }
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

fn dice_sums<T: Scalar>(p: &[T], y: &[T]) -> (T, T, T) {
    p.iter().zip(y).fold((T::zero(), T::zero(), T::zero()), |(i, sp, sy), (&pv, &yv)| {
        (i + pv * yv, sp + pv, sy + yv)
    })
}

/// Reduces an upstream gradient onto a broadcast operand. `other` is the
/// full-size operand for products, `None` for sums.
fn reduce_broadcast<T: Scalar>(bc: Broadcast, plane: usize, g: &[T], other: Option<&[T]>, gb: &mut [T]) {
    let term = |i: usize| other.map_or(g[i], |o| g[i] * o[i]);
    match bc {
        Broadcast::Same => {
            for (i, x) in gb.iter_mut().enumerate() {
                *x = *x + term(i);
            }
        }
        Broadcast::PerChannel => {
            for i in 0..g.len() {
                gb[i / plane] = gb[i / plane] + term(i);
            }
        }
        Broadcast::PerVoxel => {
            for i in 0..g.len() {
                gb[i % plane] = gb[i % plane] + term(i);
            }
        }
    }
}
