//! Recorded computation graph with reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value produced while it is active.
//! Operations are methods on the tape and return a [`Var`] handle. A node
//! remembers how it was produced only when at least one of its inputs
//! requires a gradient; otherwise it is stored as a plain constant, which is
//! how inference runs tape-free (see [`Tape::inference`]).
//!
//! After [`Tape::backward`] the tape is frozen until [`Tape::reset`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::dense::{split_axis, Tensor};
use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

/// Zero padding for 2-D convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MatMul(Var, Var),
    Im2Col(Var, ConvGeom),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, axis: usize, xhat: Vec<S>, rstd: Vec<S> },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    UpsampleNearest(Var, usize),
    ResizeBilinear(Var),
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<S> },
    Bce { p: Var, target: Tensor<S>, weights: Option<Tensor<S>> },
    SoftDice { p: Var, target: Tensor<S>, smooth: S },
    GradScaleRows(Var, Vec<S>),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Im2Col(..) => "im2col",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Permute(..) => "permute",
            Op::Reshape(_) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::UpsampleNearest(..) => "upsample_nearest",
            Op::ResizeBilinear(_) => "resize_bilinear",
            Op::SpaceToDepth(..) => "space_to_depth",
            Op::DepthToSpace(..) => "depth_to_space",
            Op::Attention { .. } => "attention",
            Op::Bce { .. } => "bce",
            Op::SoftDice { .. } => "soft_dice",
            Op::GradScaleRows(..) => "grad_scale_rows",
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    tape: u64,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

/// Probability clamp applied inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug)]
pub struct Tape<S = f64> {
    id: u64,
    nodes: Vec<Node<S>>,
    recording: bool,
    frozen: bool,
    check_finite: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    /// A recording tape for training.
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
            frozen: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// A tape that never records operations; every value is a constant.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and unfreezes the tape.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.frozen = false;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Attention probabilities `[heads, nq, nk]` saved by a recorded attention node.
    pub fn saved_attention(&self, v: Var) -> Option<&[S]> {
        match &self.nodes.get(v.id)?.op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        if self.frozen {
            return Err(Error::TapeFrozen);
        }
        if vars.iter().any(|v| v.tape != self.id || v.id >= self.nodes.len()) {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    /// Leaf node. `requires_grad` is ignored on an inference tape.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.check(&[])?;
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn record(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.check(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = kernels::broadcast_shape(op, ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let mut out = vec![S::zero(); n];
        let (da, db) = (ta.data(), tb.data());
        kernels::for_each_broadcast(ta.shape(), tb.shape(), &shape, |i, ia, ib| {
            out[i] = f(da[ia], db[ib]);
        });
        Tensor::new(shape, out)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.record(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.record(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.record(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x).map(|v| v * c);
        self.record(out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.record(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x).map(sigmoid);
        self.record(out, Op::Sigmoid(x), &[x])
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[m,k] × [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = Tensor::new([m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))?;
        self.record(out, Op::MatMul(a, b), &[a, b])
    }

    /// Unfolds `[C,H,W]` into `[C·k·k, OH·OW]` columns (stride 1).
    pub fn im2col(&mut self, x: Var, kernel: usize, padding: Padding) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape("im2col", s, &[0, 0, 0]));
        }
        if kernel == 0 {
            return Err(Error::attr("im2col", "kernel must be >= 1"));
        }
        let pad = match padding {
            Padding::Same => {
                if kernel % 2 == 0 {
                    return Err(Error::attr("im2col", "same padding needs an odd kernel"));
                }
                kernel / 2
            }
            Padding::Valid => 0,
        };
        let (c, h, w) = (s[0], s[1], s[2]);
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::attr("im2col", format!("kernel {kernel} larger than input {h}x{w}")));
        }
        let g = ConvGeom {
            c,
            h,
            w,
            k: kernel,
            pad,
            oh: h + 2 * pad - kernel + 1,
            ow: w + 2 * pad - kernel + 1,
        };
        let out = Tensor::new([c * kernel * kernel, g.oh * g.ow], kernels::im2col(t.data(), g))?;
        self.record(out, Op::Im2Col(x, g), &[x])
    }

    /// Stride-1 convolution of `x: [C,H,W]` with `weight: [O,C,k,k]` and optional `bias: [O]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        self.check(&[x, weight])?;
        let ws = self.shape(weight).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 4 || xs.len() != 3 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let cols = self.im2col(x, ws[2], padding)?;
        let oh_ow = self.shape(cols)[1];
        let wm = self.reshape(weight, [ws[0], ws[1] * ws[2] * ws[3]])?;
        let y = self.matmul(wm, cols)?;
        let (oh, ow) = match padding {
            Padding::Same => (xs[1], xs[2]),
            Padding::Valid => (xs[1] - ws[2] + 1, xs[2] - ws[3] + 1),
        };
        debug_assert_eq!(oh * ow, oh_ow);
        let y = self.reshape(y, [ws[0], oh, ow])?;
        match bias {
            Some(b) => {
                if self.shape(b) != [ws[0]] {
                    return Err(Error::shape("conv2d bias", self.shape(b), &[ws[0]]));
                }
                let b = self.reshape(b, [ws[0], 1, 1])?;
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    // ---------------------------------------------------------------- normalisation

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::attr("softmax", format!("axis {axis} out of range for rank {}", t.rank())));
        }
        let out = Tensor::new(t.shape().to_vec(), kernels::softmax(t.data(), t.shape(), axis))?;
        self.record(out, Op::Softmax(x, axis), &[x])
    }

    /// Normalises to zero mean and unit variance along `axis` (no affine terms).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::attr("layer_norm", format!("axis {axis} out of range for rank {}", t.rank())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut xhat = vec![S::zero(); d.len()];
        let mut rstd = vec![S::zero(); outer * inner];
        let nf = S::of(n as f64);
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * n + i) * inner + r;
                let mean = (0..n).map(|i| d[at(i)]).sum::<S>() / nf;
                let var = (0..n).map(|i| (d[at(i)] - mean).powi(2)).sum::<S>() / nf;
                let rs = S::one() / (var + S::of(eps)).sqrt();
                rstd[o * inner + r] = rs;
                for i in 0..n {
                    xhat[at(i)] = (d[at(i)] - mean) * rs;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), xhat.clone())?;
        self.record(out, Op::LayerNorm { x, axis, xhat, rstd }, &[x])
    }

    // ---------------------------------------------------------------- shape

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::attr("permute", format!("{perm:?} is not a permutation of rank {}", t.rank())));
        }
        let (shape, data) = kernels::permute(t.data(), t.shape(), perm);
        let out = Tensor::new(shape, data)?;
        self.record(out, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("transpose", self.shape(x), &[0, 0]));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check(&[x])?;
        let shape = shape.into();
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::shape("reshape", t.shape(), &shape));
        }
        let out = t.reshaped(shape)?;
        self.record(out, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.check(xs)?;
        let first = xs.first().ok_or_else(|| Error::attr("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::attr("concat", format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.record(out, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(Error::attr(
                "slice",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.record(out, Op::Slice { x, axis, start }, &[x])
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / S::of(t.len() as f64));
        self.record(out, Op::Mean(x), &[x])
    }

    fn reduce_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<(Tensor<S>, usize)> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::attr(op, format!("axis {axis} out of range for rank {}", t.rank())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &t.data()[(o * n + i) * inner..][..inner];
                for (d, &s) in data[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok((Tensor::new(shape, data)?, n))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(&[x])?;
        let (out, _) = self.reduce_axis(x, axis, "sum_axis")?;
        self.record(out, Op::SumAxis(x, axis), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(&[x])?;
        let (out, n) = self.reduce_axis(x, axis, "mean_axis")?;
        let inv = S::one() / S::of(n as f64);
        let out = out.map(|v| v * inv);
        self.record(out, Op::MeanAxis(x, axis), &[x])
    }

    // ---------------------------------------------------------------- spatial

    fn chw(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape(op, s, &[0, 0, 0]));
        }
        Ok((s[0], s[1], s[2]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check(&[x])?;
        if factor == 0 {
            return Err(Error::attr("upsample_nearest", "factor must be >= 1"));
        }
        let (c, h, w) = self.chw(x, "upsample_nearest")?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let out = Tensor::from_fn([c, oh, ow], |i| {
            let ch = i / (oh * ow);
            let y = (i / ow) % oh;
            let xx = i % ow;
            src[(ch * h + y / factor) * w + xx / factor]
        });
        self.record(out, Op::UpsampleNearest(x, factor), &[x])
    }

    /// Half-pixel-centred bilinear resize of `[C,H,W]` to `[C,out_h,out_w]`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check(&[x])?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::attr("resize_bilinear", "output size must be positive"));
        }
        let (c, h, w) = self.chw(x, "resize_bilinear")?;
        let data = kernels::resize_bilinear(self.value(x).data(), c, h, w, out_h, out_w);
        let out = Tensor::new([c, out_h, out_w], data)?;
        self.record(out, Op::ResizeBilinear(x), &[x])
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::attr("upsample_bilinear", "factor must be >= 1"));
        }
        let (_, h, w) = self.chw(x, "upsample_bilinear")?;
        self.resize_bilinear(x, h * factor, w * factor)
    }

    /// `[C,H,W] → [C·r², H/r, W/r]`; channel `c·r² + i·r + j` holds pixels `(r·y + i, r·x + j)`.
    pub fn space_to_depth(&mut self, x: Var, r: usize) -> Result<Var> {
        self.check(&[x])?;
        let (c, h, w) = self.chw(x, "space_to_depth")?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::attr("space_to_depth", format!("factor {r} does not divide {h}x{w}")));
        }
        let data = kernels::space_to_depth(self.value(x).data(), c, h, w, r);
        let out = Tensor::new([c * r * r, h / r, w / r], data)?;
        self.record(out, Op::SpaceToDepth(x, r), &[x])
    }

    /// Inverse of [`Tape::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Result<Var> {
        self.check(&[x])?;
        let (c, h, w) = self.chw(x, "depth_to_space")?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::attr("depth_to_space", format!("factor {r} does not divide {c} channels")));
        }
        let data = kernels::depth_to_space(self.value(x).data(), c, h, w, r);
        let out = Tensor::new([c / (r * r), h * r, w * r], data)?;
        self.record(out, Op::DepthToSpace(x, r), &[x])
    }

    // ---------------------------------------------------------------- attention

    /// Multi-head scaled dot-product attention over row-major token matrices.
    ///
    /// `q: [nq, d]`, `k: [nk, d]`, `v: [nk, d]`; `d` must be divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.check(&[q, k, v])?;
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
            return Err(Error::shape("attention", sq, sk));
        }
        if sv != sk {
            return Err(Error::shape("attention", sk, sv));
        }
        let (nq, nk, d) = (sq[0], sk[0], sq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::attr("attention", format!("{heads} heads do not divide width {d}")));
        }
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            nq,
            nk,
            d,
            heads,
        );
        let out = Tensor::new([nq, d], out)?;
        self.record(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    // ---------------------------------------------------------------- losses

    /// Mean binary cross-entropy of probabilities `p` against `target`, with
    /// probabilities clamped to `[1e-7, 1 - 1e-7]` and optional per-element weights.
    pub fn bce(&mut self, p: Var, target: &Tensor<S>, weights: Option<&Tensor<S>>) -> Result<Var> {
        self.check(&[p])?;
        let tp = self.value(p);
        if tp.shape() != target.shape() {
            return Err(Error::shape("bce", tp.shape(), target.shape()));
        }
        if let Some(w) = weights {
            if w.shape() != target.shape() {
                return Err(Error::shape("bce weights", w.shape(), target.shape()));
            }
        }
        let (lo, hi) = (S::of(BCE_EPS), S::one() - S::of(BCE_EPS));
        let mut total = S::zero();
        for (i, (&pv, &t)) in tp.data().iter().zip(target.data()).enumerate() {
            let pc = pv.max(lo).min(hi);
            let w = weights.map_or(S::one(), |w| w.data()[i]);
            total += w * (t * pc.ln() + (S::one() - t) * (S::one() - pc).ln());
        }
        let out = Tensor::scalar(-total / S::of(tp.len() as f64));
        let op = Op::Bce {
            p,
            target: target.clone(),
            weights: weights.cloned(),
        };
        self.record(out, op, &[p])
    }

    /// Soft Dice loss `1 - (2Σpt + s) / (Σp + Σt + s)`.
    pub fn soft_dice(&mut self, p: Var, target: &Tensor<S>, smooth: f64) -> Result<Var> {
        self.check(&[p])?;
        let tp = self.value(p);
        if tp.shape() != target.shape() {
            return Err(Error::shape("soft_dice", tp.shape(), target.shape()));
        }
        let s = S::of(smooth);
        let (num, den) = dice_terms(tp.data(), target.data(), s);
        let out = Tensor::scalar(S::one() - num / den);
        let op = Op::SoftDice {
            p,
            target: target.clone(),
            smooth: s,
        };
        self.record(out, op, &[p])
    }

    // ---------------------------------------------------------------- gradient hooks

    /// Identity in the forward pass; in the backward pass row `i` of the
    /// upstream gradient (first axis) is multiplied by `scales[i]`.
    pub fn grad_scale_rows(&mut self, x: Var, scales: &[S]) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        if t.rank() == 0 || t.shape()[0] != scales.len() {
            return Err(Error::shape("grad_scale_rows", t.shape(), &[scales.len()]));
        }
        let out = t.clone();
        self.record(out, Op::GradScaleRows(x, scales.to_vec()), &[x])
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Freezes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.frozen {
            return Err(Error::TapeFrozen);
        }
        self.check(&[loss])?;
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.frozen = true;
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::full(self.shape(loss).to_vec(), S::one()));
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.input_grads(id, &g)?;
            grads[id] = Some(g);
            for (input, gi) in contributions {
                if !self.nodes[input.id].requires_grad {
                    continue;
                }
                match &mut grads[input.id] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn input_grads(&self, id: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.id].value;
        let rg = |v: Var| self.nodes[v.id].requires_grad;
        let like = |v: Var, data: Vec<S>| Tensor::new(val(v).shape().to_vec(), data);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let mut ga = vec![S::zero(); val(*a).len()];
                let mut gb = vec![S::zero(); val(*b).len()];
                kernels::for_each_broadcast(sa, sb, g.shape(), |i, ia, ib| {
                    ga[ia] += g.data()[i];
                    gb[ib] += g.data()[i];
                });
                if neg {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                out.push((*a, like(*a, ga)?));
                out.push((*b, like(*b, gb)?));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut ga = vec![S::zero(); ta.len()];
                let mut gb = vec![S::zero(); tb.len()];
                kernels::for_each_broadcast(ta.shape(), tb.shape(), g.shape(), |i, ia, ib| {
                    ga[ia] += g.data()[i] * tb.data()[ib];
                    gb[ib] += g.data()[i] * ta.data()[ia];
                });
                out.push((*a, like(*a, ga)?));
                out.push((*b, like(*b, gb)?));
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * *c))),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if rg(*a) {
                    out.push((*a, like(*a, kernels::matmul_bt(g.data(), tb.data(), m, k, n))?));
                }
                if rg(*b) {
                    out.push((*b, like(*b, kernels::matmul_at(ta.data(), g.data(), m, k, n))?));
                }
            }
            Op::Im2Col(x, geom) => out.push((*x, like(*x, kernels::col2im(g.data(), *geom))?)),
            Op::Relu(x) => {
                let gx = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect();
                out.push((*x, like(*x, gx)?));
            }
            Op::Sigmoid(x) => {
                let gx = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y * (S::one() - y))
                    .collect();
                out.push((*x, like(*x, gx)?));
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + r;
                        let dot: S = (0..n).map(|i| g.data()[at(i)] * y[at(i)]).sum();
                        for i in 0..n {
                            gx[at(i)] = y[at(i)] * (g.data()[at(i)] - dot);
                        }
                    }
                }
                out.push((*x, like(*x, gx)?));
            }
            Op::LayerNorm { x, axis, xhat, rstd } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let nf = S::of(n as f64);
                let mut gx = vec![S::zero(); xhat.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + r;
                        let mg = (0..n).map(|i| g.data()[at(i)]).sum::<S>() / nf;
                        let mgx = (0..n).map(|i| g.data()[at(i)] * xhat[at(i)]).sum::<S>() / nf;
                        let rs = rstd[o * inner + r];
                        for i in 0..n {
                            gx[at(i)] = rs * (g.data()[at(i)] - mg - xhat[at(i)] * mgx);
                        }
                    }
                }
                out.push((*x, like(*x, gx)?));
            }
            Op::Permute(x, perm) => {
                let inv = kernels::inverse_perm(perm);
                let (_, gx) = kernels::permute(g.data(), g.shape(), &inv);
                out.push((*x, like(*x, gx)?));
            }
            Op::Reshape(x) => out.push((*x, like(*x, g.data().to_vec())?)),
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                for &v in xs {
                    let len = val(v).shape()[*axis];
                    let mut gx = Vec::with_capacity(val(v).len());
                    for o in 0..outer {
                        gx.extend_from_slice(&g.data()[(o * total + offset) * inner..(o * total + offset + len) * inner]);
                    }
                    offset += len;
                    out.push((v, like(v, gx)?));
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![S::zero(); val(*x).len()];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, like(*x, gx)?));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.item()))),
            Op::Mean(x) => {
                let n = S::of(val(*x).len() as f64);
                out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.item() / n)));
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let c = if matches!(node.op, Op::MeanAxis(..)) {
                    S::one() / S::of(n as f64)
                } else {
                    S::one()
                };
                let mut gx = vec![S::zero(); val(*x).len()];
                for o in 0..outer {
                    for i in 0..n {
                        let dst = &mut gx[(o * n + i) * inner..][..inner];
                        for (d, &s) in dst.iter_mut().zip(&g.data()[o * inner..][..inner]) {
                            *d = s * c;
                        }
                    }
                }
                out.push((*x, like(*x, gx)?));
            }
            Op::UpsampleNearest(x, f) => {
                let s = val(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h * f, w * f);
                let mut gx = vec![S::zero(); c * h * w];
                for (i, &gv) in g.data().iter().enumerate() {
                    let ch = i / (oh * ow);
                    let y = (i / ow) % oh;
                    let xx = i % ow;
                    gx[(ch * h + y / f) * w + xx / f] += gv;
                }
                out.push((*x, like(*x, gx)?));
            }
            Op::ResizeBilinear(x) => {
                let s = val(*x).shape();
                let gs = g.shape();
                let gx = kernels::resize_bilinear_backward(g.data(), s[0], s[1], s[2], gs[1], gs[2]);
                out.push((*x, like(*x, gx)?));
            }
            Op::SpaceToDepth(x, r) => {
                let gs = g.shape();
                out.push((*x, like(*x, kernels::depth_to_space(g.data(), gs[0], gs[1], gs[2], *r))?));
            }
            Op::DepthToSpace(x, r) => {
                let s = val(*x).shape();
                let gs = g.shape();
                out.push((*x, like(*x, kernels::space_to_depth(g.data(), gs[0], gs[1], gs[2], *r))?));
                debug_assert_eq!(s[0], gs[0] * r * r);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (nq, d) = (tq.shape()[0], tq.shape()[1]);
                let nk = tk.shape()[0];
                let (gq, gk, gv) = kernels::attention_backward(
                    g.data(),
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    probs,
                    nq,
                    nk,
                    d,
                    *heads,
                );
                out.push((*q, like(*q, gq)?));
                out.push((*k, like(*k, gk)?));
                out.push((*v, like(*v, gv)?));
            }
            Op::Bce { p, target, weights } => {
                let tp = val(*p);
                let n = S::of(tp.len() as f64);
                let (lo, hi) = (S::of(BCE_EPS), S::one() - S::of(BCE_EPS));
                let gs = g.item();
                let gx = tp
                    .data()
                    .iter()
                    .zip(target.data())
                    .enumerate()
                    .map(|(i, (&pv, &t))| {
                        if pv < lo || pv > hi {
                            return S::zero();
                        }
                        let w = weights.as_ref().map_or(S::one(), |w| w.data()[i]);
                        -gs * w * (t / pv - (S::one() - t) / (S::one() - pv)) / n
                    })
                    .collect();
                out.push((*p, like(*p, gx)?));
            }
            Op::SoftDice { p, target, smooth } => {
                let tp = val(*p);
                let (num, den) = dice_terms(tp.data(), target.data(), *smooth);
                let gs = g.item();
                let two = S::of(2.0);
                let gx = target
                    .data()
                    .iter()
                    .map(|&t| -gs * (two * t * den - num) / (den * den))
                    .collect();
                out.push((*p, like(*p, gx)?));
            }
            Op::GradScaleRows(x, scales) => {
                let row = g.len() / scales.len();
                let gx = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * scales[i / row])
                    .collect();
                out.push((*x, like(*x, gx)?));
            }
        }
        Ok(out)
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn dice_terms<S: Scalar>(p: &[S], t: &[S], smooth: S) -> (S, S) {
    let mut inter = S::zero();
    let mut sp = S::zero();
    let mut st = S::zero();
    for (&a, &b) in p.iter().zip(t) {
        inter += a * b;
        sp += a;
        st += b;
    }
    (S::of(2.0) * inter + smooth, sp + st + smooth)
}
