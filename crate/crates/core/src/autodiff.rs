//! Tape-based reverse-mode automatic differentiation over a closed op set.
//!
//! A [`Graph`] records every operation as a node holding its output value
//! and whatever the backward pass needs. Nodes are appended in execution
//! order, so the tape is topologically sorted by construction and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use wavedeblur::autodiff::{Graph, ParamId};
//! use wavedeblur::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(ParamId(0), Tensor::vector(&[1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.param(ParamId(0)).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::collections::BTreeMap;

use crate::conv::{self, ConvGeometry, ConvOptions};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable leaf; gradients are reported by this id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub const LAYERNORM_EPS: f64 = 1e-6;

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        y: Var,
        k: Var,
        geom: ConvGeometry,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AvgPool2(Var),
    Upsample2(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        rstd: Vec<T>,
    },
    SimpleGate(Var),
    WaveletKernel {
        lo: Var,
        hi: Var,
        channels: usize,
        flip: bool,
    },
    PolyProduct(Var, Var),
    Sum(Var),
    Mean(Var),
    SampleMean(Var),
    Log10 {
        x: Var,
        eps: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::ConvTranspose { .. } => "conv2d_transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AvgPool2(_) => "resample_down2",
            Op::Upsample2(_) => "resample_up2",
            Op::LayerNorm { .. } => "channel_layernorm",
            Op::SimpleGate(_) => "simple_gate",
            Op::WaveletKernel { .. } => "wavelet_kernel",
            Op::PolyProduct(..) => "poly_product",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SampleMean(_) => "sample_mean",
            Op::Log10 { .. } => "log10",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording tape. One graph serves exactly one backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    labels: BTreeMap<usize, String>,
    consumed: bool,
    macs: u64,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            labels: BTreeMap::new(),
            consumed: false,
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by the convolutions recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Attaches a human-readable name used in non-finite diagnostics.
    pub fn label(&mut self, v: Var, name: impl Into<String>) {
        self.labels.insert(v.0, name.into());
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, Some(id))
    }

    /// A leaf that receives a gradient but is not a parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let node = self.nodes.len();
        if !value.all_finite() {
            let label = inputs
                .iter()
                .find_map(|v| self.labels.get(&v.0))
                .map(|l| format!(", input `{l}`"))
                .unwrap_or_default();
            return Err(Error::NonFinite {
                op: op.name(),
                node,
                label,
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(node))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, opts: ConvOptions) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let (out, geom) = conv::conv2d_forward(self.value(x), self.value(k), bias, opts)?;
        self.macs += geom.macs();
        let mut inputs = vec![x, k];
        inputs.extend(b);
        self.push(out, Op::Conv { x, k, b, geom }, &inputs)
    }

    pub fn conv2d_transpose(&mut self, y: Var, k: Var, opts: ConvOptions) -> Result<Var> {
        let (out, geom) = conv::conv2d_transpose_forward(self.value(y), self.value(k), opts)?;
        self.macs += geom.macs();
        self.push(out, Op::ConvTranspose { y, k, geom }, &[y, k])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// 2x2 average pooling.
    pub fn resample_down2(&mut self, x: Var) -> Result<Var> {
        let out = avg_pool2(self.value(x))?;
        self.push(out, Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn resample_up2(&mut self, x: Var) -> Result<Var> {
        let out = upsample2(self.value(x));
        self.push(out, Op::Upsample2(x), &[x])
    }

    /// Normalizes across channels at every pixel, then applies a
    /// per-channel affine map.
    pub fn channel_layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape().0;
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape("channel_layernorm", format!("{c} affine values"), gv.len()));
        }
        let plane = h * w;
        let eps = T::of(LAYERNORM_EPS);
        let inv_c = T::one() / T::of(c as f64);
        let data = xv.data();
        let mut normalized = vec![T::zero(); data.len()];
        let mut rstd = vec![T::zero(); n * plane];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let mut mean = T::zero();
                for ch in 0..c {
                    mean = mean + data[base + ch * plane + p];
                }
                mean = mean * inv_c;
                let mut var = T::zero();
                for ch in 0..c {
                    let d = data[base + ch * plane + p] - mean;
                    var = var + d * d;
                }
                let r = T::one() / (var * inv_c + eps).sqrt();
                rstd[b * plane + p] = r;
                for ch in 0..c {
                    let i = base + ch * plane + p;
                    let xh = (data[i] - mean) * r;
                    normalized[i] = xh;
                    out[i] = xh * gv.data()[ch] + bv.data()[ch];
                }
            }
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Splits channels into two halves and multiplies them.
    pub fn simple_gate(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape().0;
        if c % 2 != 0 {
            return Err(Error::shape("simple_gate", "even channel count", c));
        }
        let half = c / 2 * h * w;
        let mut out = Vec::with_capacity(n * half);
        for b in xv.data().chunks(2 * half) {
            out.extend(b[..half].iter().zip(&b[half..]).map(|(&p, &q)| p * q));
        }
        let out = Tensor::from_vec(Shape::new(n, c / 2, h, w), out)?;
        self.push(out, Op::SimpleGate(x), &[x])
    }

    /// Builds the grouped 2D wavelet kernel `(4·channels, 1, N, N)` from a
    /// low-pass and a high-pass filter by outer products. Within each
    /// channel the subbands are ordered LL, LH, HL, HH, where the first
    /// letter names the filter along rows. With `flip` every filter is
    /// reversed first.
    pub fn wavelet_kernel(&mut self, lo: Var, hi: Var, channels: usize, flip: bool) -> Result<Var> {
        let (l, h) = (self.value(lo), self.value(hi));
        if l.len() != h.len() || l.is_empty() {
            return Err(Error::shape("wavelet_kernel", l.len(), h.len()));
        }
        let out = wavelet_kernel_values(l.data(), h.data(), channels, flip);
        self.push(
            out,
            Op::WaveletKernel {
                lo,
                hi,
                channels,
                flip,
            },
            &[lo, hi],
        )
    }

    /// Full linear convolution of two vectors.
    pub fn poly_product(&mut self, u: Var, v: Var) -> Result<Var> {
        let (uv, vv) = (self.value(u), self.value(v));
        if uv.is_empty() || vv.is_empty() {
            return Err(Error::InvalidArgument("poly_product of an empty vector".into()));
        }
        let out = Tensor::vector(&poly_product_values(uv.data(), vv.data()));
        self.push(out, Op::PolyProduct(u, v), &[u, v])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().fold(T::zero(), |a, &e| a + e) / T::of(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over channels and pixels of every batch item: `(n,1,1,1)`.
    pub fn sample_mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.shape().n();
        let per = v.len() / n;
        let inv = T::one() / T::of(per as f64);
        let out: Vec<T> = v
            .data()
            .chunks(per)
            .map(|c| c.iter().fold(T::zero(), |a, &e| a + e) * inv)
            .collect();
        let out = Tensor::from_vec(Shape::new(n, 1, 1, 1), out)?;
        self.push(out, Op::SampleMean(x), &[x])
    }

    /// Elementwise `log10(x + eps)`.
    pub fn log10(&mut self, x: Var, eps: f64) -> Result<Var> {
        let eps = T::of(eps);
        let out = self.value(x).map(|v| (v + eps).log10());
        self.push(out, Op::Log10 { x, eps }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let mut contribs: Vec<(Var, Vec<T>)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, k, b, geom } => {
                    if needs(*x) {
                        contribs.push((*x, conv::input_grad_raw(&g, self.value(*k).data(), geom)));
                    }
                    if needs(*k) {
                        contribs.push((*k, conv::kernel_grad_raw(self.value(*x).data(), &g, geom)));
                    }
                    if let Some(b) = b.filter(|b| needs(*b)) {
                        contribs.push((b, conv::bias_grad_raw(&g, geom)));
                    }
                }
                Op::ConvTranspose { y, k, geom } => {
                    // the op maps y through the input-adjoint of conv2d, so its
                    // own adjoint is conv2d and the kernel gradient swaps roles
                    if needs(*y) {
                        contribs.push((*y, conv::forward_raw(&g, self.value(*k).data(), None, geom)));
                    }
                    if needs(*k) {
                        contribs.push((*k, conv::kernel_grad_raw(&g, self.value(*y).data(), geom)));
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        contribs.push((*a, g.clone()));
                    }
                    if needs(*b) {
                        contribs.push((*b, g));
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        contribs.push((*b, g.iter().map(|&v| -v).collect()));
                    }
                    if needs(*a) {
                        contribs.push((*a, g));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if needs(*a) {
                        contribs.push((*a, g.iter().zip(bv).map(|(&d, &q)| d * q).collect()));
                    }
                    if needs(*b) {
                        contribs.push((*b, g.iter().zip(av).map(|(&d, &p)| d * p).collect()));
                    }
                }
                Op::Scale(a, s) => contribs.push((*a, g.iter().map(|&d| d * *s).collect())),
                Op::AvgPool2(x) => contribs.push((*x, avg_pool2_backward(&g, self.shape(*x)))),
                Op::Upsample2(x) => contribs.push((*x, upsample2_backward(&g, self.shape(*x)))),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    rstd,
                } => {
                    let (dx, dg, db) = layernorm_backward(
                        &g,
                        normalized,
                        rstd,
                        self.value(*gain).data(),
                        self.shape(*x),
                    );
                    if needs(*x) {
                        contribs.push((*x, dx));
                    }
                    if needs(*gain) {
                        contribs.push((*gain, dg));
                    }
                    if needs(*bias) {
                        contribs.push((*bias, db));
                    }
                }
                Op::SimpleGate(x) => {
                    let xv = self.value(*x);
                    let half = xv.len() / xv.shape().n() / 2;
                    let mut dx = vec![T::zero(); xv.len()];
                    for ((dst, src), gb) in dx
                        .chunks_mut(2 * half)
                        .zip(xv.data().chunks(2 * half))
                        .zip(g.chunks(half))
                    {
                        for j in 0..half {
                            dst[j] = gb[j] * src[half + j];
                            dst[half + j] = gb[j] * src[j];
                        }
                    }
                    contribs.push((*x, dx));
                }
                Op::WaveletKernel {
                    lo,
                    hi,
                    channels,
                    flip,
                } => {
                    let (dlo, dhi) = wavelet_kernel_backward(
                        &g,
                        self.value(*lo).data(),
                        self.value(*hi).data(),
                        *channels,
                        *flip,
                    );
                    if needs(*lo) {
                        contribs.push((*lo, dlo));
                    }
                    if needs(*hi) {
                        contribs.push((*hi, dhi));
                    }
                }
                Op::PolyProduct(u, v) => {
                    let (uv, vv) = (self.value(*u).data(), self.value(*v).data());
                    if needs(*u) {
                        let du = (0..uv.len())
                            .map(|n| (0..vv.len()).fold(T::zero(), |a, k| a + g[n + k] * vv[k]))
                            .collect();
                        contribs.push((*u, du));
                    }
                    if needs(*v) {
                        let dv = (0..vv.len())
                            .map(|k| (0..uv.len()).fold(T::zero(), |a, n| a + g[n + k] * uv[n]))
                            .collect();
                        contribs.push((*v, dv));
                    }
                }
                Op::Sum(x) => contribs.push((*x, vec![g[0]; self.value(*x).len()])),
                Op::Mean(x) => {
                    let len = self.value(*x).len();
                    contribs.push((*x, vec![g[0] / T::of(len as f64); len]));
                }
                Op::SampleMean(x) => {
                    let xv = self.value(*x);
                    let per = xv.len() / xv.shape().n();
                    let inv = T::one() / T::of(per as f64);
                    let dx = g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, per)).collect();
                    contribs.push((*x, dx));
                }
                Op::Log10 { x, eps } => {
                    let ln10 = T::of(std::f64::consts::LN_10);
                    let dx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&d, &v)| d / ((v + *eps) * ln10))
                        .collect();
                    contribs.push((*x, dx));
                }
            }
            for (v, c) in contribs {
                accumulate(&mut grads[v.0], c);
            }
        }

        let mut by_param = BTreeMap::new();
        let mut leaves = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &self.nodes[i];
            let t = Tensor::from_vec(node.value.shape(), g)?;
            if let Some(id) = node.param {
                by_param.insert(id, t.clone());
            }
            leaves.insert(Var(i), t);
        }
        Ok(Gradients { by_param, leaves })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a = *a + c;
            }
        }
        None => *slot = Some(contrib),
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_param: BTreeMap<ParamId, Tensor<T>>,
    leaves: BTreeMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    /// Gradient with respect to a leaf of the graph.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

pub fn avg_pool2<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().0;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Divisibility {
            op: "resample_down2",
            height: h,
            width: w,
            factor: 2,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in d.chunks(h * w) {
        for y in 0..oh {
            let r0 = &plane[2 * y * w..];
            let r1 = &plane[(2 * y + 1) * w..];
            for xx in 0..ow {
                out.push((r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]) * quarter);
            }
        }
    }
    Tensor::from_vec(Shape::new(n, c, oh, ow), out)
}

fn avg_pool2_backward<T: Element>(g: &[T], in_shape: Shape) -> Vec<T> {
    let [_, _, h, w] = in_shape.0;
    let ow = w / 2;
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); in_shape.numel()];
    for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(h * w / 4)) {
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = gp[(y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    dx
}

pub fn upsample2<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for y in 0..oh {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(Shape::new(n, c, oh, ow), out).expect("upsample shape")
}

fn upsample2_backward<T: Element>(g: &[T], in_shape: Shape) -> Vec<T> {
    let [_, _, h, w] = in_shape.0;
    let ow = 2 * w;
    let mut dx = vec![T::zero(); in_shape.numel()];
    for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
        for y in 0..2 * h {
            for x in 0..ow {
                let d = &mut plane[(y / 2) * w + x / 2];
                *d = *d + gp[y * ow + x];
            }
        }
    }
    dx
}

fn layernorm_backward<T: Element>(
    g: &[T],
    normalized: &[T],
    rstd: &[T],
    gain: &[T],
    shape: Shape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = shape.0;
    let plane = h * w;
    let inv_c = T::one() / T::of(c as f64);
    let mut dx = vec![T::zero(); g.len()];
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + p;
                let d = g[i] * gain[ch];
                mean_d = mean_d + d;
                mean_dx = mean_dx + d * normalized[i];
                dg[ch] = dg[ch] + g[i] * normalized[i];
                db[ch] = db[ch] + g[i];
            }
            mean_d = mean_d * inv_c;
            mean_dx = mean_dx * inv_c;
            let r = rstd[b * plane + p];
            for ch in 0..c {
                let i = base + ch * plane + p;
                let d = g[i] * gain[ch];
                dx[i] = r * (d - mean_d - normalized[i] * mean_dx);
            }
        }
    }
    (dx, dg, db)
}

/// Subband filter pairs (rows, columns) in LL, LH, HL, HH order.
pub(crate) const SUBBANDS: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

pub(crate) fn wavelet_kernel_values<T: Element>(lo: &[T], hi: &[T], channels: usize, flip: bool) -> Tensor<T> {
    let n = lo.len();
    let tap = |f: &[T], i: usize| if flip { f[n - 1 - i] } else { f[i] };
    let mut data = Vec::with_capacity(4 * channels * n * n);
    for _ in 0..channels {
        for (row_hi, col_hi) in SUBBANDS {
            let u = if row_hi { hi } else { lo };
            let v = if col_hi { hi } else { lo };
            for i in 0..n {
                for j in 0..n {
                    data.push(tap(u, i) * tap(v, j));
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(4 * channels, 1, n, n), data).expect("kernel shape")
}

fn wavelet_kernel_backward<T: Element>(g: &[T], lo: &[T], hi: &[T], channels: usize, flip: bool) -> (Vec<T>, Vec<T>) {
    let n = lo.len();
    let idx = |i: usize| if flip { n - 1 - i } else { i };
    let mut dlo = vec![T::zero(); n];
    let mut dhi = vec![T::zero(); n];
    for ch in 0..channels {
        for (s, (row_hi, col_hi)) in SUBBANDS.into_iter().enumerate() {
            let u = if row_hi { hi } else { lo };
            let v = if col_hi { hi } else { lo };
            let gk = &g[(ch * 4 + s) * n * n..(ch * 4 + s + 1) * n * n];
            for i in 0..n {
                for j in 0..n {
                    let d = gk[i * n + j];
                    let (ui, vj) = (idx(i), idx(j));
                    let du = d * v[vj];
                    let dv = d * u[ui];
                    if row_hi {
                        dhi[ui] = dhi[ui] + du;
                    } else {
                        dlo[ui] = dlo[ui] + du;
                    }
                    if col_hi {
                        dhi[vj] = dhi[vj] + dv;
                    } else {
                        dlo[vj] = dlo[vj] + dv;
                    }
                }
            }
        }
    }
    (dlo, dhi)
}

pub(crate) fn poly_product_values<T: Element>(u: &[T], v: &[T]) -> Vec<T> {
    let mut w = vec![T::zero(); u.len() + v.len() - 1];
    for (n, &a) in u.iter().enumerate() {
        for (k, &b) in v.iter().enumerate() {
            w[n + k] = w[n + k] + a * b;
        }
    }
    w
}

/// Result of a finite-difference comparison.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(p + eps) - f(p - eps)) / (2 eps)`.
///
/// `f` receives a fresh graph and the parameter vars (bound in order as
/// `ParamId(0..)`) and returns the scalar output. At most `samples`
/// coordinates per parameter are checked, picked by a deterministic stride.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64, samples: usize, floor: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut coords = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let step = (p.len() / samples.max(1)).max(1);
        coords.extend((0..p.len()).step_by(step).take(samples).map(|i| (pi, i)));
    }
    grad_check_at(f, params, &coords, eps, floor)
}

/// [`grad_check`] over an explicit list of `(parameter, flat index)` pairs.
pub fn grad_check_at<F>(f: F, params: &[Tensor<f64>], coords: &[(usize, usize)], eps: f64, floor: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let bind = |g: &mut Graph<f64>, ps: &[Tensor<f64>]| -> Vec<Var> {
        ps.iter()
            .enumerate()
            .map(|(i, p)| g.param(ParamId(i), p.clone()))
            .collect()
    };
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = bind(&mut g, ps);
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars = bind(&mut g, params);
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck::default();
    let mut work = params.to_vec();
    for &(pi, idx) in coords {
        let p = params
            .get(pi)
            .filter(|p| idx < p.len())
            .ok_or_else(|| Error::InvalidArgument(format!("no coordinate ({pi}, {idx})")))?;
        let base = p.data()[idx];
        work[pi].data_mut()[idx] = base + eps;
        let up = eval(&work)?;
        work[pi].data_mut()[idx] = base - eps;
        let down = eval(&work)?;
        work[pi].data_mut()[idx] = base;
        let numeric = (up - down) / (2.0 * eps);
        let a = grads.param(ParamId(pi)).map_or(0.0, |t| t.data()[idx]);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Padding;

    fn t(shape: Shape, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, vals).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::full(Shape::new(1, 2, 3, 3), 0.7));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::vector(&[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::vector(&[1.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_is_surfaced() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(&[0.0]));
        g.label(x, "zeros");
        let err = g.log10(x, 0.0).unwrap_err();
        match err {
            Error::NonFinite { op, label, .. } => {
                assert_eq!(op, "log10");
                assert!(label.contains("zeros"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv_of_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
        let k = g.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
        let y = g.conv2d(x, k, None, ConvOptions::new(2, 1, Padding::none())).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn transpose_of_single_pixel() {
        let mut g = Graph::<f64>::new();
        let y = g.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
        let k = g.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
        let x = g.conv2d_transpose(y, k, ConvOptions::new(2, 1, Padding::none())).unwrap();
        assert_eq!(g.value(x).shape(), Shape::new(1, 1, 2, 2));
        assert!(g.value(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identities() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 2, 2), |[_, c, y, x]| (c * 4 + y * 2 + x) as f64);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = g.constant(Tensor::zeros(x.shape()));
        let o = g.constant(Tensor::ones(x.shape()));
        let a = g.add(xv, z).unwrap();
        let m = g.mul(xv, o).unwrap();
        assert_eq!(g.value(a), &x);
        assert_eq!(g.value(m), &x);
        let bad = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(g.add(xv, bad).is_err());
    }

    #[test]
    fn pooling_and_upsampling() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(avg_pool2(&x).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::full(Shape::new(1, 2, 4, 6), 0.3);
        let d = avg_pool2(&c).unwrap();
        assert_eq!(d.shape(), Shape::new(1, 2, 2, 3));
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let r = Tensor::<f64>::from_fn(Shape::new(2, 1, 3, 3), |[b, _, y, x]| (b * 9 + y * 3 + x) as f64);
        assert_eq!(avg_pool2(&upsample2(&r)).unwrap(), r);
        assert!(avg_pool2(&Tensor::<f64>::zeros(Shape::new(1, 1, 3, 2))).is_err());
    }

    #[test]
    fn layernorm_statistics() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 5, 3, 3), |[_, c, y, x]| ((c * 7 + y * 3 + x) as f64).sin() * 3.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gain = g.constant(Tensor::full(Shape::vector(5), 1.7));
        let bias = g.constant(Tensor::full(Shape::vector(5), -0.4));
        let y = g.channel_layernorm(xv, gain, bias).unwrap();
        let yv = g.value(y).clone();
        for p in 0..9 {
            let vals: Vec<f64> = (0..5).map(|c| yv.data()[c * 9 + p]).collect();
            let mean = vals.iter().sum::<f64>() / 5.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!((mean + 0.4).abs() < 1e-5);
            assert!((var - 1.7 * 1.7).abs() < 1e-5);
        }
        let flat = g.constant(Tensor::full(Shape::new(1, 5, 2, 2), 2.5));
        let zero_b = g.constant(Tensor::zeros(Shape::vector(5)));
        let one_g = g.constant(Tensor::ones(Shape::vector(5)));
        let z = g.channel_layernorm(flat, one_g, zero_b).unwrap();
        assert!(g.value(z).max_abs() == 0.0);
    }

    #[test]
    fn poly_product_basics() {
        assert_eq!(poly_product_values(&[1.0, 1.0], &[1.0, 1.0]), vec![1.0, 2.0, 1.0]);
        assert_eq!(poly_product_values(&[1.0], &[3.0, -2.0, 5.0]), vec![3.0, -2.0, 5.0]);
    }

    #[test]
    fn quadratic_form_grad_check() {
        // f(p) = sum(p ⊙ p ⊙ c)
        let c = Tensor::from_fn(Shape::new(1, 1, 3, 3), |[_, _, y, x]| 1.0 + (y * 3 + x) as f64);
        let p = Tensor::from_fn(Shape::new(1, 1, 3, 3), |[_, _, y, x]| 0.3 * y as f64 - 0.2 * x as f64 + 0.15);
        let report = grad_check(
            |g, vars| {
                let cv = g.constant(c.clone());
                let sq = g.mul(vars[0], vars[0])?;
                let w = g.mul(sq, cv)?;
                g.sum(w)
            },
            &[p],
            // central differences are exact on quadratics; a wide step keeps
            // cancellation error out of the comparison
            1e-1,
            9,
            1e-8,
        )
        .unwrap();
        assert_eq!(report.checked, 9);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
