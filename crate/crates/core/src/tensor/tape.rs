use std::collections::HashMap;
use std::f64::consts::LN_2;

use super::conv::{self, Geom};
use super::{ParamId, ParamStore, Shape, Tensor};
use crate::entropy::laplace::{log_mass_with_grad, MIN_LOG_SCALE};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, g: Geom },
    ConvT { x: Var, w: Var, b: Option<Var>, g: Geom },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    MulConst { a: Var, c: Tensor },
    Shift { a: Var },
    Scale { a: Var, f: f32 },
    LeakyRelu { a: Var, slope: f32 },
    Softplus { a: Var },
    Exp { a: Var },
    Pow { a: Var, p: f32 },
    ClampMin { a: Var, min: f32 },
    Round { a: Var },
    Concat { parts: Vec<Var> },
    Slice { a: Var, start: usize },
    Sum { a: Var },
    Mean { a: Var },
    MeanSpatial { a: Var },
    LaplaceBits { v: Var, mu: Var, s: Var },
    Blur { a: Var },
    AvgPool2 { a: Var },
    Crop { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward computations for a single reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

pub(crate) const BLUR_TAPS: usize = 11;
pub(crate) const BLUR_SIGMA: f64 = 1.5;

pub(crate) fn gaussian_taps() -> [f32; BLUR_TAPS] {
    let mut taps = [0.0f64; BLUR_TAPS];
    let c = (BLUR_TAPS / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-(d * d) / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| (t / s) as f32)
}

/// Per-axis strides into `b` when broadcasting it against `a`; a stride of 0
/// marks a broadcast axis.
fn broadcast_strides(a: Shape, b: Shape) -> Result<[usize; 4]> {
    const AXES: [&str; 4] = ["batch", "channels", "height", "width"];
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        if b[i] == a[i] {
            strides[i] = acc;
        } else if b[i] == 1 {
            strides[i] = 0;
        } else {
            return Err(Error::dim(AXES[i], a[i], b[i]));
        }
        acc *= b[i];
    }
    Ok(strides)
}

/// Calls `f(i_a, i_b)` for every element of `a` and the matching element of
/// the broadcast operand.
#[inline]
fn for_each_broadcast(a: Shape, strides: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let mut ia = 0;
    for n in 0..a[0] {
        for c in 0..a[1] {
            let base = n * strides[0] + c * strides[1];
            for h in 0..a[2] {
                let row = base + h * strides[2];
                for w in 0..a[3] {
                    f(ia, row + w * strides[3]);
                    ia += 1;
                }
            }
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
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

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked but not stored in any parameter.
    /// Used by gradient checks on non-parameter inputs.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        conv::check_conv(xs, ws, b.map(|b| self.shape(b)), 0, 1, stride)?;
        let g = conv::conv2d_geom(xs, ws, stride, pad)?;
        let out = conv::conv2d_raw(self.value(x), self.value(w), b.map(|b| self.value(b)), &g);
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, g }, rg))
    }

    /// Transposed convolution with weight layout `[in, out, k, k]`. Output
    /// extent is `(in - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        conv::check_conv(xs, ws, b.map(|b| self.shape(b)), 1, 0, stride)?;
        let g = conv::conv_t_geom(xs, ws, stride, pad, output_pad)?;
        let out = conv::conv_t_raw(self.value(x), self.value(w), b.map(|b| self.value(b)), &g);
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::ConvT { x, w, b, g }, rg))
    }

    /// Affine map over the channel axis of `[B, in, 1, 1]` inputs with weight
    /// `[out, in, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs[2] != 1 || xs[3] != 1 {
            return Err(Error::dim("height", 1, xs[2] * xs[3]));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim("in_features", ws[1], xs[1]));
        }
        let (n, fin, fout) = (xs[0], ws[1], ws[0]);
        if let Some(b) = b {
            let numel = self.value(b).numel();
            if numel != fout {
                return Err(Error::dim("bias", fout, numel));
            }
        }
        let mut out = Tensor::zeros([n, fout, 1, 1]);
        {
            let (xv, wv) = (self.value(x).data(), self.value(w).data());
            let bv = b.map(|b| self.value(b).data());
            for bi in 0..n {
                for o in 0..fout {
                    let mut acc = bv.map_or(0.0, |b| b[o]);
                    for i in 0..fin {
                        acc += wv[o * fin + i] * xv[bi * fin + i];
                    }
                    out.data_mut()[bi * fout + o] = acc;
                }
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let strides = broadcast_strides(sa, sb)?;
        let mut out = Tensor::zeros(sa);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            if sa == sb {
                for ((o, x), y) in od.iter_mut().zip(av).zip(bv) {
                    *o = f(*x, *y);
                }
            } else {
                for_each_broadcast(sa, strides, |i, j| od[i] = f(av[i], bv[j]));
            }
        }
        Ok(out)
    }

    /// `a + b`, with `b` broadcast over any unit axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    /// Elementwise product, with `b` broadcast over any unit axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Div { a, b }, rg))
    }

    /// Multiplies by a constant tensor of the same shape (e.g. a kernel mask).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if c.shape() != self.shape(a) {
            return Err(Error::dim("mask", self.value(a).numel(), c.numel()));
        }
        let out = Tensor::from_vec(
            c.shape(),
            self.value(a).data().iter().zip(c.data()).map(|(x, m)| x * m).collect(),
        )?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MulConst { a, c }, rg))
    }

    /// Adds a constant tensor; the gradient passes through unchanged.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if c.shape() != self.shape(a) {
            return Err(Error::dim("offset", self.value(a).numel(), c.numel()));
        }
        let out = Tensor::from_vec(
            c.shape(),
            self.value(a).data().iter().zip(c.data()).map(|(x, y)| x + y).collect(),
        )?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Shift { a }, rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Shift { a }, rg)
    }

    pub fn scale(&mut self, a: Var, f: f32) -> Var {
        let out = self.value(a).map(|x| x * f);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, f }, rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let out = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(out, Op::LeakyRelu { a, slope }, rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softplus { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp { a }, rg)
    }

    /// `a^p` for positive `a`.
    pub fn pow(&mut self, a: Var, p: f32) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(&[a]);
        self.push(out, Op::Pow { a, p }, rg)
    }

    pub fn clamp_min(&mut self, a: Var, min: f32) -> Var {
        let out = self.value(a).map(|x| x.max(min));
        let rg = self.rg(&[a]);
        self.push(out, Op::ClampMin { a, min }, rg)
    }

    /// Round half away from zero with a straight-through gradient.
    pub fn round_ste(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.round() + 0.0);
        let rg = self.rg(&[a]);
        self.push(out, Op::Round { a }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of an empty list".into()))?;
        let s0 = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != s0[0] {
                return Err(Error::dim("batch", s0[0], s[0]));
            }
            if s[2] != s0[2] {
                return Err(Error::dim("height", s0[2], s[2]));
            }
            if s[3] != s0[3] {
                return Err(Error::dim("width", s0[3], s[3]));
            }
            channels += s[1];
        }
        let plane = s0[2] * s0[3];
        let mut out = Tensor::zeros([s0[0], channels, s0[2], s0[3]]);
        for n in 0..s0[0] {
            let mut c0 = 0;
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                let src = &t.data()[n * c * plane..(n + 1) * c * plane];
                let dst = (n * channels + c0) * plane;
                out.data_mut()[dst..dst + c * plane].copy_from_slice(src);
                c0 += c;
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s[1] {
            return Err(Error::dim("channels", s[1], start + len));
        }
        let plane = s[2] * s[3];
        let mut out = Tensor::zeros([s[0], len, s[2], s[3]]);
        for n in 0..s[0] {
            let src = (n * s[1] + start) * plane;
            out.data_mut()[n * len * plane..(n + 1) * len * plane]
                .copy_from_slice(&self.value(a).data()[src..src + len * plane]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Slice { a, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s as f32), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|&x| x as f64).sum();
        let m = (s / t.numel() as f64) as f32;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean { a }, rg)
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C, 1, 1]`.
    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let plane = s[2] * s[3];
        let data = self
            .value(a)
            .data()
            .chunks(plane)
            .map(|c| (c.iter().map(|&x| x as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let out = Tensor::from_vec([s[0], s[1], 1, 1], data).expect("shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanSpatial { a }, rg)
    }

    /// Total bits `sum(-log2 P(v))` of the values under discretized
    /// Laplacians with location `mu` and scale `exp(log_scale)`. `mu` and
    /// `log_scale` broadcast over unit axes of `v`'s shape.
    pub fn laplace_bits(&mut self, v: Var, mu: Var, log_scale: Var) -> Result<Var> {
        let sv = self.shape(v);
        let ms = broadcast_strides(sv, self.shape(mu))?;
        let ss = broadcast_strides(sv, self.shape(log_scale))?;
        if ms != ss {
            return Err(Error::dim("log_scale", self.value(mu).numel(), self.value(log_scale).numel()));
        }
        let (vv, mv, sd) = (self.value(v).data(), self.value(mu).data(), self.value(log_scale).data());
        let mut total = 0.0f64;
        for_each_broadcast(sv, ms, |i, j| {
            let s = (sd[j] as f64).max(MIN_LOG_SCALE);
            total -= log_mass_with_grad(vv[i] as f64 - mv[j] as f64, s).0;
        });
        let rg = self.rg(&[v, mu, log_scale]);
        Ok(self.push(
            Tensor::scalar((total / LN_2) as f32),
            Op::LaplaceBits { v, mu, s: log_scale },
            rg,
        ))
    }

    /// Depthwise 11x11 Gaussian (sigma 1.5) filter with valid padding.
    pub fn gaussian_blur(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s[2] < BLUR_TAPS || s[3] < BLUR_TAPS {
            return Err(Error::dim("height", BLUR_TAPS, s[2].min(s[3])));
        }
        let out = blur_forward(self.value(a));
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Blur { a }, rg))
    }

    /// 2x2 average pooling, stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for p in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    let i = (p * h + 2 * y) * w + 2 * x;
                    let d = t.data();
                    out.data_mut()[(p * oh + y) * ow + x] = 0.25 * (d[i] + d[i + 1] + d[i + w] + d[i + w + 1]);
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::AvgPool2 { a }, rg)
    }

    /// Keeps the top-left `[h, w]` spatial window.
    pub fn crop(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(a);
        if h > s[2] {
            return Err(Error::dim("height", s[2], h));
        }
        if w > s[3] {
            return Err(Error::dim("width", s[3], w));
        }
        if h == s[2] && w == s[3] {
            return Ok(a);
        }
        let out = self.value(a).crop(h, w);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Crop { a }, rg))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients accumulate into
    /// `store`, which must have been reset with `zero_grad` since the last
    /// pass. Returns gradients for every tape node that requires one.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.consumed {
            return Err(Error::Contract("tape already differentiated".into()));
        }
        store.begin_accumulate()?;
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads, store);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
        store: &mut ParamStore,
    ) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate(*id, g),
            Op::Conv2d { x, w, b, g: geom } => {
                let [n, _, _, _] = val(*x).shape();
                let o = val(*w).shape()[0];
                let (rows, cols) = (geom.rows(), geom.cols());
                let in_per = geom.c * geom.h * geom.w;
                let out_per = o * cols;
                let mut col = vec![0.0f32; rows * cols];
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for bi in 0..n {
                            for (oc, chunk) in g[bi * out_per..(bi + 1) * out_per].chunks(cols).enumerate() {
                                gb[oc] += chunk.iter().sum::<f32>();
                            }
                        }
                    });
                }
                if wants(*w) {
                    acc(*w, &mut |gw| {
                        for bi in 0..n {
                            conv::im2col(&val(*x).data()[bi * in_per..(bi + 1) * in_per], geom, &mut col);
                            conv::gemm(o, cols, rows, &g[bi * out_per..(bi + 1) * out_per], false, &col, true, gw, true);
                        }
                    });
                }
                if wants(*x) {
                    acc(*x, &mut |gx| {
                        for bi in 0..n {
                            conv::gemm(rows, o, cols, val(*w).data(), true, &g[bi * out_per..(bi + 1) * out_per], false, &mut col, false);
                            conv::col2im(&col, geom, &mut gx[bi * in_per..(bi + 1) * in_per]);
                        }
                    });
                }
            }
            Op::ConvT { x, w, b, g: geom } => {
                let [n, ci, _, _] = val(*x).shape();
                let (rows, cols) = (geom.rows(), geom.cols());
                let in_per = ci * cols;
                let out_per = geom.c * geom.h * geom.w;
                let plane = geom.h * geom.w;
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for bi in 0..n {
                            for (oc, chunk) in g[bi * out_per..(bi + 1) * out_per].chunks(plane).enumerate() {
                                gb[oc] += chunk.iter().sum::<f32>();
                            }
                        }
                    });
                }
                if wants(*w) || wants(*x) {
                    let mut gcols = vec![0.0f32; n * rows * cols];
                    for bi in 0..n {
                        conv::im2col(&g[bi * out_per..(bi + 1) * out_per], geom, &mut gcols[bi * rows * cols..(bi + 1) * rows * cols]);
                    }
                    acc(*w, &mut |gw| {
                        for bi in 0..n {
                            conv::gemm(ci, cols, rows, &val(*x).data()[bi * in_per..(bi + 1) * in_per], false, &gcols[bi * rows * cols..(bi + 1) * rows * cols], true, gw, true);
                        }
                    });
                    acc(*x, &mut |gx| {
                        for bi in 0..n {
                            conv::gemm(ci, rows, cols, val(*w).data(), false, &gcols[bi * rows * cols..(bi + 1) * rows * cols], false, &mut gx[bi * in_per..(bi + 1) * in_per], true);
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let [n, fin, _, _] = val(*x).shape();
                let fout = val(*w).shape()[0];
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for bi in 0..n {
                            for o in 0..fout {
                                gb[o] += g[bi * fout + o];
                            }
                        }
                    });
                }
                acc(*w, &mut |gw| {
                    let xv = val(*x).data();
                    for bi in 0..n {
                        for o in 0..fout {
                            let go = g[bi * fout + o];
                            for i in 0..fin {
                                gw[o * fin + i] += go * xv[bi * fin + i];
                            }
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    let wv = val(*w).data();
                    for bi in 0..n {
                        for o in 0..fout {
                            let go = g[bi * fout + o];
                            for i in 0..fin {
                                gx[bi * fin + i] += go * wv[o * fin + i];
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let strides = broadcast_strides(sa, sb).expect("checked in forward");
                acc(*b, &mut |gb| for_each_broadcast(sa, strides, |i, j| gb[j] += sign * g[i]));
            }
            Op::Mul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let strides = broadcast_strides(sa, sb).expect("checked in forward");
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| for_each_broadcast(sa, strides, |i, j| ga[i] += g[i] * bv[j]));
                acc(*b, &mut |gb| for_each_broadcast(sa, strides, |i, j| gb[j] += g[i] * av[i]));
            }
            Op::Div { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let strides = broadcast_strides(sa, sb).expect("checked in forward");
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| for_each_broadcast(sa, strides, |i, j| ga[i] += g[i] / bv[j]));
                acc(*b, &mut |gb| {
                    for_each_broadcast(sa, strides, |i, j| gb[j] -= g[i] * av[i] / (bv[j] * bv[j]))
                });
            }
            Op::MulConst { a, c } => {
                acc(*a, &mut |ga| {
                    for ((x, y), m) in ga.iter_mut().zip(g).zip(c.data()) {
                        *x += y * m;
                    }
                });
            }
            Op::Shift { a } | Op::Round { a } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Scale { a, f } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y));
            }
            Op::LeakyRelu { a, slope } => {
                let av = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                        *x += if *v >= 0.0 { *y } else { slope * y };
                    }
                });
            }
            Op::Softplus { a } => {
                let av = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                        *x += y * sigmoid(*v);
                    }
                });
            }
            Op::Exp { a } => {
                let out = node.value.data();
                acc(*a, &mut |ga| {
                    for ((x, y), e) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * e;
                    }
                });
            }
            Op::Pow { a, p } => {
                let av = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                        *x += y * p * v.powf(p - 1.0);
                    }
                });
            }
            Op::ClampMin { a, min } => {
                let av = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                        if *v > *min {
                            *x += y;
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let s = node.value.shape();
                let plane = s[2] * s[3];
                let mut c0 = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    acc(p, &mut |gp| {
                        for n in 0..s[0] {
                            let src = (n * s[1] + c0) * plane;
                            for (x, y) in gp[n * c * plane..(n + 1) * c * plane].iter_mut().zip(&g[src..src + c * plane]) {
                                *x += y;
                            }
                        }
                    });
                    c0 += c;
                }
            }
            Op::Slice { a, start } => {
                let sa = val(*a).shape();
                let len = node.value.shape()[1];
                let plane = sa[2] * sa[3];
                acc(*a, &mut |ga| {
                    for n in 0..sa[0] {
                        let dst = (n * sa[1] + start) * plane;
                        for (x, y) in ga[dst..dst + len * plane].iter_mut().zip(&g[n * len * plane..(n + 1) * len * plane]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean { a } => {
                let k = g[0] / val(*a).numel() as f32;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += k));
            }
            Op::MeanSpatial { a } => {
                let s = val(*a).shape();
                let plane = s[2] * s[3];
                acc(*a, &mut |ga| {
                    for (chunk, gv) in ga.chunks_mut(plane).zip(g) {
                        let k = gv / plane as f32;
                        chunk.iter_mut().for_each(|x| *x += k);
                    }
                });
            }
            Op::LaplaceBits { v, mu, s } => {
                let sv = val(*v).shape();
                let strides = broadcast_strides(sv, val(*mu).shape()).expect("checked in forward");
                let (vv, mv, sd) = (val(*v).data(), val(*mu).data(), val(*s).data());
                let scale = -(g[0] as f64) / LN_2;
                let mut dv = vec![0.0f32; vv.len()];
                let mut dmu = vec![0.0f32; mv.len()];
                let mut ds = vec![0.0f32; sd.len()];
                for_each_broadcast(sv, strides, |i, j| {
                    let raw = sd[j] as f64;
                    let (_, gd, gs) = log_mass_with_grad(vv[i] as f64 - mv[j] as f64, raw.max(MIN_LOG_SCALE));
                    dv[i] += (scale * gd) as f32;
                    dmu[j] -= (scale * gd) as f32;
                    if raw > MIN_LOG_SCALE {
                        ds[j] += (scale * gs) as f32;
                    }
                });
                acc(*v, &mut |x| x.iter_mut().zip(&dv).for_each(|(a, b)| *a += b));
                acc(*mu, &mut |x| x.iter_mut().zip(&dmu).for_each(|(a, b)| *a += b));
                acc(*s, &mut |x| x.iter_mut().zip(&ds).for_each(|(a, b)| *a += b));
            }
            Op::Blur { a } => {
                let sa = val(*a).shape();
                acc(*a, &mut |ga| blur_backward(g, sa, ga));
            }
            Op::AvgPool2 { a } => {
                let [n, c, h, w] = val(*a).shape();
                let (oh, ow) = (h / 2, w / 2);
                acc(*a, &mut |ga| {
                    for p in 0..n * c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let q = 0.25 * g[(p * oh + y) * ow + x];
                                let i = (p * h + 2 * y) * w + 2 * x;
                                ga[i] += q;
                                ga[i + 1] += q;
                                ga[i + w] += q;
                                ga[i + w + 1] += q;
                            }
                        }
                    }
                });
            }
            Op::Crop { a } => {
                let [n, c, h, w] = val(*a).shape();
                let [_, _, oh, ow] = node.value.shape();
                acc(*a, &mut |ga| {
                    for p in 0..n * c {
                        for y in 0..oh {
                            let (src, dst) = ((p * oh + y) * ow, (p * h + y) * w);
                            for x in 0..ow {
                                ga[dst + x] += g[src + x];
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Gradients of every tape node after a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when it does not influence
    /// the loss.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[inline]
pub fn softplus(x: f32) -> f32 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn blur_forward(t: &Tensor) -> Tensor {
    let taps = gaussian_taps();
    let [n, c, h, w] = t.shape();
    let (oh, ow) = (h - BLUR_TAPS + 1, w - BLUR_TAPS + 1);
    let mut mid = vec![0.0f32; h * ow];
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        let src = &t.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..ow {
                let mut s = 0.0;
                for (k, tap) in taps.iter().enumerate() {
                    s += tap * src[y * w + x + k];
                }
                mid[y * ow + x] = s;
            }
        }
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for (k, tap) in taps.iter().enumerate() {
                    s += tap * mid[(y + k) * ow + x];
                }
                dst[y * ow + x] = s;
            }
        }
    }
    out
}

fn blur_backward(g: &[f32], input: Shape, ga: &mut [f32]) {
    let taps = gaussian_taps();
    let [n, c, h, w] = input;
    let (oh, ow) = (h - BLUR_TAPS + 1, w - BLUR_TAPS + 1);
    let mut mid = vec![0.0f32; h * ow];
    for p in 0..n * c {
        mid.fill(0.0);
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let v = gp[y * ow + x];
                for (k, tap) in taps.iter().enumerate() {
                    mid[(y + k) * ow + x] += tap * v;
                }
            }
        }
        let dst = &mut ga[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..ow {
                let v = mid[y * ow + x];
                for (k, tap) in taps.iter().enumerate() {
                    dst[y * w + x + k] += tap * v;
                }
            }
        }
    }
}
