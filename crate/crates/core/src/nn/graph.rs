//! Define-by-run reverse-mode differentiation over [`Tensor`] operations.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! Parameters are borrowed, never copied, so a graph lives no longer than the
//! networks it evaluates. Gradients flow only into nodes that transitively
//! depend on a trainable parameter or a grad-requiring input; everything else
//! behaves as a constant, which is also how a tensor is detached.
//!
//! All batch-parallel reductions (weight gradients) are summed in batch
//! order after the parallel section, so results do not depend on the rayon
//! pool size.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::scalar::{gemm, Scalar};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Concat(NodeId, NodeId),
    AvgPool2(NodeId),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u8>,
    },
    Upsample2(NodeId),
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    Tanh(NodeId),
    Sigmoid(NodeId),
    InstanceNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GlobalAvgPool(NodeId),
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'a, T> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; gradients never flow into it.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is retained after [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Borrowed parameter; frozen parameters still propagate gradients to
    /// their downstream inputs but accumulate none themselves.
    pub fn param(&mut self, t: &'a Tensor<T>, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            needs_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.0].value.get()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.needs(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Same-size convolution, stride 1, zero padding `(k - 1) / 2`, with an
    /// odd square kernel `w: Cout×Cin×k×k` and optional bias `1×Cout×1×1`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let out = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv { x, w, b }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = va.shape();
        let [nb, cb, hb, wb] = vb.shape();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: shape mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(va.item(i));
            data.extend_from_slice(vb.item(i));
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data).expect("concat shape");
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat(a, b), needs)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let [n, c, h, w] = v.shape();
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let src = v.data();
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for (plane, o) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    o[y * ow + xx] = (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * quarter;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::AvgPool2(x), needs)
    }

    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let [n, c, h, w] = v.shape();
        let (oh, ow) = (h / 2, w / 2);
        let src = v.data();
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u8; n * c * oh * ow];
        for (plane, o) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let am = &mut argmax[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let base = 2 * y * w + 2 * xx;
                    let cand = [base, base + 1, base + w, base + w + 1];
                    let mut best = 0;
                    for (j, &ci) in cand.iter().enumerate().skip(1) {
                        if s[ci] > s[cand[best]] {
                            best = j;
                        }
                    }
                    o[y * ow + xx] = s[cand[best]];
                    am[y * ow + xx] = best as u8;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::MaxPool2 { x, argmax }, needs)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let [n, c, h, w] = v.shape();
        let (oh, ow) = (2 * h, 2 * w);
        let src = v.data();
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for (plane, o) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                let row = &s[(y / 2) * w..(y / 2) * w + w];
                for xx in 0..ow {
                    o[y * ow + xx] = row[xx / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Upsample2(x), needs)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let needs = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.tanh());
        let needs = self.needs(x);
        self.push(out, Op::Tanh(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    /// Per-sample, per-channel normalization with affine `gamma`/`beta`
    /// of shape `1×C×1×1`.
    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let v = self.value(x);
        let [n, c, h, w] = v.shape();
        let hw = h * w;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = NORM_EPS;
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut xhat = vec![T::zero(); n * c * hw];
        let mut inv_std = vec![T::zero(); n * c];
        for plane in 0..n * c {
            let ch = plane % c;
            let s = &v.data()[plane * hw..(plane + 1) * hw];
            let mean = s.iter().map(|v| v.f64()).sum::<f64>() / hw as f64;
            let var = s.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[plane] = T::lit(is);
            let (m, ist) = (T::lit(mean), T::lit(is));
            let o = &mut out.data_mut()[plane * hw..(plane + 1) * hw];
            let xh = &mut xhat[plane * hw..(plane + 1) * hw];
            for i in 0..hw {
                xh[i] = (s[i] - m) * ist;
                o[i] = g[ch] * xh[i] + b[ch];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let [n, c, h, w] = v.shape();
        let hw = h * w;
        let data = v
            .data()
            .chunks(hw)
            .map(|p| T::lit(p.iter().map(|v| v.f64()).sum::<f64>() / hw as f64))
            .collect();
        let out = Tensor::from_vec([n, c, 1, 1], data).expect("pool shape");
        let needs = self.needs(x);
        self.push(out, Op::GlobalAvgPool(x), needs)
    }

    /// Reverse pass seeded with `dL/d(node)` for each listed node.
    ///
    /// Gradients of leaves (parameters and grad-requiring inputs) are kept
    /// and can be read with [`Graph::grad`]; intermediate gradients are
    /// released as soon as they have been propagated.
    pub fn backward(&mut self, seeds: Vec<(NodeId, Tensor<T>)>) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.value(id).shape(), "seed shape mismatch");
            if self.needs(id) {
                accumulate(&mut self.grads, id, g);
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, g);
        }
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    fn propagate(&mut self, i: usize, g: Tensor<T>) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |id: NodeId| nodes[id.0].value.get();
        let needs = |id: NodeId| nodes[id.0].needs_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b } => {
                let (dx, dw, db) = conv_backward(
                    val(*x),
                    val(*w),
                    &g,
                    needs(*x),
                    needs(*w),
                    b.is_some_and(|b| needs(b)),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) && needs(*b) {
                    accumulate(grads, *a, g.clone());
                    accumulate(grads, *b, g);
                } else if needs(*a) {
                    accumulate(grads, *a, g);
                } else if needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Concat(a, b) => {
                let ca = val(*a).channels();
                let [n, c, h, w] = g.shape();
                let split = ca * h * w;
                let item = c * h * w;
                if needs(*a) {
                    let mut d = Vec::with_capacity(n * split);
                    for k in 0..n {
                        d.extend_from_slice(&g.data()[k * item..k * item + split]);
                    }
                    accumulate(grads, *a, Tensor::from_vec([n, ca, h, w], d).unwrap());
                }
                if needs(*b) {
                    let mut d = Vec::with_capacity(n * (item - split));
                    for k in 0..n {
                        d.extend_from_slice(&g.data()[k * item + split..(k + 1) * item]);
                    }
                    accumulate(grads, *b, Tensor::from_vec([n, c - ca, h, w], d).unwrap());
                }
            }
            Op::AvgPool2(x) => {
                let [n, c, h, w] = val(*x).shape();
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let mut d = Tensor::zeros([n, c, h, w]);
                for (plane, dp) in d.data_mut().chunks_mut(h * w).enumerate() {
                    let gp = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = gp[y * ow + xx] * quarter;
                            let base = 2 * y * w + 2 * xx;
                            dp[base] = v;
                            dp[base + 1] = v;
                            dp[base + w] = v;
                            dp[base + w + 1] = v;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::MaxPool2 { x, argmax } => {
                let [n, c, h, w] = val(*x).shape();
                let (oh, ow) = (h / 2, w / 2);
                let mut d = Tensor::zeros([n, c, h, w]);
                for (plane, dp) in d.data_mut().chunks_mut(h * w).enumerate() {
                    let off = plane * oh * ow;
                    for y in 0..oh {
                        for xx in 0..ow {
                            let j = argmax[off + y * ow + xx] as usize;
                            let idx = 2 * y * w + 2 * xx + (j / 2) * w + (j % 2);
                            dp[idx] = g.data()[off + y * ow + xx];
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = val(*x).shape();
                let ow = 2 * w;
                let mut d = Tensor::zeros([n, c, h, w]);
                for (plane, dp) in d.data_mut().chunks_mut(h * w).enumerate() {
                    let gp = &g.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..ow {
                            dp[(y / 2) * w + xx / 2] += gp[y * ow + xx];
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = val(*x).data();
                let mut d = g;
                for (dv, &v) in d.data_mut().iter_mut().zip(xv) {
                    if v <= T::zero() {
                        *dv *= *slope;
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let y = nodes[i].value.get().data();
                let mut d = g;
                for (dv, &yv) in d.data_mut().iter_mut().zip(y) {
                    *dv *= T::one() - yv * yv;
                }
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = nodes[i].value.get().data();
                let mut d = g;
                for (dv, &yv) in d.data_mut().iter_mut().zip(y) {
                    *dv *= yv * (T::one() - yv);
                }
                accumulate(grads, *x, d);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = g.shape();
                let hw = h * w;
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut dx = if needs(*x) {
                    Some(Tensor::zeros([n, c, h, w]))
                } else {
                    None
                };
                for plane in 0..n * c {
                    let ch = plane % c;
                    let gp = &g.data()[plane * hw..(plane + 1) * hw];
                    let xh = &xhat[plane * hw..(plane + 1) * hw];
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xh = 0.0;
                    for k in 0..hw {
                        sum_dy += gp[k].f64();
                        sum_dy_xh += (gp[k] * xh[k]).f64();
                    }
                    dgamma[ch] += sum_dy_xh;
                    dbeta[ch] += sum_dy;
                    if let Some(dx) = dx.as_mut() {
                        // dxhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                        let gm = gam[ch].f64();
                        let mean_dxh = T::lit(sum_dy * gm / hw as f64);
                        let mean_dxh_xh = T::lit(sum_dy_xh * gm / hw as f64);
                        let is = inv_std[plane];
                        let gmt = gam[ch];
                        let dp = &mut dx.data_mut()[plane * hw..(plane + 1) * hw];
                        for k in 0..hw {
                            dp[k] = is * (gp[k] * gmt - mean_dxh - xh[k] * mean_dxh_xh);
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if needs(*gamma) {
                    let t = Tensor::from_vec([1, c, 1, 1], dgamma.into_iter().map(T::lit).collect());
                    accumulate(grads, *gamma, t.unwrap());
                }
                if needs(*beta) {
                    let t = Tensor::from_vec([1, c, 1, 1], dbeta.into_iter().map(T::lit).collect());
                    accumulate(grads, *beta, t.unwrap());
                }
            }
            Op::GlobalAvgPool(x) => {
                let [n, c, h, w] = val(*x).shape();
                let hw = h * w;
                let inv = T::lit(1.0 / hw as f64);
                let mut d = Tensor::zeros([n, c, h, w]);
                for (plane, dp) in d.data_mut().chunks_mut(hw).enumerate() {
                    let v = g.data()[plane] * inv;
                    dp.iter_mut().for_each(|e| *e = v);
                }
                accumulate(grads, *x, d);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Unfolds one `C×H×W` item into a `(C·k·k)×(H·W)` patch matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let p = (k - 1) / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - p as isize;
                let (x0, x1) = (dx.min(0).unsigned_abs(), (w as isize - dx.max(0)) as usize);
                for y in 0..h {
                    let sy = y as isize + ky as isize - p as isize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x0].iter_mut().for_each(|v| *v = T::zero());
                    dst[x1..].iter_mut().for_each(|v| *v = T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Folds a patch-gradient matrix back onto a `C×H×W` item (accumulating).
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let p = (k - 1) / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - p as isize;
                let (x0, x1) = (dx.min(0).unsigned_abs(), (w as isize - dx.max(0)) as usize);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x1 - x0];
                    for (d, &s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, k2] = w.shape();
    assert!(
        cin == wcin && k == k2 && k % 2 == 1,
        "conv2d: input {:?} vs kernel {:?}",
        x.shape(),
        w.shape()
    );
    let hw = h * wd;
    let j = cin * k * k;
    let mut out = Tensor::zeros([n, cout, h, wd]);
    let wdata = w.data();
    out.data_mut()
        .par_chunks_mut(cout * hw)
        .enumerate()
        .for_each(|(i, o)| {
            let xi = x.item(i);
            if k == 1 {
                gemm(cout, cin, hw, wdata, false, xi, false, o, false);
            } else {
                let mut cols = vec![T::zero(); j * hw];
                im2col(xi, cin, h, wd, k, &mut cols);
                gemm(cout, j, hw, wdata, false, &cols, false, o, false);
            }
            if let Some(b) = b {
                for (co, plane) in o.chunks_mut(hw).enumerate() {
                    let bv = b.data()[co];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    out
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let hw = h * wd;
    let j = cin * k * k;
    let wdata = w.data();

    let per_item: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let gi = g.item(i);
            let xi = x.item(i);
            let cols = if k == 1 || !want_dw {
                None
            } else {
                let mut c = vec![T::zero(); j * hw];
                im2col(xi, cin, h, wd, k, &mut c);
                Some(c)
            };
            let dw = want_dw.then(|| {
                let mut dw = vec![T::zero(); cout * j];
                let src = cols.as_deref().unwrap_or(xi);
                gemm(cout, hw, j, gi, false, src, true, &mut dw, false);
                dw
            });
            let dx = want_dx.then(|| {
                let mut dx = vec![T::zero(); cin * hw];
                if k == 1 {
                    gemm(cin, cout, hw, wdata, true, gi, false, &mut dx, false);
                } else {
                    let mut dcols = cols.unwrap_or_else(|| vec![T::zero(); j * hw]);
                    gemm(j, cout, hw, wdata, true, gi, false, &mut dcols, false);
                    col2im(&dcols, cin, h, wd, k, &mut dx);
                }
                dx
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = want_dx.then(|| Vec::with_capacity(n * cin * hw));
    let mut dw_sum = want_dw.then(|| vec![T::zero(); cout * j]);
    for (dx, dw) in per_item {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(sum), Some(dw)) = (dw_sum.as_mut(), dw) {
            for (s, v) in sum.iter_mut().zip(dw) {
                *s += v;
            }
        }
    }
    let db = want_db.then(|| {
        let mut db = vec![0.0f64; cout];
        for i in 0..n {
            for (co, plane) in g.item(i).chunks(hw).enumerate() {
                db[co] += plane.iter().map(|v| v.f64()).sum::<f64>();
            }
        }
        Tensor::from_vec([1, cout, 1, 1], db.into_iter().map(T::lit).collect()).unwrap()
    });
    (
        dx_all.map(|d| Tensor::from_vec([n, cin, h, wd], d).unwrap()),
        dw_sum.map(|d| Tensor::from_vec([cout, cin, k, k], d).unwrap()),
        db,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct 7-loop convolution used as an independent check of im2col+GEMM.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, k, _] = w.shape();
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros([n, cout, h, wd]);
        for i in 0..n {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut s = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    s += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                        * x.data()[((i * cin + ci) * h + sy as usize) * wd + sx as usize];
                                }
                            }
                        }
                        out.data_mut()[((i * cout + co) * h + y) * wd + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let x = rand_tensor(&mut rng, [2, 3, 5, 4]);
            let w = rand_tensor(&mut rng, [4, 3, k, k]);
            let b = rand_tensor(&mut rng, [1, 4, 1, 1]);
            let mut g = Graph::new();
            let (xi, wi, bi) = (g.input(x.clone()), g.param(&w, false), g.param(&b, false));
            let y = g.conv2d(xi, wi, Some(bi));
            let want = conv_naive(&x, &w, &b);
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn build_graph<'a, F>(build: &F, x: &Tensor<f64>, ps: &'a [Tensor<f64>]) -> (Graph<'a, f64>, NodeId, Vec<NodeId>, NodeId)
    where
        F: Fn(&mut Graph<'a, f64>, NodeId, &[NodeId]) -> NodeId,
    {
        let mut g = Graph::new();
        let xi = g.input_with_grad(x.clone());
        let pi: Vec<_> = ps.iter().map(|p| g.param(p, true)).collect();
        let y = build(&mut g, xi, &pi);
        (g, xi, pi, y)
    }

    /// Scalar objective: weighted sum of outputs with fixed random weights.
    fn check_grads(build: impl Fn(&mut Graph<f64>, NodeId, &[NodeId]) -> NodeId, x: Tensor<f64>, params: Vec<Tensor<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let objective = |x: &Tensor<f64>, ps: &[Tensor<f64>], probe: &Tensor<f64>| {
            let (g, _, _, y) = build_graph(&build, x, ps);
            g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let out_shape = {
            let (g, _, _, y) = build_graph(&build, &x, &params);
            g.value(y).shape()
        };
        let probe = rand_tensor(&mut rng, out_shape);
        let (mut g, xi, pi, y) = build_graph(&build, &x, &params);
        g.backward(vec![(y, probe.clone())]);
        let h = 1e-5;
        let check = |analytic: &Tensor<f64>, perturb: &dyn Fn(usize, f64) -> f64| {
            for idx in 0..analytic.len() {
                let num = (perturb(idx, h) - perturb(idx, -h)) / (2.0 * h);
                let a = analytic.data()[idx];
                assert!((a - num).abs() <= 1e-6 * (1.0 + a.abs().max(num.abs())), "idx {idx}: analytic {a} numeric {num}");
            }
        };
        let gx = g.grad(xi).unwrap().clone();
        check(&gx, &|idx, d| {
            let mut xp = x.clone();
            xp.data_mut()[idx] += d;
            objective(&xp, &params, &probe)
        });
        for (pidx, &pnode) in pi.iter().enumerate() {
            let gp = g.grad(pnode).unwrap().clone();
            check(&gp, &|idx, d| {
                let mut ps = params.clone();
                ps[pidx].data_mut()[idx] += d;
                objective(&x, &ps, &probe)
            });
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, [2, 2, 4, 4]);
        let w = rand_tensor(&mut rng, [3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, [1, 3, 1, 1]);
        check_grads(|g, x, p| g.conv2d(x, p[0], Some(p[1])), x, vec![w, b]);
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, [2, 2, 4, 4]);
        let w1 = rand_tensor(&mut rng, [2, 2, 1, 1]);
        let gamma = rand_tensor(&mut rng, [1, 2, 1, 1]);
        let beta = rand_tensor(&mut rng, [1, 2, 1, 1]);
        check_grads(
            |g, x, p| {
                let a = g.conv2d(x, p[0], None);
                let n = g.instance_norm(a, p[1], p[2]);
                let l = g.leaky_relu(n, 0.2);
                let c = g.concat(l, x);
                let pooled = g.avg_pool2(c);
                let m = g.max_pool2(c);
                let s = g.add(pooled, m);
                let u = g.upsample2(s);
                let t = g.tanh(u);
                let sg = g.sigmoid(t);
                g.global_avg_pool(sg)
            },
            x,
            vec![w1, gamma, beta],
        );
    }

    #[test]
    fn frozen_params_get_no_gradient_but_pass_it_on() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, [1, 1, 2, 2]);
        let w = rand_tensor(&mut rng, [1, 1, 3, 3]);
        let mut g = Graph::new();
        let xi = g.input_with_grad(x);
        let wi = g.param(&w, false);
        let y = g.conv2d(xi, wi, None);
        let seed = Tensor::full([1, 1, 2, 2], 1.0);
        g.backward(vec![(y, seed)]);
        assert!(g.grad(wi).is_none());
        assert!(g.grad(xi).is_some());
    }

    #[test]
    fn detached_input_blocks_gradient() {
        let w = Tensor::full([1, 1, 1, 1], 2.0);
        let mut g = Graph::new();
        let wi = g.param(&w, true);
        let x = g.input(Tensor::full([1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, wi, None);
        // Re-entering the value as a plain input cuts the path back to `wi`.
        let detached = g.input(g.value(y).clone());
        let z = g.conv2d(detached, wi, None);
        g.backward(vec![(z, Tensor::full([1, 1, 2, 2], 1.0))]);
        // Only the second application contributes: sum of its inputs (2 each).
        assert_eq!(g.grad(wi).unwrap().data(), &[8.0]);
    }
}
