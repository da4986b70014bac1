//! Tape-based reverse-mode differentiation for the handful of operations the
//! correction networks need.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward pass. All kernels are single-threaded
//! and deterministic.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::ssim::{ssim_grad, SsimParams};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    L1 {
        pred: Var,
        target: Var,
    },
    L2 {
        pred: Var,
        target: Var,
    },
    Ssim {
        pred: Var,
        grad: Vec<f64>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that needs them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn conv_out(size: usize, k: usize, spec: ConvSpec) -> Option<usize> {
    (size + 2 * spec.pad).checked_sub(k).map(|s| s / spec.stride + 1)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    /// 2D convolution; `w` is (cout, cin, k, k) and `b` (1, cout, 1, 1).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [bs, cin, h, wd] = self.shape(x);
        let [cout, wcin, k, k2] = self.shape(w);
        if wcin != cin || k != k2 {
            return Err(Error::Shape(format!(
                "conv weight {:?} does not match input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, cout, 1, 1] {
                return Err(Error::Shape(format!("conv bias shape {:?}", self.shape(b))));
            }
        }
        let (ho, wo) = match (conv_out(h, k, spec), conv_out(wd, k, spec)) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
            _ => return Err(Error::Shape(format!("input {h}x{wd} too small for {k}x{k} kernel"))),
        };
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            ho,
            wo,
            stride: spec.stride,
            pad: spec.pad,
        };
        let mut out = Tensor::zeros([bs, cout, ho, wo]);
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); geom.rows() * geom.cols()]
        };
        let wv = self.value(w).data();
        let xv = self.value(x);
        let hw = geom.cols();
        let per_out = cout * hw;
        for n in 0..bs {
            let xs = xv.item(n);
            let src: &[T] = if geom.is_pointwise() {
                xs
            } else {
                im2col(xs, &geom, &mut cols);
                &cols
            };
            let dst = &mut out.data_mut()[n * per_out..(n + 1) * per_out];
            T::gemm(
                cout,
                geom.rows(),
                hw,
                T::one(),
                (wv, geom.rows() as isize, 1),
                (src, hw as isize, 1),
                T::zero(),
                (dst, hw as isize, 1),
            );
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (co, chunk) in dst.chunks_mut(hw).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv { x, w, b, spec }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    /// 2×2 max pooling with stride 2; spatial sizes must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.shape(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("max pooling needs even sizes, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = Tensor::zeros([b, c, ho, wo]);
        let mut argmax = Vec::with_capacity(out.len());
        for plane in 0..b * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.data_mut()[(plane * ho + oy) * wo + ox] = src[best];
                    argmax.push((plane * h * w + best) as u32);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, needs))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [b, c, h, w] = self.shape(x);
        let xv = self.value(x);
        let out = Tensor::from_fn([b, c, 2 * h, 2 * w], |[n, ch, y, x]| xv.at([n, ch, y / 2, x / 2]));
        let needs = self.needs(x);
        self.push(out, Op::Upsample2(x), needs)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&tensors)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "cannot add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    fn loss_shapes(&self, pred: Var, target: Var) -> Result<()> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        Ok(())
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.loss_shapes(pred, target)?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let sum: f64 = p.iter().zip(t).map(|(&a, &b)| (a - b).abs().as_f64()).sum();
        let v = T::from_f64_lossy(sum / p.len() as f64);
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(v), Op::L1 { pred, target }, needs))
    }

    /// Mean squared error.
    pub fn l2_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.loss_shapes(pred, target)?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let sum: f64 = p.iter().zip(t).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
        let v = T::from_f64_lossy(sum / p.len() as f64);
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(v), Op::L2 { pred, target }, needs))
    }

    /// `1 - mean SSIM` over all single-channel images in the batch.
    /// Only the prediction receives a gradient.
    pub fn ssim_loss(&mut self, pred: Var, target: Var, params: &SsimParams) -> Result<Var> {
        self.loss_shapes(pred, target)?;
        let [b, c, h, w] = self.shape(pred);
        let p = self.value(pred);
        let t = self.value(target);
        let images = b * c;
        let mut grad = Vec::with_capacity(p.len());
        let mut total = 0.0;
        for i in 0..images {
            let to_arr = |s: &[T]| {
                Array2::from_shape_vec((h, w), s.iter().map(|v| v.as_f64()).collect()).expect("plane has h*w elements")
            };
            let x = to_arr(&p.data()[i * h * w..(i + 1) * h * w]);
            let y = to_arr(&t.data()[i * h * w..(i + 1) * h * w]);
            let (mean, g) = ssim_grad(&x, &y, params)?;
            total += mean;
            grad.extend(g.iter().map(|v| -v / images as f64));
        }
        let v = T::from_f64_lossy(1.0 - total / images as f64);
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(v), Op::Ssim { pred, grad }, needs))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => grads[idx] = Some(gout),
                Op::Relu(x) => {
                    if self.needs(*x) {
                        let xv = self.value(*x).data();
                        let mut g = gout.clone();
                        g.data_mut().iter_mut().zip(xv).for_each(|(g, &x)| {
                            if x <= T::zero() {
                                *g = T::zero();
                            }
                        });
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, gout.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, gout.clone());
                    }
                }
                Op::Upsample2(x) => {
                    if self.needs(*x) {
                        let [b, c, h, w] = self.shape(*x);
                        let mut g = Tensor::zeros([b, c, h, w]);
                        let [_, _, h2, w2] = gout.shape();
                        for plane in 0..b * c {
                            for y in 0..h2 {
                                for xx in 0..w2 {
                                    let v = gout.data()[(plane * h2 + y) * w2 + xx];
                                    g.data_mut()[(plane * h + y / 2) * w + xx / 2] += v;
                                }
                            }
                        }
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    if self.needs(*x) {
                        let mut g = Tensor::zeros(self.shape(*x));
                        for (o, &src) in argmax.iter().enumerate() {
                            g.data_mut()[src as usize] += gout.data()[o];
                        }
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Concat(parts) => {
                    let [b, c_total, h, w] = gout.shape();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.shape(p)[1];
                        if self.needs(p) {
                            let mut g = Tensor::zeros([b, c, h, w]);
                            let plane = h * w;
                            for n in 0..b {
                                let src =
                                    &gout.data()[(n * c_total + offset) * plane..(n * c_total + offset + c) * plane];
                                g.data_mut()[n * c * plane..(n + 1) * c * plane].copy_from_slice(src);
                            }
                            accumulate(&mut grads, p, g);
                        }
                        offset += c;
                    }
                }
                Op::L1 { pred, target } => {
                    let scale = gout.data()[0] / T::from_usize(self.value(*pred).len()).expect("len");
                    let diff: Vec<T> = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(self.value(*target).data())
                        .map(|(&p, &t)| {
                            let d = p - t;
                            if d > T::zero() {
                                scale
                            } else if d < T::zero() {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    self.loss_backward(&mut grads, *pred, *target, diff);
                }
                Op::L2 { pred, target } => {
                    let n = T::from_usize(self.value(*pred).len()).expect("len");
                    let scale = gout.data()[0] * (T::one() + T::one()) / n;
                    let diff: Vec<T> = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(self.value(*target).data())
                        .map(|(&p, &t)| (p - t) * scale)
                        .collect();
                    self.loss_backward(&mut grads, *pred, *target, diff);
                }
                Op::Ssim { pred, grad, .. } => {
                    if self.needs(*pred) {
                        let s = gout.data()[0];
                        let g = grad.iter().map(|&v| T::from_f64_lossy(v) * s).collect();
                        accumulate(&mut grads, *pred, Tensor::from_vec(self.shape(*pred), g)?);
                    }
                }
                Op::Conv { x, w, b, spec } => {
                    self.conv_backward(&mut grads, &gout, *x, *w, *b, *spec);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn loss_backward(&self, grads: &mut [Option<Tensor<T>>], pred: Var, target: Var, diff: Vec<T>) {
        let shape = self.shape(pred);
        if self.needs(target) {
            let neg = diff.iter().map(|&v| -v).collect();
            accumulate(grads, target, Tensor::from_vec(shape, neg).expect("same shape"));
        }
        if self.needs(pred) {
            accumulate(grads, pred, Tensor::from_vec(shape, diff).expect("same shape"));
        }
    }

    fn conv_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        gout: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    ) {
        let [bs, cin, h, wd] = self.shape(x);
        let [cout, _, k, _] = self.shape(w);
        let [_, _, ho, wo] = gout.shape();
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            ho,
            wo,
            stride: spec.stride,
            pad: spec.pad,
        };
        let hw = geom.cols();
        let rows = geom.rows();
        let xv = self.value(x);
        let wv = self.value(w).data();

        let want_w = self.needs(w);
        let want_x = self.needs(x);
        let mut dw = want_w.then(|| Tensor::zeros(self.shape(w)));
        let mut dx = want_x.then(|| Tensor::zeros(self.shape(x)));
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * hw }];
        let mut dcols = vec![T::zero(); if want_x { rows * hw } else { 0 }];

        for n in 0..bs {
            let go = &gout.data()[n * cout * hw..(n + 1) * cout * hw];
            if let Some(dw) = dw.as_mut() {
                let src: &[T] = if geom.is_pointwise() {
                    xv.item(n)
                } else {
                    im2col(xv.item(n), &geom, &mut cols);
                    &cols
                };
                // dW += dOut · colsᵀ
                T::gemm(
                    cout,
                    hw,
                    rows,
                    T::one(),
                    (go, hw as isize, 1),
                    (src, 1, hw as isize),
                    T::one(),
                    (dw.data_mut(), rows as isize, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = Wᵀ · dOut
                T::gemm(
                    rows,
                    cout,
                    hw,
                    T::one(),
                    (wv, 1, rows as isize),
                    (go, hw as isize, 1),
                    T::zero(),
                    (&mut dcols, hw as isize, 1),
                );
                let item = cin * h * wd;
                let dst = &mut dx.data_mut()[n * item..(n + 1) * item];
                if geom.is_pointwise() {
                    dst.iter_mut().zip(&dcols).for_each(|(d, s)| *d += *s);
                } else {
                    col2im(&dcols, &geom, dst);
                }
            }
        }
        if let Some(b) = b.filter(|&b| self.needs(b)) {
            let mut db = Tensor::zeros([1, cout, 1, 1]);
            for n in 0..bs {
                for co in 0..cout {
                    let s: T = gout.data()[(n * cout + co) * hw..(n * cout + co + 1) * hw]
                        .iter()
                        .copied()
                        .sum();
                    db.data_mut()[co] += s;
                }
            }
            accumulate(grads, b, db);
        }
        if let Some(dw) = dw {
            accumulate(grads, w, dw);
        }
        if let Some(dx) = dx {
            accumulate(grads, x, dx);
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct-summation convolution used as an independent reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [b, cin, h, wd] = x.shape();
        let [cout, _, k, _] = w.shape();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Tensor::from_fn([b, cout, ho, wo], |[n, co, oy, ox]| {
            let mut s = 0.0;
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += x.at([n, ci, iy as usize, ix as usize]) * w.at([co, ci, ky, kx]);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let x = rand_tensor([2, 3, 8, 6], &mut rng);
            let w = rand_tensor([4, 3, k, k], &mut rng);
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.param(w.clone());
            let y = g.conv2d(xv, wv, None, ConvSpec { stride, pad }).unwrap();
            let expect = naive_conv(&x, &w, stride, pad);
            assert_eq!(g.shape(y), expect.shape());
            for (a, b) in g.value(y).data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Finite-difference check of every op through a small composite graph.
    #[test]
    fn ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_tensor([2, 2, 4, 4], &mut rng);
        let w1 = rand_tensor([3, 2, 3, 3], &mut rng);
        let b1 = rand_tensor([1, 3, 1, 1], &mut rng);
        let w2 = rand_tensor([2, 5, 1, 1], &mut rng);
        let w3 = rand_tensor([1, 2, 3, 3], &mut rng);
        let target = rand_tensor([2, 1, 4, 4], &mut rng);

        let eval = |x: &Tensor<f64>, kind: usize| -> (f64, Tensor<f64>) {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let w1v = g.input(w1.clone());
            let b1v = g.input(b1.clone());
            let w2v = g.input(w2.clone());
            let w3v = g.input(w3.clone());
            let t = g.input(target.clone());
            let h = g.conv2d(xv, w1v, Some(b1v), ConvSpec { stride: 1, pad: 1 }).unwrap();
            let h = g.relu(h);
            let p = g.max_pool2(h).unwrap();
            let u = g.upsample2(p);
            let c = g.concat(&[u, xv]).unwrap();
            let d = g.conv2d(c, w2v, None, ConvSpec { stride: 1, pad: 0 }).unwrap();
            let s = g.add(d, xv).unwrap();
            let o = g.conv2d(s, w3v, None, ConvSpec { stride: 1, pad: 1 }).unwrap();
            let loss = match kind {
                0 => g.l2_loss(o, t).unwrap(),
                1 => g.l1_loss(o, t).unwrap(),
                _ => g.ssim_loss(o, t, &SsimParams::default()).unwrap(),
            };
            let grads = g.backward(loss).unwrap();
            (g.value(loss).data()[0], grads.get(xv).unwrap().clone())
        };

        for kind in 0..3 {
            let (_, analytic) = eval(&x0, kind);
            for i in (0..x0.len()).step_by(5) {
                let h = 1e-6;
                let mut xp = x0.clone();
                xp.data_mut()[i] += h;
                let mut xm = x0.clone();
                xm.data_mut()[i] -= h;
                let fd = (eval(&xp, kind).0 - eval(&xm, kind).0) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (fd - a).abs() < 1e-6 * (1.0 + a.abs()),
                    "loss {kind} idx {i}: {fd} vs {a}"
                );
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros([1, 1, 3, 3]));
        let b = g.input(Tensor::zeros([1, 1, 4, 4]));
        assert!(g.add(a, b).is_err());
        assert!(g.max_pool2(a).is_err());
        assert!(g.l1_loss(a, b).is_err());
        let w = g.param(Tensor::zeros([2, 3, 3, 3]));
        assert!(g.conv2d(a, w, None, ConvSpec { stride: 1, pad: 1 }).is_err());
    }
}
