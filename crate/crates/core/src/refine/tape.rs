//! Reverse-mode differentiation over a flat list of recorded operations.
//!
//! Every op stores its inputs by [`Var`] and recomputes whatever it needs
//! in the backward pass from the recorded values.

use std::ops::Range;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Conv3d { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Resize(Var),
    AvgPool { x: Var, factor: usize },
    MeanSlices(Var),
    SoftArgmax { x: Var, hypotheses: Vec<f64> },
    ConvexUpsample { d: Var, mask: Var, factor: usize },
    Loss { preds: Vec<Var>, gt: Tensor, alpha: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    /// `None` when the variable does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(what: &str, a: [usize; 4], b: [usize; 4]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

#[derive(Clone, Copy)]
struct Geom {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

/// Output positions `o` with `0 <= o * stride + k - pad < n_in`.
fn out_range(n_in: usize, n_out: usize, stride: usize, pad: usize, k: usize) -> Range<usize> {
    let (n_in, s, p, k) = (n_in as isize, stride as isize, pad as isize, k as isize);
    let lo = if p > k { (p - k + s - 1) / s } else { 0 };
    let hi = ((n_in - 1 + p - k).div_euclid(s) + 1).clamp(0, n_out as isize);
    (lo.min(hi) as usize)..(hi as usize)
}

/// Calls `f(out_index, in_index)` for every in-bounds pair of tap `(ky, kx)`.
#[inline]
fn for_taps(g: &Geom, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
    let rx = out_range(g.w, g.wo, g.stride, g.pad, kx);
    for oy in out_range(g.h, g.ho, g.stride, g.pad, ky) {
        let iy = oy * g.stride + ky - g.pad;
        let (ob, ib) = (oy * g.wo, iy * g.w);
        for ox in rx.clone() {
            f(ob + ox, ib + ox * g.stride + kx - g.pad);
        }
    }
}

/// Stride-1 form of [`for_taps`]: calls `f(out_start, in_start, len)` once
/// per output row with contiguous runs on both sides.
#[inline]
fn for_rows(g: &Geom, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
    debug_assert_eq!(g.stride, 1);
    let rx = out_range(g.w, g.wo, 1, g.pad, kx);
    if rx.is_empty() {
        return;
    }
    for oy in out_range(g.h, g.ho, 1, g.pad, ky) {
        let iy = oy + ky - g.pad;
        f(oy * g.wo + rx.start, iy * g.w + rx.start + kx - g.pad, rx.len());
    }
}

/// `out[o] += wv * x[i]` over every tap position.
#[inline]
fn axpy_taps(g: &Geom, ky: usize, kx: usize, wv: f64, x: &[f64], out: &mut [f64]) {
    if g.stride == 1 {
        for_rows(g, ky, kx, |o, i, n| {
            for (a, b) in out[o..o + n].iter_mut().zip(&x[i..i + n]) {
                *a += wv * b;
            }
        });
    } else {
        for_taps(g, ky, kx, |o, i| out[o] += wv * x[i]);
    }
}

/// Transposed [`axpy_taps`]: `dx[i] += wv * gy[o]`.
#[inline]
fn axpy_taps_t(g: &Geom, ky: usize, kx: usize, wv: f64, gy: &[f64], dx: &mut [f64]) {
    if g.stride == 1 {
        for_rows(g, ky, kx, |o, i, n| {
            for (a, b) in dx[i..i + n].iter_mut().zip(&gy[o..o + n]) {
                *a += wv * b;
            }
        });
    } else {
        for_taps(g, ky, kx, |o, i| dx[i] += wv * gy[o]);
    }
}

/// `sum gy[o] * x[i]` over every tap position.
#[inline]
fn dot_taps(g: &Geom, ky: usize, kx: usize, gy: &[f64], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    if g.stride == 1 {
        for_rows(g, ky, kx, |o, i, n| {
            acc += gy[o..o + n].iter().zip(&x[i..i + n]).map(|(a, b)| a * b).sum::<f64>();
        });
    } else {
        for_taps(g, ky, kx, |o, i| acc += gy[o] * x[i]);
    }
    acc
}

fn conv2d_geom(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Geom> {
    let k = w.h();
    if w.w() != k || w.c() != x.c() {
        return Err(shape_err("conv2d weight", w.shape(), x.shape()));
    }
    if b.shape() != [1, w.n(), 1, 1] {
        return Err(shape_err("conv2d bias", b.shape(), [1, w.n(), 1, 1]));
    }
    if stride == 0 || x.h() + 2 * pad < k || x.w() + 2 * pad < k {
        return Err(Error::Shape(format!("conv2d kernel {k} does not fit input {:?}", x.shape())));
    }
    Ok(Geom {
        h: x.h(),
        w: x.w(),
        ho: (x.h() + 2 * pad - k) / stride + 1,
        wo: (x.w() + 2 * pad - k) / stride + 1,
        stride,
        pad,
    })
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv2d_geom(x, w, b, stride, pad)?;
    let (cout, cin, k) = (w.n(), w.c(), w.h());
    let mut out = Tensor::zeros([x.n(), cout, g.ho, g.wo]);
    for n in 0..x.n() {
        for co in 0..cout {
            let op = out.plane_mut(n, co);
            op.fill(b.data()[co]);
            for ci in 0..cin {
                let xp = x.plane(n, ci);
                for ky in 0..k {
                    for kx in 0..k {
                        axpy_taps(&g, ky, kx, w.get(co, ci, ky, kx), xp, op);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (cout, cin, k) = (w.n(), w.c(), w.h());
    let g = Geom {
        h: x.h(),
        w: x.w(),
        ho: gy.h(),
        wo: gy.w(),
        stride,
        pad,
    };
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([1, cout, 1, 1]);
    for n in 0..x.n() {
        for co in 0..cout {
            let gp = gy.plane(n, co);
            db.data_mut()[co] += gp.iter().sum::<f64>();
            for ci in 0..cin {
                let xp = x.plane(n, ci);
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = w.index(co, ci, ky, kx);
                        dw.data_mut()[wi] += dot_taps(&g, ky, kx, gp, xp);
                        axpy_taps_t(&g, ky, kx, w.data()[wi], gp, dx.plane_mut(n, ci));
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

const SAME3: Geom = Geom {
    h: 0,
    w: 0,
    ho: 0,
    wo: 0,
    stride: 1,
    pad: 1,
};

fn same3(h: usize, w: usize) -> Geom {
    Geom { h, w, ho: h, wo: w, ..SAME3 }
}

/// 3x3x3 convolution over `(slice, y, x)` with zero padding 1 on every axis.
/// Weight layout is `[C_out, C_in, 3 (slice offset), 9 (ky * 3 + kx)]`.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.c() != x.c() || w.h() != 3 || w.w() != 9 {
        return Err(shape_err("conv3d weight", w.shape(), x.shape()));
    }
    if b.shape() != [1, w.n(), 1, 1] {
        return Err(shape_err("conv3d bias", b.shape(), [1, w.n(), 1, 1]));
    }
    let (z, cout, cin) = (x.n(), w.n(), w.c());
    let g = same3(x.h(), x.w());
    let mut out = Tensor::zeros([z, cout, x.h(), x.w()]);
    for s in 0..z {
        for co in 0..cout {
            let op = out.plane_mut(s, co);
            op.fill(b.data()[co]);
            for dz in 0..3 {
                let Some(src) = (s + dz).checked_sub(1).filter(|&t| t < z) else {
                    continue;
                };
                for ci in 0..cin {
                    let xp = x.plane(src, ci);
                    for t in 0..9 {
                        axpy_taps(&g, t / 3, t % 3, w.get(co, ci, dz, t), xp, op);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv3d_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (z, cout, cin) = (x.n(), w.n(), w.c());
    let g = same3(x.h(), x.w());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([1, cout, 1, 1]);
    for s in 0..z {
        for co in 0..cout {
            let gp = gy.plane(s, co);
            db.data_mut()[co] += gp.iter().sum::<f64>();
            for dz in 0..3 {
                let Some(src) = (s + dz).checked_sub(1).filter(|&t| t < z) else {
                    continue;
                };
                for ci in 0..cin {
                    let xp = x.plane(src, ci);
                    for t in 0..9 {
                        let wi = w.index(co, ci, dz, t);
                        dw.data_mut()[wi] += dot_taps(&g, t / 3, t % 3, gp, xp);
                        axpy_taps_t(&g, t / 3, t % 3, w.data()[wi], gp, dx.plane_mut(src, ci));
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Source taps `(lo, hi, frac)` of half-pixel-centred linear resampling.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = s.floor() as usize;
            (lo, (lo + 1).min(n_in - 1), s - lo as f64)
        })
        .collect()
}

pub fn resize_forward(x: &Tensor, h: usize, w: usize) -> Tensor {
    let ty = resize_taps(x.h(), h);
    let tx = resize_taps(x.w(), w);
    let mut out = Tensor::zeros([x.n(), x.c(), h, w]);
    let win = x.w();
    for n in 0..x.n() {
        for c in 0..x.c() {
            let xp = x.plane(n, c);
            let op = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = xp[y0 * win + x0] * (1.0 - fx) + xp[y0 * win + x1] * fx;
                    let bot = xp[y1 * win + x0] * (1.0 - fx) + xp[y1 * win + x1] * fx;
                    op[oy * w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    out
}

fn resize_backward(x_shape: [usize; 4], gy: &Tensor) -> Tensor {
    let ty = resize_taps(x_shape[2], gy.h());
    let tx = resize_taps(x_shape[3], gy.w());
    let mut dx = Tensor::zeros(x_shape);
    let (win, wout) = (x_shape[3], gy.w());
    for n in 0..x_shape[0] {
        for c in 0..x_shape[1] {
            let gp = gy.plane(n, c);
            let dp = dx.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = gp[oy * wout + ox];
                    dp[y0 * win + x0] += g * (1.0 - fy) * (1.0 - fx);
                    dp[y0 * win + x1] += g * (1.0 - fy) * fx;
                    dp[y1 * win + x0] += g * fy * (1.0 - fx);
                    dp[y1 * win + x1] += g * fy * fx;
                }
            }
        }
    }
    dx
}

fn softmax_into(logits: impl Iterator<Item = f64>, out: &mut Vec<f64>) {
    out.clear();
    out.extend(logits);
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

/// Offsets of the 3x3 neighbourhood, row-major.
const NEIGHBOURS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// For every fine pixel: coarse position, the 9 mask channels, and the 9
/// replicate-clamped neighbour indices.
fn convex_layout(h: usize, w: usize, f: usize, mut visit: impl FnMut(usize, [usize; 9], [usize; 9])) {
    for i in 0..h {
        for j in 0..w {
            let mut nb = [0usize; 9];
            for (k, (dy, dx)) in NEIGHBOURS.iter().enumerate() {
                let y = (i as isize + dy).clamp(0, h as isize - 1) as usize;
                let x = (j as isize + dx).clamp(0, w as isize - 1) as usize;
                nb[k] = y * w + x;
            }
            for a in 0..f {
                for b in 0..f {
                    let mut ch = [0usize; 9];
                    for (k, c) in ch.iter_mut().enumerate() {
                        *c = k * f * f + a * f + b;
                    }
                    visit(((i * f + a) * w * f) + j * f + b, ch, nb);
                }
            }
        }
    }
}

pub fn convex_upsample_forward(d: &Tensor, mask: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = (d.h(), d.w());
    if d.n() != 1 || d.c() != 1 {
        return Err(Error::Shape(format!("convex upsample takes one depth plane, got {:?}", d.shape())));
    }
    if factor == 0 || mask.shape() != [1, 9 * factor * factor, h, w] {
        return Err(Error::Shape(format!(
            "mask {:?} does not match factor {factor} for {h}x{w}",
            mask.shape()
        )));
    }
    let mut out = Tensor::zeros([1, 1, h * factor, w * factor]);
    let (dp, mp) = (d.data(), mask.data());
    let plane = h * w;
    let mut p = Vec::with_capacity(9);
    let od = out.data_mut();
    convex_layout(h, w, factor, |o, ch, nb| {
        let pix = nb[4];
        softmax_into(ch.iter().map(|&c| mp[c * plane + pix]), &mut p);
        od[o] = p.iter().zip(nb).map(|(pk, n)| pk * dp[n]).sum();
    });
    Ok(out)
}

fn convex_upsample_backward(d: &Tensor, mask: &Tensor, factor: usize, gy: &Tensor) -> (Tensor, Tensor) {
    let (h, w) = (d.h(), d.w());
    let mut dd = Tensor::zeros(d.shape());
    let mut dm = Tensor::zeros(mask.shape());
    let (dp, mp, gp) = (d.data(), mask.data(), gy.data());
    let plane = h * w;
    let mut p = Vec::with_capacity(9);
    let (ddd, dmd) = (dd.data_mut(), dm.data_mut());
    convex_layout(h, w, factor, |o, ch, nb| {
        let pix = nb[4];
        softmax_into(ch.iter().map(|&c| mp[c * plane + pix]), &mut p);
        let out: f64 = p.iter().zip(nb).map(|(pk, n)| pk * dp[n]).sum();
        let g = gp[o];
        for k in 0..9 {
            ddd[nb[k]] += g * p[k];
            dmd[ch[k] * plane + pix] += g * p[k] * (dp[nb[k]] - out);
        }
    });
    (dd, dm)
}

/// Iteration weights `alpha^(T-1-t)` of the loss, latest last.
///
/// Built by repeated multiplication, so `w[t] == alpha * w[t + 1]` exactly.
pub fn loss_weights(iterations: usize, alpha: f64) -> Vec<f64> {
    let mut w = vec![1.0; iterations];
    for t in (0..iterations.saturating_sub(1)).rev() {
        w[t] = alpha * w[t + 1];
    }
    w
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.value(v).shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = conv3d_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Conv3d { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        self.push(y, Op::Tanh(x))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(what, ta.shape(), tb.shape()));
        }
        Ok(Tensor::from_raw(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(&p, &q)| f(p, q)).collect(),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "add", |p, q| p + q)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let [n, _, h, w] = self.shape(first);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s[0], s[2], s[3]) != (n, h, w) {
                return Err(shape_err("concat", self.shape(first), s));
            }
            c_total += s[1];
        }
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let block = t.c() * h * w;
                data.extend_from_slice(&t.data()[i * block..(i + 1) * block]);
            }
        }
        Ok(self.push(Tensor::from_raw([n, c_total, h, w], data), Op::Concat(parts.to_vec())))
    }

    /// Bilinear resampling to `h x w` with half-pixel centres.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        if h == 0 || w == 0 {
            return Err(Error::Shape("resize to an empty raster".into()));
        }
        let y = resize_forward(self.value(x), h, w);
        Ok(self.push(y, Op::Resize(x)))
    }

    /// Mean over non-overlapping `factor x factor` blocks.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        if factor == 0 || !t.h().is_multiple_of(factor) || !t.w().is_multiple_of(factor) {
            return Err(Error::Shape(format!("{:?} not divisible by pool factor {factor}", t.shape())));
        }
        let (ho, wo) = (t.h() / factor, t.w() / factor);
        let scale = 1.0 / (factor * factor) as f64;
        let mut out = Tensor::zeros([t.n(), t.c(), ho, wo]);
        for n in 0..t.n() {
            for c in 0..t.c() {
                let xp = t.plane(n, c);
                let op = out.plane_mut(n, c);
                for y in 0..t.h() {
                    for x in 0..t.w() {
                        op[(y / factor) * wo + x / factor] += xp[y * t.w() + x] * scale;
                    }
                }
            }
        }
        Ok(self.push(out, Op::AvgPool { x, factor }))
    }

    /// Mean over the slice axis, giving `1 x C x H x W`.
    pub fn mean_slices(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let block = t.c() * t.h() * t.w();
        let mut data = vec![0.0; block];
        for s in 0..t.n() {
            for (d, v) in data.iter_mut().zip(&t.data()[s * block..(s + 1) * block]) {
                *d += v;
            }
        }
        let inv = 1.0 / t.n() as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        let shape = [1, t.c(), t.h(), t.w()];
        self.push(Tensor::from_raw(shape, data), Op::MeanSlices(x))
    }

    /// Expected hypothesis under a softmax over the slice axis of a
    /// `Z x 1 x H x W` score volume.
    pub fn soft_argmax(&mut self, x: Var, hypotheses: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.c() != 1 || t.n() != hypotheses.len() {
            return Err(Error::Shape(format!(
                "soft-argmax over {:?} with {} hypotheses",
                t.shape(),
                hypotheses.len()
            )));
        }
        let plane = t.plane_len();
        let mut p = Vec::with_capacity(t.n());
        let mut out = Tensor::zeros([1, 1, t.h(), t.w()]);
        for i in 0..plane {
            softmax_into((0..t.n()).map(|z| t.data()[z * plane + i]), &mut p);
            out.data_mut()[i] = p.iter().zip(hypotheses).map(|(a, b)| a * b).sum();
        }
        Ok(self.push(
            out,
            Op::SoftArgmax {
                x,
                hypotheses: hypotheses.to_vec(),
            },
        ))
    }

    /// Each fine pixel is a softmax-weighted mix of the 3x3 coarse
    /// neighbourhood (replicate border). Mask channel `k * f^2 + a * f + b`
    /// weighs neighbour `k` for sub-pixel `(a, b)`.
    pub fn convex_upsample(&mut self, d: Var, mask: Var, factor: usize) -> Result<Var> {
        let y = convex_upsample_forward(self.value(d), self.value(mask), factor)?;
        Ok(self.push(y, Op::ConvexUpsample { d, mask, factor }))
    }

    /// `sum_t alpha^(T-1-t) * mean((preds[t] - gt)^2)` as a `1x1x1x1` tensor.
    pub fn loss(&mut self, preds: &[Var], gt: &Tensor, alpha: f64) -> Result<Var> {
        if preds.is_empty() {
            return Err(Error::Invalid("loss needs at least one prediction".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Invalid(format!("alpha must be in (0, 1], got {alpha}")));
        }
        let weights = loss_weights(preds.len(), alpha);
        let mut total = 0.0;
        for (&p, wt) in preds.iter().zip(&weights) {
            let t = self.value(p);
            if t.shape() != gt.shape() {
                return Err(shape_err("loss", t.shape(), gt.shape()));
            }
            let mse = t.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64;
            total += wt * mse;
        }
        Ok(self.push(
            Tensor::from_raw([1, 1, 1, 1], vec![total]),
            Op::Loss {
                preds: preds.to_vec(),
                gt: gt.clone(),
                alpha,
            },
        ))
    }

    /// Backpropagates from a single-element `root` with seed 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!("backward root must be scalar, got {:?}", self.shape(root))));
        }
        self.backward_with(root, Tensor::filled([1, 1, 1, 1], 1.0))
    }

    /// Backpropagates the cotangent `seed` of `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(root) {
            return Err(shape_err("backward seed", seed.shape(), self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };
        let zip_with = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            Tensor::from_raw(a.shape(), a.data().iter().zip(g.data()).map(|(&p, &q)| f(p, q)).collect())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv2d_backward(val(*x), val(*w), g, *stride, *pad);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Conv3d { x, w, b } => {
                let (dx, dw, db) = conv3d_backward(val(*x), val(*w), g);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Relu(x) => acc(*x, zip_with(val(*x), &|v, gv| if v > 0.0 { gv } else { 0.0 })),
            Op::Sigmoid(x) => acc(*x, zip_with(&node.value, &|y, gv| gv * y * (1.0 - y))),
            Op::Tanh(x) => acc(*x, zip_with(&node.value, &|y, gv| gv * (1.0 - y * y))),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, zip_with(val(*b), &|v, gv| v * gv));
                acc(*b, zip_with(val(*a), &|v, gv| v * gv));
            }
            Op::Concat(parts) => {
                let [n, ct, h, w] = g.shape();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).c();
                    let mut d = Vec::with_capacity(n * c * h * w);
                    for s in 0..n {
                        let start = (s * ct + offset) * h * w;
                        d.extend_from_slice(&g.data()[start..start + c * h * w]);
                    }
                    acc(p, Tensor::from_raw([n, c, h, w], d));
                    offset += c;
                }
            }
            Op::Resize(x) => acc(*x, resize_backward(val(*x).shape(), g)),
            Op::AvgPool { x, factor } => {
                let t = val(*x);
                let f = *factor;
                let scale = 1.0 / (f * f) as f64;
                let (w, wo) = (t.w(), g.w());
                let mut d = Tensor::zeros(t.shape());
                for n in 0..t.n() {
                    for c in 0..t.c() {
                        let gp = g.plane(n, c);
                        let dp = d.plane_mut(n, c);
                        for (k, v) in dp.iter_mut().enumerate() {
                            *v = gp[(k / w / f) * wo + (k % w) / f] * scale;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::MeanSlices(x) => {
                let t = val(*x);
                let inv = 1.0 / t.n() as f64;
                let data = (0..t.n()).flat_map(|_| g.data().iter().map(|v| v * inv)).collect();
                acc(*x, Tensor::from_raw(t.shape(), data));
            }
            Op::SoftArgmax { x, hypotheses } => {
                let t = val(*x);
                let plane = t.plane_len();
                let mut d = Tensor::zeros(t.shape());
                let mut p = Vec::with_capacity(t.n());
                for i in 0..plane {
                    softmax_into((0..t.n()).map(|z| t.data()[z * plane + i]), &mut p);
                    let out = node.value.data()[i];
                    for z in 0..t.n() {
                        d.data_mut()[z * plane + i] = g.data()[i] * p[z] * (hypotheses[z] - out);
                    }
                }
                acc(*x, d);
            }
            Op::ConvexUpsample { d, mask, factor } => {
                let (dd, dm) = convex_upsample_backward(val(*d), val(*mask), *factor, g);
                acc(*d, dd);
                acc(*mask, dm);
            }
            Op::Loss { preds, gt, alpha } => {
                let weights = loss_weights(preds.len(), *alpha);
                let scale = g.data()[0];
                for (&p, wt) in preds.iter().zip(weights) {
                    let t = val(p);
                    let k = 2.0 * wt * scale / t.len() as f64;
                    let data = t.data().iter().zip(gt.data()).map(|(a, b)| k * (a - b)).collect();
                    acc(p, Tensor::from_raw(t.shape(), data));
                }
            }
        }
    }
}
