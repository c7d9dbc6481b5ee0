//! Forward and backward kernels. Every function here is pure over its
//! arguments; the tape in [`crate::autodiff`] wires them together.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvGeometry {
            stride,
            dilation,
            padding,
        }
    }

    /// Stride 1, no dilation, padding that preserves extents for odd `k`.
    pub const fn same(k: usize) -> Self {
        ConvGeometry::new(1, 1, k / 2)
    }

    /// `floor((n + 2p - d(k-1) - 1) / s) + 1`, or `None` when non-positive.
    pub fn output_extent(&self, n: usize, k: usize) -> Option<usize> {
        let span = (n + 2 * self.padding) as isize - (self.dilation * (k - 1)) as isize - 1;
        if span < 0 || self.stride == 0 {
            return None;
        }
        Some(span as usize / self.stride + 1)
    }
}

fn conv_shapes<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, g: ConvGeometry) -> Result<(usize, usize)> {
    if g.stride == 0 || g.dilation == 0 {
        return Err(Error::invalid("conv2d: stride and dilation must be positive"));
    }
    let ws = w.shape();
    if ws.h() != ws.w() || ws.h() == 0 {
        return Err(Error::shape(format!("conv2d: kernel must be square, got {ws}")));
    }
    if x.shape().c() != ws.c() {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels, weight expects {}",
            x.shape().c(),
            ws.c()
        )));
    }
    let k = ws.h();
    let ho = g.output_extent(x.shape().h(), k);
    let wo = g.output_extent(x.shape().w(), k);
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho >= 1 && wo >= 1 => Ok((ho, wo)),
        _ => Err(Error::invalid(format!(
            "conv2d: non-positive output extent for input {} kernel {k} {g:?}",
            x.shape()
        ))),
    }
}

/// Unfolds one image (C, H, W) into a (C*K*K, Ho*Wo) column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    img: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeometry,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    let p = ho * wo;
    let pad = g.padding as isize;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut cols[row * p..(row + 1) * p];
                let dy = (ky * g.dilation) as isize - pad;
                let dx = (kx * g.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + dy;
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + dx;
                        *d = if ix < 0 || ix >= w as isize {
                            S::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto an image.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeometry,
    ho: usize,
    wo: usize,
    img: &mut [S],
) {
    let p = ho * wo;
    let pad = g.padding as isize;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let dy = (ky * g.dilation) as isize - pad;
                let dx = (kx * g.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride) as isize + dx;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` (N, Cin, H, W) with `w` (Cout, Cin, K, K).
pub fn conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, bias: Option<&Tensor<S>>, g: ConvGeometry) -> Result<Tensor<S>> {
    let (ho, wo) = conv_shapes(x, w, g)?;
    let [n, c, h, wi] = x.shape().0;
    let cout = w.shape().n();
    let k = w.shape().h();
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::shape(format!(
                "conv2d: bias has {} entries, expected {cout}",
                b.len()
            )));
        }
    }
    let ckk = c * k * k;
    let p = ho * wo;
    let mut out = Tensor::zeros(Shape::new(n, cout, ho, wo));
    let in_stride = c * h * wi;
    out.data_mut()
        .par_chunks_mut(cout * p)
        .enumerate()
        .for_each(|(i, dst)| {
            let mut cols = vec![S::ZERO; ckk * p];
            im2col(
                &x.data()[i * in_stride..(i + 1) * in_stride],
                c,
                h,
                wi,
                k,
                g,
                ho,
                wo,
                &mut cols,
            );
            S::gemm(
                cout,
                ckk,
                p,
                S::ONE,
                w.data(),
                ckk as isize,
                1,
                &cols,
                p as isize,
                1,
                S::ZERO,
                dst,
                p as isize,
                1,
            );
            if let Some(b) = bias {
                for (o, plane) in dst.chunks_mut(p).enumerate() {
                    let bv = b.data()[o];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Ok(out)
}

pub struct Conv2dGrads<S> {
    pub input: Option<Tensor<S>>,
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

/// Gradients of [`conv2d`] given the upstream gradient `gout`.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    with_bias: bool,
    g: ConvGeometry,
    gout: &Tensor<S>,
    need_input: bool,
) -> Conv2dGrads<S> {
    let [n, c, h, wi] = x.shape().0;
    let [_, cout, ho, wo] = gout.shape().0;
    let k = w.shape().h();
    let ckk = c * k * k;
    let p = ho * wo;
    let in_stride = c * h * wi;

    // Per-sample column matrices and weight-gradient partials; the partials are
    // summed afterwards in batch order so the reduction order never depends on
    // scheduling.
    let per_sample: Vec<(Option<Vec<S>>, Vec<S>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cols = vec![S::ZERO; ckk * p];
            im2col(
                &x.data()[i * in_stride..(i + 1) * in_stride],
                c,
                h,
                wi,
                k,
                g,
                ho,
                wo,
                &mut cols,
            );
            let go = &gout.data()[i * cout * p..(i + 1) * cout * p];
            let mut dw = vec![S::ZERO; cout * ckk];
            // dw = gout (cout x p) * cols^T (p x ckk)
            S::gemm(
                cout,
                p,
                ckk,
                S::ONE,
                go,
                p as isize,
                1,
                &cols,
                1,
                p as isize,
                S::ZERO,
                &mut dw,
                ckk as isize,
                1,
            );
            let dx = need_input.then(|| {
                // dcols = w^T (ckk x cout) * gout (cout x p)
                S::gemm(
                    ckk,
                    cout,
                    p,
                    S::ONE,
                    w.data(),
                    1,
                    ckk as isize,
                    go,
                    p as isize,
                    1,
                    S::ZERO,
                    &mut cols,
                    p as isize,
                    1,
                );
                let mut img = vec![S::ZERO; in_stride];
                col2im(&cols, c, h, wi, k, g, ho, wo, &mut img);
                img
            });
            (dx, dw)
        })
        .collect();

    let mut dweight = Tensor::zeros(w.shape());
    let mut dinput = need_input.then(|| Vec::with_capacity(x.len()));
    for (dx, dw) in per_sample {
        for (a, b) in dweight.data_mut().iter_mut().zip(dw) {
            *a += b;
        }
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend(dx);
        }
    }
    let dbias = with_bias.then(|| {
        let mut db = Tensor::zeros(Shape::new(cout, 1, 1, 1));
        for i in 0..n {
            for o in 0..cout {
                let mut acc = S::ZERO;
                for &v in gout.plane(i, o) {
                    acc += v;
                }
                db.data_mut()[o] += acc;
            }
        }
        db
    });
    Conv2dGrads {
        input: dinput.map(|d| Tensor::from_vec(x.shape(), d).expect("conv2d input grad shape")),
        weight: dweight,
        bias: dbias,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub training: bool,
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            training: true,
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

/// Values saved by [`batch_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<S> {
    pub normalized: Tensor<S>,
    pub inv_std: Vec<S>,
    pub training: bool,
    /// Updated running statistics, present in training mode.
    pub running_mean: Option<Vec<S>>,
    pub running_var: Option<Vec<S>>,
}

/// Per-channel normalization. Training mode uses biased batch statistics over
/// (N, H, W) and produces updated running statistics (unbiased variance);
/// inference mode uses the running statistics.
pub fn batch_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    cfg: BatchNormConfig,
) -> Result<(Tensor<S>, BatchNormCache<S>)> {
    let [n, c, h, w] = x.shape().0;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.len() != c {
            return Err(Error::shape(format!(
                "batch_norm: {name} has {} entries, input has {c} channels",
                t.len()
            )));
        }
    }
    if cfg.epsilon <= 0.0 {
        return Err(Error::invalid("batch_norm: epsilon must be positive"));
    }
    let count = n * h * w;
    if cfg.training && count == 0 {
        return Err(Error::invalid("batch_norm: empty batch in training mode"));
    }
    let eps = S::from_f64(cfg.epsilon);
    let momentum = S::from_f64(cfg.momentum);
    let mut mean = vec![S::ZERO; c];
    let mut var = vec![S::ZERO; c];
    let mut new_rm = None;
    let mut new_rv = None;
    if cfg.training {
        let inv_count = S::ONE / S::from_usize(count);
        for ch in 0..c {
            let mut acc = S::ZERO;
            for i in 0..n {
                for &v in x.plane(i, ch) {
                    acc += v;
                }
            }
            let m = acc * inv_count;
            let mut sq = S::ZERO;
            for i in 0..n {
                for &v in x.plane(i, ch) {
                    let d = v - m;
                    sq += d * d;
                }
            }
            mean[ch] = m;
            var[ch] = sq * inv_count;
        }
        let unbias = if count > 1 {
            S::from_usize(count) / S::from_usize(count - 1)
        } else {
            S::ONE
        };
        new_rm = Some(
            (0..c)
                .map(|ch| (S::ONE - momentum) * running_mean.data()[ch] + momentum * mean[ch])
                .collect(),
        );
        new_rv = Some(
            (0..c)
                .map(|ch| (S::ONE - momentum) * running_var.data()[ch] + momentum * var[ch] * unbias)
                .collect(),
        );
    } else {
        mean.copy_from_slice(running_mean.data());
        var.copy_from_slice(running_var.data());
    }
    let inv_std: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let (m, is, ga, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            let src = x.plane(i, ch);
            let nrm = normalized.plane_mut(i, ch);
            let dst = out.plane_mut(i, ch);
            for j in 0..src.len() {
                nrm[j] = (src[j] - m) * is;
                dst[j] = ga * nrm[j] + be;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            training: cfg.training,
            running_mean: new_rm,
            running_var: new_rv,
        },
    ))
}

/// Returns (d input, d gamma, d beta).
pub fn batch_norm_backward<S: Scalar>(
    cache: &BatchNormCache<S>,
    gamma: &Tensor<S>,
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let [n, c, h, w] = gout.shape().0;
    let count = S::from_usize(n * h * w);
    let mut dx = Tensor::zeros(gout.shape());
    let mut dgamma = Tensor::zeros(Shape::new(c, 1, 1, 1));
    let mut dbeta = Tensor::zeros(Shape::new(c, 1, 1, 1));
    for ch in 0..c {
        let mut sum_g = S::ZERO;
        let mut sum_gx = S::ZERO;
        for i in 0..n {
            for (&g, &xh) in gout.plane(i, ch).iter().zip(cache.normalized.plane(i, ch)) {
                sum_g += g;
                sum_gx += g * xh;
            }
        }
        dgamma.data_mut()[ch] = sum_gx;
        dbeta.data_mut()[ch] = sum_g;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        for i in 0..n {
            let go = gout.plane(i, ch);
            let xh = cache.normalized.plane(i, ch);
            let dst = dx.plane_mut(i, ch);
            if cache.training {
                for j in 0..go.len() {
                    dst[j] = scale * (go[j] - sum_g / count - xh[j] * sum_gx / count);
                }
            } else {
                for j in 0..go.len() {
                    dst[j] = scale * go[j];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::ZERO { v } else { S::ZERO })
}

/// Gradient passes where the input is strictly positive.
pub fn relu_backward<S: Scalar>(x: &Tensor<S>, gout: &Tensor<S>) -> Tensor<S> {
    x.zip_map(gout, |v, g| if v > S::ZERO { g } else { S::ZERO })
        .expect("relu backward shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolWindow {
    pub window_h: usize,
    pub window_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl PoolWindow {
    pub const fn square(window: usize) -> Self {
        PoolWindow {
            window_h: window,
            window_w: window,
            stride_h: window,
            stride_w: window,
        }
    }

    /// Window clipped to the input extent, with output extents.
    pub fn resolve(&self, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
        if self.window_h == 0 || self.window_w == 0 || self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::invalid("avg_pool: window and stride must be positive"));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("avg_pool: empty input"));
        }
        let wh = self.window_h.min(h);
        let ww = self.window_w.min(w);
        Ok((wh, ww, (h - wh) / self.stride_h + 1, (w - ww) / self.stride_w + 1))
    }
}

pub fn avg_pool<S: Scalar>(x: &Tensor<S>, win: PoolWindow) -> Result<Tensor<S>> {
    let [n, c, h, w] = x.shape().0;
    let (wh, ww, ho, wo) = win.resolve(h, w)?;
    let inv = S::ONE / S::from_usize(wh * ww);
    let mut out = Tensor::zeros(Shape::new(n, c, ho, wo));
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = S::ZERO;
                    for y in oy * win.stride_h..oy * win.stride_h + wh {
                        for xx in ox * win.stride_w..ox * win.stride_w + ww {
                            acc += src[y * w + xx];
                        }
                    }
                    dst[oy * wo + ox] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<S: Scalar>(input_shape: Shape, win: PoolWindow, gout: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = input_shape.0;
    let (wh, ww, ho, wo) = win.resolve(h, w).expect("validated in forward");
    let inv = S::ONE / S::from_usize(wh * ww);
    let mut dx = Tensor::zeros(input_shape);
    for i in 0..n {
        for ch in 0..c {
            let go = gout.plane(i, ch).to_vec();
            let dst = dx.plane_mut(i, ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = go[oy * wo + ox] * inv;
                    for y in oy * win.stride_h..oy * win.stride_h + wh {
                        for xx in ox * win.stride_w..ox * win.stride_w + ww {
                            dst[y * w + xx] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Source taps for one output coordinate under the half-pixel convention.
#[derive(Debug, Clone, Copy)]
struct Tap<S> {
    i0: usize,
    i1: usize,
    frac: S,
}

fn bilinear_taps<S: Scalar>(input: usize, output: usize) -> Vec<Tap<S>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            Tap {
                i0,
                i1,
                frac: S::from_f64(src - i0 as f64),
            }
        })
        .collect()
}

/// Bilinear resampling with align-corners=false (half-pixel centres).
pub fn bilinear_resize<S: Scalar>(x: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let [n, c, h, w] = x.shape().0;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("bilinear_resize: extents must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps::<S>(h, out_h);
    let tx = bilinear_taps::<S>(w, out_w);
    let mut out = Tensor::zeros(Shape::new(n, c, out_h, out_w));
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for (oy, ty) in ty.iter().enumerate() {
                let r0 = &src[ty.i0 * w..(ty.i0 + 1) * w];
                let r1 = &src[ty.i1 * w..(ty.i1 + 1) * w];
                for (ox, tx) in tx.iter().enumerate() {
                    let top = r0[tx.i0] + (r0[tx.i1] - r0[tx.i0]) * tx.frac;
                    let bot = r1[tx.i0] + (r1[tx.i1] - r1[tx.i0]) * tx.frac;
                    dst[oy * out_w + ox] = top + (bot - top) * ty.frac;
                }
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize_backward<S: Scalar>(input_shape: Shape, gout: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = input_shape.0;
    let [_, _, out_h, out_w] = gout.shape().0;
    if (h, w) == (out_h, out_w) {
        return gout.clone();
    }
    let ty = bilinear_taps::<S>(h, out_h);
    let tx = bilinear_taps::<S>(w, out_w);
    let mut dx = Tensor::zeros(input_shape);
    for i in 0..n {
        for ch in 0..c {
            let go = gout.plane(i, ch).to_vec();
            let dst = dx.plane_mut(i, ch);
            for (oy, ty) in ty.iter().enumerate() {
                for (ox, tx) in tx.iter().enumerate() {
                    let g = go[oy * out_w + ox];
                    let gy0 = g * (S::ONE - ty.frac);
                    let gy1 = g * ty.frac;
                    dst[ty.i0 * w + tx.i0] += gy0 * (S::ONE - tx.frac);
                    dst[ty.i0 * w + tx.i1] += gy0 * tx.frac;
                    dst[ty.i1 * w + tx.i0] += gy1 * (S::ONE - tx.frac);
                    dst[ty.i1 * w + tx.i1] += gy1 * tx.frac;
                }
            }
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
}

impl Axis {
    /// (outer, axis length, inner) decomposition of `shape` around this axis.
    fn split(self, shape: Shape) -> (usize, usize, usize) {
        let i = self as usize;
        let outer: usize = shape.0[..i].iter().product();
        let inner: usize = shape.0[i + 1..].iter().product();
        (outer, shape.0[i], inner)
    }
}

fn for_each_lane<S: Scalar>(
    x: &Tensor<S>,
    axis: Axis,
    mut f: impl FnMut(&[S], usize, usize, &mut Vec<S>),
) -> Tensor<S> {
    let (outer, len, inner) = axis.split(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut lane = Vec::with_capacity(len);
    let mut result = Vec::with_capacity(len);
    for o in 0..outer {
        for i in 0..inner {
            lane.clear();
            lane.extend((0..len).map(|k| x.data()[(o * len + k) * inner + i]));
            result.clear();
            f(&lane, o, i, &mut result);
            for (k, v) in result.iter().enumerate() {
                out.data_mut()[(o * len + k) * inner + i] = *v;
            }
        }
    }
    out
}

fn lane_max<S: Scalar>(lane: &[S]) -> S {
    lane.iter().skip(1).fold(lane[0], |m, &v| m.max(v))
}

/// Max-shifted softmax along `axis`.
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: Axis) -> Result<Tensor<S>> {
    let (_, len, _) = axis.split(x.shape());
    if len == 0 {
        return Err(Error::invalid("softmax: empty axis"));
    }
    Ok(for_each_lane(x, axis, |lane, _, _, out| {
        let m = lane_max(lane);
        let mut total = S::ZERO;
        for &v in lane {
            let e = (v - m).exp();
            total += e;
            out.push(e);
        }
        out.iter_mut().for_each(|e| *e /= total);
    }))
}

/// `dx = y * (g - sum(g * y))` along the axis, where `y` is the softmax output.
pub fn softmax_backward<S: Scalar>(y: &Tensor<S>, gout: &Tensor<S>, axis: Axis) -> Tensor<S> {
    let (_, len, inner) = axis.split(y.shape());
    for_each_lane(y, axis, |lane, o, i, out| {
        let g = |k: usize| gout.data()[(o * len + k) * inner + i];
        let mut dot = S::ZERO;
        for (k, &yk) in lane.iter().enumerate() {
            dot += yk * g(k);
        }
        out.extend(lane.iter().enumerate().map(|(k, &yk)| yk * (g(k) - dot)));
    })
}

pub fn log_softmax<S: Scalar>(x: &Tensor<S>, axis: Axis) -> Result<Tensor<S>> {
    let (_, len, _) = axis.split(x.shape());
    if len == 0 {
        return Err(Error::invalid("log_softmax: empty axis"));
    }
    Ok(for_each_lane(x, axis, |lane, _, _, out| {
        let m = lane_max(lane);
        let mut total = S::ZERO;
        for &v in lane {
            total += (v - m).exp();
        }
        let lse = m + total.ln();
        out.extend(lane.iter().map(|&v| v - lse));
    }))
}

/// `dx = g - softmax * sum(g)`, with `y` the log-softmax output.
pub fn log_softmax_backward<S: Scalar>(y: &Tensor<S>, gout: &Tensor<S>, axis: Axis) -> Tensor<S> {
    let (_, len, inner) = axis.split(y.shape());
    for_each_lane(y, axis, |lane, o, i, out| {
        let g = |k: usize| gout.data()[(o * len + k) * inner + i];
        let mut total = S::ZERO;
        for k in 0..len {
            total += g(k);
        }
        out.extend(lane.iter().enumerate().map(|(k, &yk)| g(k) - yk.exp() * total));
    })
}

/// Concatenates along `axis`, which must be `Batch` or `Channel`.
pub fn concat<S: Scalar>(inputs: &[&Tensor<S>], axis: Axis) -> Result<Tensor<S>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat: no inputs"))?
        .shape();
    let ax = axis as usize;
    if ax > 1 {
        return Err(Error::invalid("concat: only batch and channel axes are supported"));
    }
    let mut total = 0;
    for t in inputs {
        let s = t.shape();
        for d in 0..4 {
            if d != ax && s.0[d] != first.0[d] {
                return Err(Error::shape(format!(
                    "concat: {s} incompatible with {first} along {axis:?}"
                )));
            }
        }
        total += s.0[ax];
    }
    let mut shape = first;
    shape.0[ax] = total;
    let mut data = Vec::with_capacity(shape.numel());
    match axis {
        Axis::Batch => {
            for t in inputs {
                data.extend_from_slice(t.data());
            }
        }
        _ => {
            for n in 0..first.n() {
                for t in inputs {
                    let block = t.shape().c() * t.shape().plane();
                    data.extend_from_slice(&t.data()[n * block..(n + 1) * block]);
                }
            }
        }
    }
    Tensor::from_vec(shape, data)
}

/// Splits `gout` back into pieces with the given extents along `axis`.
pub fn concat_backward<S: Scalar>(gout: &Tensor<S>, shapes: &[Shape], axis: Axis) -> Vec<Tensor<S>> {
    match axis {
        Axis::Batch => {
            let mut offset = 0;
            shapes
                .iter()
                .map(|&s| {
                    let t =
                        Tensor::from_vec(s, gout.data()[offset..offset + s.numel()].to_vec()).expect("concat backward");
                    offset += s.numel();
                    t
                })
                .collect()
        }
        _ => {
            let n = gout.shape().n();
            let full = gout.shape().c() * gout.shape().plane();
            let mut parts: Vec<Vec<S>> = shapes.iter().map(|s| Vec::with_capacity(s.numel())).collect();
            for i in 0..n {
                let mut offset = i * full;
                for (part, s) in parts.iter_mut().zip(shapes) {
                    let block = s.c() * s.plane();
                    part.extend_from_slice(&gout.data()[offset..offset + block]);
                    offset += block;
                }
            }
            parts
                .into_iter()
                .zip(shapes)
                .map(|(d, &s)| Tensor::from_vec(s, d).expect("concat backward"))
                .collect()
        }
    }
}

/// Moves every column `x` to `x + shift`; vacated columns become zero.
pub fn shift_width<S: Scalar>(x: &Tensor<S>, shift: usize) -> Result<Tensor<S>> {
    let w = x.shape().w();
    if shift >= w {
        return Err(Error::invalid(format!("shift {shift} out of range for width {w}")));
    }
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
        dst[shift..].copy_from_slice(&src[..w - shift]);
    }
    Ok(out)
}

pub fn shift_width_backward<S: Scalar>(gout: &Tensor<S>, shift: usize) -> Tensor<S> {
    let w = gout.shape().w();
    let mut dx = Tensor::zeros(gout.shape());
    for (src, dst) in gout.data().chunks(w).zip(dx.data_mut().chunks_mut(w)) {
        dst[..w - shift].copy_from_slice(&src[shift..]);
    }
    dx
}

/// Output channel `i` is input channel `perm[i]`.
pub fn permute_channels<S: Scalar>(x: &Tensor<S>, perm: &[usize]) -> Result<Tensor<S>> {
    let c = x.shape().c();
    let mut seen = vec![false; c];
    if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(format!("{perm:?} is not a permutation of {c} channels")));
    }
    let mut out = Tensor::zeros(x.shape());
    for n in 0..x.shape().n() {
        for (i, &p) in perm.iter().enumerate() {
            out.plane_mut(n, i).copy_from_slice(x.plane(n, p));
        }
    }
    Ok(out)
}

pub fn permute_channels_backward<S: Scalar>(gout: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let mut dx = Tensor::zeros(gout.shape());
    for n in 0..gout.shape().n() {
        for (i, &p) in perm.iter().enumerate() {
            dx.plane_mut(n, p).copy_from_slice(gout.plane(n, i));
        }
    }
    dx
}

/// Sum over the channel axis, keeping it with extent 1.
pub fn sum_channels<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = x.shape().0;
    let mut out = Tensor::zeros(Shape::new(n, 1, h, w));
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch).to_vec();
            for (d, v) in out.plane_mut(i, 0).iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    out
}

pub fn smooth_l1<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let half = S::from_f64(0.5);
    x.map(|v| {
        let a = v.abs();
        if a < S::ONE {
            half * v * v
        } else {
            a - half
        }
    })
}

pub fn smooth_l1_backward<S: Scalar>(x: &Tensor<S>, gout: &Tensor<S>) -> Tensor<S> {
    x.zip_map(gout, |v, g| {
        let d = if v.abs() < S::ONE {
            v
        } else if v > S::ZERO {
            S::ONE
        } else {
            -S::ONE
        };
        d * g
    })
    .expect("smooth_l1 backward shape")
}
