//! Forward and adjoint kernels on raw tensors. The tape in `super` wires these
//! into a graph; nothing here knows about gradient tracking.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Shape4, Tensor4};

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    fn out_dim(&self, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        (padded >= k).then(|| (padded - k) / self.stride + 1)
    }
}

/// Unfolds one (c, h, w) item into a `(c*kh*kw) × (oh*ow)` row-major matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(src: &[f32], c: usize, h: usize, w: usize, win: Window, oh: usize, ow: usize, cols: &mut [f32]) {
    let p = oh * ow;
    let pad = win.pad as isize;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        *out = if ix < 0 || ix >= w as isize { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a (c, h, w) item.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(cols: &[f32], c: usize, h: usize, w: usize, win: Window, oh: usize, ow: usize, dst: &mut [f32]) {
    let p = oh * ow;
    let pad = win.pad as isize;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor4>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(Error::dim(op, b.shape(), channels));
        }
    }
    Ok(())
}

fn add_bias(out: &mut Tensor4, bias: Option<&Tensor4>) {
    if let Some(b) = bias {
        let s = out.shape();
        let plane = s.plane();
        for (chunk_idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = b.data()[chunk_idx % s.c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad(dy: &Tensor4) -> Tensor4 {
    let s = dy.shape();
    let mut db = Tensor4::zeros([1, s.c, 1, 1]);
    for (chunk_idx, chunk) in dy.data().chunks(s.plane()).enumerate() {
        db.data_mut()[chunk_idx % s.c] += chunk.iter().sum::<f32>();
    }
    db
}

pub(crate) fn conv2d_window(input: Shape4, weight: Shape4, stride: usize, padding: usize) -> Result<(Window, usize, usize)> {
    if input.c != weight.c {
        return Err(Error::dim("conv2d", input, weight));
    }
    if stride == 0 {
        return Err(Error::Argument("conv2d stride must be >= 1".into()));
    }
    if weight.h.is_multiple_of(2) || weight.w.is_multiple_of(2) {
        return Err(Error::Argument(format!("conv2d kernel must have odd extent, got {weight:?}")));
    }
    let win = Window {
        kh: weight.h,
        kw: weight.w,
        stride,
        pad: padding,
    };
    let oh = win.out_dim(input.h, win.kh).ok_or_else(|| Error::dim("conv2d", input, weight))?;
    let ow = win.out_dim(input.w, win.kw).ok_or_else(|| Error::dim("conv2d", input, weight))?;
    Ok((win, oh, ow))
}

pub fn conv2d(input: &Tensor4, weight: &Tensor4, bias: Option<&Tensor4>, stride: usize, padding: usize) -> Result<Tensor4> {
    let (is, ws) = (input.shape(), weight.shape());
    let (win, oh, ow) = conv2d_window(is, ws, stride, padding)?;
    check_bias("conv2d", bias, ws.n)?;
    let k = ws.c * ws.h * ws.w;
    let p = oh * ow;
    let mut out = Tensor4::zeros([is.n, ws.n, oh, ow]);
    let mut cols = vec![0.0; k * p];
    let item_out = ws.n * p;
    for n in 0..is.n {
        im2col(input.item(n), is.c, is.h, is.w, win, oh, ow, &mut cols);
        let dst = &mut out.data_mut()[n * item_out..(n + 1) * item_out];
        gemm(ws.n, k, p, 1.0, weight.data(), (k as isize, 1), &cols, (p as isize, 1), 0.0, dst);
    }
    add_bias(&mut out, bias);
    Ok(out)
}

/// Gradients of [`conv2d`]. `dx` and `dw` are only computed when requested.
pub(crate) fn conv2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    dy: &Tensor4,
    stride: usize,
    padding: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor4>, Option<Tensor4>, Tensor4)> {
    let (is, ws) = (input.shape(), weight.shape());
    let (win, oh, ow) = conv2d_window(is, ws, stride, padding)?;
    let k = ws.c * ws.h * ws.w;
    let p = oh * ow;
    let item_out = ws.n * p;
    let mut dx = need_dx.then(|| Tensor4::zeros(is));
    let mut dw = need_dw.then(|| Tensor4::zeros(ws));
    let mut cols = vec![0.0; k * p];
    for n in 0..is.n {
        let dy_n = &dy.data()[n * item_out..(n + 1) * item_out];
        if let Some(dw) = dw.as_mut() {
            im2col(input.item(n), is.c, is.h, is.w, win, oh, ow, &mut cols);
            // dW (oc×k) += dY (oc×p) · colsᵀ (p×k)
            gemm(ws.n, p, k, 1.0, dy_n, (p as isize, 1), &cols, (1, p as isize), 1.0, dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            // dcols (k×p) = Wᵀ (k×oc) · dY (oc×p)
            gemm(k, ws.n, p, 1.0, weight.data(), (1, k as isize), dy_n, (p as isize, 1), 0.0, &mut cols);
            let item = is.item();
            col2im(&cols, is.c, is.h, is.w, win, oh, ow, &mut dx.data_mut()[n * item..(n + 1) * item]);
        }
    }
    Ok((dx, dw, bias_grad(dy)))
}

/// Weight layout is (in_c, out_c, kh, kw); no padding.
pub fn conv_transpose2d(input: &Tensor4, weight: &Tensor4, bias: Option<&Tensor4>, stride: usize) -> Result<Tensor4> {
    let (is, ws) = (input.shape(), weight.shape());
    let (win, oh, ow) = transpose_geometry(is, ws, stride)?;
    check_bias("conv_transpose2d", bias, ws.c)?;
    let k = ws.c * ws.h * ws.w;
    let p = is.plane();
    let mut out = Tensor4::zeros([is.n, ws.c, oh, ow]);
    let mut cols = vec![0.0; k * p];
    let item_out = ws.c * oh * ow;
    for n in 0..is.n {
        // cols (k×p) = Wᵀ (k×in_c) · X (in_c×p)
        gemm(k, ws.n, p, 1.0, weight.data(), (1, k as isize), input.item(n), (p as isize, 1), 0.0, &mut cols);
        let dst = &mut out.data_mut()[n * item_out..(n + 1) * item_out];
        col2im(&cols, ws.c, oh, ow, win, is.h, is.w, dst);
    }
    add_bias(&mut out, bias);
    Ok(out)
}

fn transpose_geometry(is: Shape4, ws: Shape4, stride: usize) -> Result<(Window, usize, usize)> {
    if stride == 0 {
        return Err(Error::Argument("conv_transpose2d stride must be >= 1".into()));
    }
    if is.c != ws.n {
        return Err(Error::dim("conv_transpose2d", is, ws));
    }
    if is.h == 0 || is.w == 0 {
        return Err(Error::dim("conv_transpose2d", is, ws));
    }
    let win = Window {
        kh: ws.h,
        kw: ws.w,
        stride,
        pad: 0,
    };
    Ok((win, (is.h - 1) * stride + ws.h, (is.w - 1) * stride + ws.w))
}

pub(crate) fn conv_transpose2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    dy: &Tensor4,
    stride: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor4>, Option<Tensor4>, Tensor4)> {
    let (is, ws) = (input.shape(), weight.shape());
    let (win, oh, ow) = transpose_geometry(is, ws, stride)?;
    let k = ws.c * ws.h * ws.w;
    let p = is.plane();
    let item_out = ws.c * oh * ow;
    let mut dx = need_dx.then(|| Tensor4::zeros(is));
    let mut dw = need_dw.then(|| Tensor4::zeros(ws));
    let mut cols = vec![0.0; k * p];
    for n in 0..is.n {
        if !need_dx && !need_dw {
            break;
        }
        im2col(&dy.data()[n * item_out..(n + 1) * item_out], ws.c, oh, ow, win, is.h, is.w, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let item = is.item();
            // dX (in_c×p) = W (in_c×k) · dcols (k×p)
            gemm(ws.n, k, p, 1.0, weight.data(), (k as isize, 1), &cols, (p as isize, 1), 0.0, &mut dx.data_mut()[n * item..(n + 1) * item]);
        }
        if let Some(dw) = dw.as_mut() {
            // dW (in_c×k) += X (in_c×p) · dcolsᵀ (p×k)
            gemm(ws.n, p, k, 1.0, input.item(n), (p as isize, 1), &cols, (1, p as isize), 1.0, dw.data_mut());
        }
    }
    Ok((dx, dw, bias_grad(dy)))
}

/// Returns the pooled tensor and, per output cell, the flat input index that
/// won (first in row-major order on ties).
pub(crate) fn max_pool2d(input: &Tensor4, size: usize) -> Result<(Tensor4, Vec<u32>)> {
    let s = input.shape();
    if size == 0 || !s.h.is_multiple_of(size) || !s.w.is_multiple_of(size) {
        return Err(Error::dim("max_pool2d", s, size));
    }
    let (oh, ow) = (s.h / size, s.w / size);
    let mut out = Tensor4::zeros([s.n, s.c, oh, ow]);
    let mut arg = Vec::with_capacity(out.len());
    let data = input.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * s.w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * s.w + ox * size + dx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                out.data_mut()[arg.len()] = data[best];
                arg.push(best as u32);
            }
        }
    }
    Ok((out, arg))
}

/// Running statistics carried by a batch-norm layer between calls.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) struct BatchNormOut {
    pub out: Tensor4,
    pub xhat: Tensor4,
    pub inv_std: Vec<f32>,
}

pub(crate) fn batch_norm2d(
    input: &Tensor4,
    gamma: &Tensor4,
    beta: &Tensor4,
    stats: &mut BatchNormStats,
    mode: Mode,
) -> Result<BatchNormOut> {
    let s = input.shape();
    if gamma.len() != s.c || beta.len() != s.c || stats.mean.len() != s.c {
        return Err(Error::dim("batch_norm2d", s, gamma.shape()));
    }
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut inv_std = vec![0.0f32; s.c];
    let mut mean = vec![0.0f32; s.c];
    match mode {
        Mode::Train => {
            for c in 0..s.c {
                let (mut sum, mut sq) = (0.0f64, 0.0f64);
                for n in 0..s.n {
                    let base = s.index(n, c, 0, 0);
                    for &v in &input.data()[base..base + plane] {
                        sum += v as f64;
                    }
                }
                let mu = sum / count;
                for n in 0..s.n {
                    let base = s.index(n, c, 0, 0);
                    for &v in &input.data()[base..base + plane] {
                        let d = v as f64 - mu;
                        sq += d * d;
                    }
                }
                let var = sq / count;
                mean[c] = mu as f32;
                inv_std[c] = (1.0 / (var + BN_EPSILON as f64).sqrt()) as f32;
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * mu as f32;
                stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * unbiased as f32;
            }
        }
        Mode::Eval => {
            for c in 0..s.c {
                mean[c] = stats.mean[c];
                inv_std[c] = 1.0 / (stats.var[c] + BN_EPSILON).sqrt();
            }
        }
    }
    let mut xhat = Tensor4::zeros(s);
    let mut out = Tensor4::zeros(s);
    for (chunk_idx, (src, (xh, o))) in input
        .data()
        .chunks(plane)
        .zip(xhat.data_mut().chunks_mut(plane).zip(out.data_mut().chunks_mut(plane)))
        .enumerate()
    {
        let c = chunk_idx % s.c;
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for ((&v, xh), o) in src.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
            *xh = (v - mean[c]) * inv_std[c];
            *o = g * *xh + b;
        }
    }
    Ok(BatchNormOut { out, xhat, inv_std })
}

pub(crate) fn batch_norm2d_backward(
    dy: &Tensor4,
    xhat: &Tensor4,
    gamma: &Tensor4,
    inv_std: &[f32],
    mode: Mode,
) -> (Tensor4, Tensor4, Tensor4) {
    let s = dy.shape();
    let plane = s.plane();
    let m = (s.n * plane) as f32;
    let mut dgamma = Tensor4::zeros([1, s.c, 1, 1]);
    let mut dbeta = Tensor4::zeros([1, s.c, 1, 1]);
    let mut sum_dxhat = vec![0.0f64; s.c];
    let mut sum_dxhat_xhat = vec![0.0f64; s.c];
    for (chunk_idx, (g, xh)) in dy.data().chunks(plane).zip(xhat.data().chunks(plane)).enumerate() {
        let c = chunk_idx % s.c;
        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
        for (&gv, &xv) in g.iter().zip(xh) {
            sg += gv as f64;
            sgx += (gv * xv) as f64;
        }
        dbeta.data_mut()[c] += sg as f32;
        dgamma.data_mut()[c] += sgx as f32;
        sum_dxhat[c] += sg * gamma.data()[c] as f64;
        sum_dxhat_xhat[c] += sgx * gamma.data()[c] as f64;
    }
    let mut dx = Tensor4::zeros(s);
    for (chunk_idx, ((g, xh), d)) in dy
        .data()
        .chunks(plane)
        .zip(xhat.data().chunks(plane))
        .zip(dx.data_mut().chunks_mut(plane))
        .enumerate()
    {
        let c = chunk_idx % s.c;
        let gc = gamma.data()[c];
        match mode {
            Mode::Train => {
                let k = inv_std[c] / m;
                let (a, b) = (sum_dxhat[c] as f32, sum_dxhat_xhat[c] as f32);
                for ((&gv, &xv), dv) in g.iter().zip(xh).zip(d.iter_mut()) {
                    *dv = k * (m * gv * gc - a - xv * b);
                }
            }
            Mode::Eval => {
                for (&gv, dv) in g.iter().zip(d.iter_mut()) {
                    *dv = gv * gc * inv_std[c];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
