//! Forward and backward kernels shared by the autodiff graph.
//!
//! Accumulation order inside every kernel is fixed, so outputs are
//! bit-identical across runs and thread counts. The only parallelism is
//! across independent output rows in the matrix kernels.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{MgfError, Result};

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn padded(padding: usize) -> Self {
        ConvSpec {
            padding,
            ..Default::default()
        }
    }

    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(MgfError::invalid_argument(format!(
                "kernel span {} exceeds padded extent {}",
                span, padded
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

const PAR_MACS: usize = 1 << 21;

/// C = A(m,k) * B(k,n). Row-parallel when large; each row's accumulation
/// order is fixed.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |ci: &mut [f64], i: usize| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in ci.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MACS && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// C = A(m,k) * B(n,k)^T. Dot-product form with four fixed accumulator lanes.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |ci: &mut [f64], i: usize| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in ci.iter_mut().enumerate() {
            *cv = dot(arow, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_MACS && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// C = A(k,m)^T * B(k,n).
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |ci: &mut [f64], i: usize| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in ci.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MACS && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// Four-lane dot product; the lane grouping is part of the definition, so the
/// result is reproducible everywhere.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let p = i * 4;
        lanes[0] += a[p] * b[p];
        lanes[1] += a[p + 1] * b[p + 1];
        lanes[2] += a[p + 2] * b[p + 2];
        lanes[3] += a[p + 3] * b[p + 3];
    }
    let mut tail = 0.0;
    for p in chunks * 4..a.len() {
        tail += a[p] * b[p];
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<ConvGeom> {
    if x.shape().len() != 4 || w.shape().len() != 4 {
        return Err(MgfError::shape_mismatch(format!(
            "conv2d expects 4-D input and weight, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(MgfError::invalid_argument(format!(
            "groups {} must divide in/out channels {}/{}",
            spec.groups, cin, cout
        )));
    }
    if wcin != cin / spec.groups {
        return Err(MgfError::shape_mismatch(format!(
            "weight in-channels {} != input channels {} / groups {}",
            wcin, cin, spec.groups
        )));
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(MgfError::invalid_argument(
            "stride and dilation must be positive",
        ));
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        oh: spec.out_extent(h, kh)?,
        ow: spec.out_extent(wd, kw)?,
    })
}

/// Lay out one sample's group-slice as the (cin_g*kh*kw, oh*ow) patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: &ConvSpec,
    cin_g: usize,
) -> Vec<f64> {
    let mut col = vec![0.0; cin_g * kh * kw * oh * ow];
    let plane = h * w;
    let mut r = 0;
    for c in 0..cin_g {
        for ky in 0..kh {
            for kx in 0..kw {
                let base = r * oh * ow;
                r += 1;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = c * plane + iy as usize * w;
                    let dst_row = base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[dst_row + ox] = x[src_row + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter a patch-matrix gradient back onto the input plane.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &[f64],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: &ConvSpec,
    cin_g: usize,
    dx: &mut [f64],
) {
    let plane = h * w;
    let mut r = 0;
    for c in 0..cin_g {
        for ky in 0..kh {
            for kx in 0..kw {
                let base = r * oh * ow;
                r += 1;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = c * plane + iy as usize * w;
                    let src_row = base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[dst_row + ix as usize] += dcol[src_row + ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with stride, zero padding, dilation, and groups.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        oh,
        ow,
    } = conv_geometry(x, w, spec)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(MgfError::shape_mismatch(format!(
                "bias shape {:?}, expected [{}]",
                b.shape(),
                cout
            )));
        }
    }
    let g = spec.groups;
    let (cin_g, cout_g) = (cin / g, cout / g);
    let kdim = cin_g * kh * kw;
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for gi in 0..g {
            let xs = &x.data()[(s * cin + gi * cin_g) * h * wd..(s * cin + (gi + 1) * cin_g) * h * wd];
            let col = im2col(xs, h, wd, kh, kw, oh, ow, spec, cin_g);
            let wg = &w.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
            let res = matmul_nn(wg, &col, cout_g, kdim, oh * ow);
            let dst = &mut out[(s * cout + gi * cout_g) * oh * ow..(s * cout + (gi + 1) * cout_g) * oh * ow];
            dst.copy_from_slice(&res);
        }
        if let Some(b) = bias {
            for c in 0..cout {
                let bv = b.data()[c];
                for v in &mut out[(s * cout + c) * oh * ow..(s * cout + c + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

/// Gradients of `conv2d` with respect to input, weight, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    spec: &ConvSpec,
    want_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        oh,
        ow,
    } = conv_geometry(x, w, spec)?;
    let g = spec.groups;
    let (cin_g, cout_g) = (cin / g, cout / g);
    let kdim = cin_g * kh * kw;

    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; cout];
    let mut dx = if want_dx { vec![0.0; x.numel()] } else { Vec::new() };

    for s in 0..n {
        for gi in 0..g {
            let xs = &x.data()[(s * cin + gi * cin_g) * h * wd..(s * cin + (gi + 1) * cin_g) * h * wd];
            let col = im2col(xs, h, wd, kh, kw, oh, ow, spec, cin_g);
            let dys = &dy.data()
                [(s * cout + gi * cout_g) * oh * ow..(s * cout + (gi + 1) * cout_g) * oh * ow];
            // dW_g += dY_g * col^T
            let contrib = matmul_nt(dys, &col, cout_g, oh * ow, kdim);
            for (dst, src) in dw[gi * cout_g * kdim..(gi + 1) * cout_g * kdim]
                .iter_mut()
                .zip(&contrib)
            {
                *dst += src;
            }
            if want_dx {
                let wg = &w.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
                // dcol = W_g^T * dY_g
                let dcol = matmul_tn(wg, dys, kdim, cout_g, oh * ow);
                let dst = &mut dx
                    [(s * cin + gi * cin_g) * h * wd..(s * cin + (gi + 1) * cin_g) * h * wd];
                col2im(&dcol, h, wd, kh, kw, oh, ow, spec, cin_g, dst);
            }
        }
        for c in 0..cout {
            let mut acc = 0.0;
            for v in &dy.data()[(s * cout + c) * oh * ow..(s * cout + c + 1) * oh * ow] {
                acc += v;
            }
            db[c] += acc;
        }
    }

    let dxt = if want_dx {
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((
        dxt,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![cout], db)?,
    ))
}

/// Per-axis bilinear sampling table under the half-pixel-centers convention.
fn resize_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let lo = (floor.max(0.0) as usize).min(in_len - 1);
            let hi = ((floor as isize + 1).max(0) as usize).min(in_len - 1);
            (lo, hi, t)
        })
        .collect()
}

/// Bilinear resize of (N,C,H,W) to (N,C,out_h,out_w), half-pixel centers.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(MgfError::shape_mismatch(format!(
            "bilinear_resize expects 4-D input, got {:?}",
            x.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(MgfError::invalid_argument(
            "resize target must be at least 1x1",
        ));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ys = resize_taps(out_h, h);
    let xs = resize_taps(out_w, w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let v00 = src[y0 * w + x0];
                let v01 = src[y0 * w + x1];
                let v10 = src[y1 * w + x0];
                let v11 = src[y1 * w + x1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                dst[oy * out_w + ox] = top + (bot - top) * ty;
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

/// Scatter resize gradients back to the input grid.
pub fn bilinear_resize_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (n, c, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let ys = resize_taps(oh, in_h);
    let xs = resize_taps(ow, in_w);
    let mut dx = vec![0.0; n * c * in_h * in_w];
    for plane in 0..n * c {
        let src = &dy.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * in_h * in_w..(plane + 1) * in_h * in_w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * in_w + x0] += g * (1.0 - ty) * (1.0 - tx);
                dst[y0 * in_w + x1] += g * (1.0 - ty) * tx;
                dst[y1 * in_w + x0] += g * ty * (1.0 - tx);
                dst[y1 * in_w + x1] += g * ty * tx;
            }
        }
    }
    Tensor::new(vec![n, c, in_h, in_w], dx)
}

/// 2x2 max pooling with stride 2; returns pooled values and flat argmax
/// indices (first maximum in scan order wins ties).
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(MgfError::invalid_argument(format!(
            "maxpool2 needs at least 2x2 input, got {}x{}",
            h, w
        )));
    }
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    for plane in 0..n * c {
        let src_base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = src_base + (oy * 2 + dy) * w + ox * 2 + dx;
                        if x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                }
                out[plane * oh * ow + oy * ow + ox] = best;
                arg[plane * oh * ow + oy * ow + ox] = best_i;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape().len() {
        return Err(MgfError::invalid_argument(format!(
            "softmax axis {} out of range for shape {:?}",
            axis,
            x.shape()
        )));
    }
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(x.data()[base + j * inner]);
            }
            let mut denom = 0.0;
            for j in 0..len {
                let e = (x.data()[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                denom += e;
            }
            for j in 0..len {
                out[base + j * inner] /= denom;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// dx = s * (dy - sum_axis(dy * s))
pub fn softmax_backward(s: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let len = s.shape()[axis];
    let inner: usize = s.shape()[axis + 1..].iter().product();
    let outer: usize = s.shape()[..axis].iter().product();
    let mut dx = vec![0.0; s.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut acc = 0.0;
            for j in 0..len {
                acc += dy.data()[base + j * inner] * s.data()[base + j * inner];
            }
            for j in 0..len {
                let idx = base + j * inner;
                dx[idx] = s.data()[idx] * (dy.data()[idx] - acc);
            }
        }
    }
    Tensor {
        shape: s.shape().to_vec(),
        data: dx,
        grad: None,
    }
}

/// Per-channel statistics cached by the batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization over (N,H,W) per channel. In training mode the batch
/// statistics are used (and returned for running-stat updates); in eval mode
/// the provided running statistics are.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: Option<(&[f64], &[f64])>,
    eps: f64,
) -> Result<(Tensor, BnCache)> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(MgfError::shape_mismatch(format!(
            "batch_norm affine shapes {:?}/{:?}, expected [{}]",
            gamma.shape(),
            beta.shape(),
            c
        )));
    }
    let m = (n * h * w) as f64;
    let plane = h * w;
    let (mean, var): (Vec<f64>, Vec<f64>) = match running {
        Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
        None => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut acc = 0.0;
                for s in 0..n {
                    let base = (s * c + ci) * plane;
                    for v in &x.data()[base..base + plane] {
                        acc += v;
                    }
                }
                mean[ci] = acc / m;
                let mut acc2 = 0.0;
                for s in 0..n {
                    let base = (s * c + ci) * plane;
                    for v in &x.data()[base..base + plane] {
                        let d = v - mean[ci];
                        acc2 += d * d;
                    }
                }
                var[ci] = acc2 / m;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; x.numel()];
    for s in 0..n {
        for ci in 0..c {
            let base = (s * c + ci) * plane;
            let (g, b, mu, is) = (gamma.data()[ci], beta.data()[ci], mean[ci], inv_std[ci]);
            for i in base..base + plane {
                out[i] = g * (x.data()[i] - mu) * is + b;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BnCache { mean, var, inv_std },
    ))
}

/// Backward pass of training-mode batch norm (statistics depend on x).
pub fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    cache: &BnCache,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let m = (n * h * w) as f64;
    let mut dx = vec![0.0; x.numel()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ci in 0..c {
        let (mu, is) = (cache.mean[ci], cache.inv_std[ci]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for s in 0..n {
            let base = (s * c + ci) * plane;
            for i in base..base + plane {
                let xhat = (x.data()[i] - mu) * is;
                sum_dy += dy.data()[i];
                sum_dy_xhat += dy.data()[i] * xhat;
            }
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;
        let g = gamma.data()[ci];
        for s in 0..n {
            let base = (s * c + ci) * plane;
            for i in base..base + plane {
                let xhat = (x.data()[i] - mu) * is;
                dx[i] = g * is / m * (m * dy.data()[i] - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    (
        Tensor {
            shape: x.shape().to_vec(),
            data: dx,
            grad: None,
        },
        Tensor {
            shape: vec![c],
            data: dgamma,
            grad: None,
        },
        Tensor {
            shape: vec![c],
            data: dbeta,
            grad: None,
        },
    )
}

/// Backward pass of eval-mode batch norm (statistics are constants).
pub fn batch_norm_eval_backward(
    x: &Tensor,
    gamma: &Tensor,
    cache: &BnCache,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let mut dx = vec![0.0; x.numel()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ci in 0..c {
        let (mu, is, g) = (cache.mean[ci], cache.inv_std[ci], gamma.data()[ci]);
        for s in 0..n {
            let base = (s * c + ci) * plane;
            for i in base..base + plane {
                let xhat = (x.data()[i] - mu) * is;
                dgamma[ci] += dy.data()[i] * xhat;
                dbeta[ci] += dy.data()[i];
                dx[i] = dy.data()[i] * g * is;
            }
        }
    }
    (
        Tensor {
            shape: x.shape().to_vec(),
            data: dx,
            grad: None,
        },
        Tensor {
            shape: vec![c],
            data: dgamma,
            grad: None,
        },
        Tensor {
            shape: vec![c],
            data: dbeta,
            grad: None,
        },
    )
}

/// Per-row statistics cached by layer norm.
#[derive(Clone, Debug)]
pub struct LnCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Layer normalization over the last axis of a 2-D tensor.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, LnCache)> {
    if x.shape().len() != 2 {
        return Err(MgfError::shape_mismatch(format!(
            "layer_norm expects 2-D input, got {:?}",
            x.shape()
        )));
    }
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(MgfError::shape_mismatch(format!(
            "layer_norm affine shapes {:?}/{:?}, expected [{}]",
            gamma.shape(),
            beta.shape(),
            d
        )));
    }
    let mut out = vec![0.0; x.numel()];
    let mut mean = vec![0.0; rows];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mu: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        mean[r] = mu;
        inv_std[r] = is;
        for i in 0..d {
            out[r * d + i] = gamma.data()[i] * (row[i] - mu) * is + beta.data()[i];
        }
    }
    Ok((Tensor::new(vec![rows, d], out)?, LnCache { mean, inv_std }))
}

pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    cache: &LnCache,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    let df = d as f64;
    let mut dx = vec![0.0; x.numel()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for r in 0..rows {
        let (mu, is) = (cache.mean[r], cache.inv_std[r]);
        let row = &x.data()[r * d..(r + 1) * d];
        let dyr = &dy.data()[r * d..(r + 1) * d];
        let mut sum_dyg = 0.0;
        let mut sum_dyg_xhat = 0.0;
        for i in 0..d {
            let xhat = (row[i] - mu) * is;
            let dyg = dyr[i] * gamma.data()[i];
            dgamma[i] += dyr[i] * xhat;
            dbeta[i] += dyr[i];
            sum_dyg += dyg;
            sum_dyg_xhat += dyg * xhat;
        }
        for i in 0..d {
            let xhat = (row[i] - mu) * is;
            let dyg = dyr[i] * gamma.data()[i];
            dx[r * d + i] = is / df * (df * dyg - sum_dyg - xhat * sum_dyg_xhat);
        }
    }
    (
        Tensor {
            shape: x.shape().to_vec(),
            data: dx,
            grad: None,
        },
        Tensor {
            shape: vec![d],
            data: dgamma,
            grad: None,
        },
        Tensor {
            shape: vec![d],
            data: dbeta,
            grad: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_preserves_input() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, None, &ConvSpec::padded(1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &k, None, &ConvSpec::default()).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn output_extent_formula() {
        let spec = ConvSpec {
            stride: 2,
            padding: 1,
            dilation: 2,
            groups: 1,
        };
        // floor((8 + 2 - 2*2 - 1)/2) + 1 = floor(5/2) + 1 = 3
        assert_eq!(spec.out_extent(8, 3).unwrap(), 3);
    }

    #[test]
    fn groups_must_divide_channels() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        let spec = ConvSpec {
            groups: 2,
            ..Default::default()
        };
        assert!(conv2d(&x, &w, None, &spec).is_err());
    }

    #[test]
    fn resize_preserves_constants() {
        let x = Tensor::full(&[1, 1, 3, 5], 0.7);
        let y = bilinear_resize(&x, 7, 2).unwrap();
        for v in y.data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_monotone_rows() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = bilinear_resize(&x, 2, 4).unwrap();
        for r in 0..2 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            for i in 1..4 {
                assert!(row[i] >= row[i - 1]);
            }
        }
    }

    #[test]
    fn resize_rejects_empty_target() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(bilinear_resize(&x, 0, 2).is_err());
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let x = Tensor::full(&[4], 3.0);
        let s = softmax(&x, 0).unwrap();
        for v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_scalar_reference() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (got, v) in s.data().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((got - v.exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let s = sigmoid(&Tensor::scalar(0.0));
        assert_eq!(s.item(), 0.5);
    }

    #[test]
    fn matmul_forms_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3x4
        let c = matmul_nn(&a, &b, 2, 3, 4);
        // b transposed to 4x3
        let mut bt = vec![0.0; 12];
        for r in 0..3 {
            for cc in 0..4 {
                bt[cc * 3 + r] = b[r * 4 + cc];
            }
        }
        let c2 = matmul_nt(&a, &bt, 2, 3, 4);
        // a transposed to 3x2
        let mut at = vec![0.0; 6];
        for r in 0..2 {
            for cc in 0..3 {
                at[cc * 2 + r] = a[r * 3 + cc];
            }
        }
        let c3 = matmul_tn(&at, &b, 2, 3, 4);
        for i in 0..8 {
            assert!((c[i] - c2[i]).abs() < 1e-12);
            assert!((c[i] - c3[i]).abs() < 1e-12);
        }
    }
}
