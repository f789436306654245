//! Forward and backward kernels on plain tensors.
//!
//! Everything here is shape-checked, allocation-explicit and free of
//! hidden state; the tape composes these into differentiable graphs.

use serde::{Deserialize, Serialize};

use super::dense::{Scalar, Tensor};
use super::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

pub(super) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a)?;
    let (k2, n) = dims2(b)?;
    if k != k2 {
        return Err(TensorError::InnerDimMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    {
        let ad = a.data();
        let bd = b.data();
        let od = out.data_mut();
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut od[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
    }
    Ok(out)
}

pub(super) fn transpose2d<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = dims2(a)?;
    let ad = a.data();
    let mut out = Tensor::zeros(&[n, m]);
    let od = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            od[j * m + i] = ad[i * n + j];
        }
    }
    Ok(out)
}

pub(super) fn dims2<T: Scalar>(a: &Tensor<T>) -> Result<(usize, usize)> {
    match a.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(TensorError::Rank {
            expected: 2,
            shape: other.to_vec(),
        }),
    }
}

pub(super) fn dims3<T: Scalar>(a: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match a.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(TensorError::Rank {
            expected: 3,
            shape: other.to_vec(),
        }),
    }
}

pub(super) fn conv2d_out_dim(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if k % 2 == 0 {
        return Err(TensorError::EvenKernel(k));
    }
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if k > hp || k > wp || (hp - k) % stride != 0 || (wp - k) % stride != 0 {
        return Err(TensorError::NonIntegralConvOutput {
            h,
            w,
            k,
            stride,
            padding,
        });
    }
    Ok(((hp - k) / stride + 1, (wp - k) / stride + 1))
}

/// Cross-correlation over a C_in×H×W input with a C_out×C_in×k×k kernel.
pub(super) fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (c_in, h, wd) = dims3(x)?;
    let (c_out, kc_in, k) = kernel_dims(w)?;
    if kc_in != c_in {
        return Err(TensorError::ChannelMismatch {
            input: c_in,
            kernel: kc_in,
        });
    }
    let (oh, ow) = conv2d_out_dim(h, wd, k, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                left: vec![c_out],
                right: b.shape().to_vec(),
            });
        }
    }
    let xd = x.data();
    let wdt = w.data();
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    let od = out.data_mut();
    for co in 0..c_out {
        let b = bias.map(|b| b.data()[co]).unwrap_or_else(T::zero);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ci in 0..c_in {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += xd[(ci * h + iy as usize) * wd + ix as usize]
                                * wdt[((co * c_in + ci) * k + ky) * k + kx];
                        }
                    }
                }
                od[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(out)
}

fn kernel_dims<T: Scalar>(w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match w.shape() {
        [co, ci, k1, k2] if k1 == k2 => Ok((*co, *ci, *k1)),
        other => Err(TensorError::Rank {
            expected: 4,
            shape: other.to_vec(),
        }),
    }
}

/// Gradients of conv2d: (d_input, d_weight, d_bias).
pub(super) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (c_in, h, wd) = dims3(x)?;
    let (c_out, _, k) = kernel_dims(w)?;
    let (_, oh, ow) = dims3(dout)?;
    let xd = x.data();
    let wdt = w.data();
    let dod = dout.data();

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    {
        let dxd = dx.data_mut();
        let dwd = dw.data_mut();
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dod[(co * oh + oy) * ow + ox];
                    if g == T::zero() {
                        continue;
                    }
                    for ci in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = (ci * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * c_in + ci) * k + ky) * k + kx;
                                dxd[xi] += g * wdt[wi];
                                dwd[wi] += g * xd[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    let db = if has_bias {
        let mut db = Tensor::zeros(&[c_out]);
        let dbd = db.data_mut();
        for co in 0..c_out {
            dbd[co] = dod[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum();
        }
        Some(db)
    } else {
        None
    };
    Ok((dx, dw, db))
}

/// Numerically stable softmax along the last axis.
pub(super) fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = last_dim(x)?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

pub(super) fn softmax_backward<T: Scalar>(out: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let d = *out.shape().last().expect("softmax output is non-scalar");
    let mut dx = Tensor::zeros(out.shape());
    let od = out.data();
    let dod = dout.data();
    let dxd = dx.data_mut();
    for r in 0..od.len() / d {
        let o = &od[r * d..(r + 1) * d];
        let g = &dod[r * d..(r + 1) * d];
        let dot: T = o.iter().zip(g.iter()).map(|(&y, &dy)| y * dy).sum();
        for i in 0..d {
            dxd[r * d + i] = o[i] * (g[i] - dot);
        }
    }
    dx
}

pub(super) fn last_dim<T: Scalar>(x: &Tensor<T>) -> Result<usize> {
    x.shape().last().copied().ok_or(TensorError::Rank {
        expected: 1,
        shape: vec![],
    })
}

pub(super) const LAYER_NORM_EPS: f64 = 1e-5;

/// Zero-mean unit-variance over the last axis, then affine.
pub(super) fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = last_dim(x)?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            left: vec![d],
            right: if gain.shape() != [d] {
                gain.shape().to_vec()
            } else {
                bias.shape().to_vec()
            },
        });
    }
    let eps = T::from_f64(LAYER_NORM_EPS);
    let g = gain.data();
    let b = bias.data();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let (mu, inv) = row_moments(row, eps);
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mu) * inv * g[i] + b[i];
        }
    }
    Ok(out)
}

fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
    (mu, T::one() / (var + eps).sqrt())
}

/// Gradients of layer_norm: (dx, dgain, dbias).
pub(super) fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = *x.shape().last().expect("layer_norm input is non-scalar");
    let eps = T::from_f64(LAYER_NORM_EPS);
    let n = T::from_f64(d as f64);
    let g = gain.data();
    let xd = x.data();
    let dod = dout.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    let dxd = dx.data_mut();
    let dgd = dgain.data_mut();
    let dbd = dbias.data_mut();
    for r in 0..xd.len() / d {
        let xr = &xd[r * d..(r + 1) * d];
        let dor = &dod[r * d..(r + 1) * d];
        let (mu, inv) = row_moments(xr, eps);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..d {
            let xhat = (xr[i] - mu) * inv;
            let dxhat = dor[i] * g[i];
            dgd[i] += dor[i] * xhat;
            dbd[i] += dor[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        for i in 0..d {
            let xhat = (xr[i] - mu) * inv;
            let dxhat = dor[i] * g[i];
            dxd[r * d + i] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

pub(super) fn pool2d_out_dim(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> Result<(usize, usize)> {
    if k > h || k > w || (h - k) % stride != 0 || (w - k) % stride != 0 {
        return Err(TensorError::WindowExceedsInput { k, stride, h, w });
    }
    Ok(((h - k) / stride + 1, (w - k) / stride + 1))
}

/// Windowed reduction per channel. For max pooling the flat input index of
/// each window's maximum is returned for the backward pass; ties break on
/// the first index in row-major order.
pub(super) fn pool2d<T: Scalar>(
    x: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    let (c, h, w) = dims3(x)?;
    let (oh, ow) = pool2d_out_dim(h, w, k, stride)?;
    let xd = x.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = if kind == PoolKind::Max {
        Some(vec![0usize; c * oh * ow])
    } else {
        None
    };
    let inv_area = T::one() / T::from_f64((k * k) as f64);
    let od = out.data_mut();
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let oi = (ci * oh + oy) * ow + ox;
                match kind {
                    PoolKind::Max => {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0usize;
                        for ky in 0..k {
                            for kx in 0..k {
                                let xi = (ci * h + oy * stride + ky) * w + ox * stride + kx;
                                if xd[xi] > best {
                                    best = xd[xi];
                                    best_i = xi;
                                }
                            }
                        }
                        od[oi] = best;
                        argmax.as_mut().unwrap()[oi] = best_i;
                    }
                    PoolKind::Avg => {
                        let mut acc = T::zero();
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += xd[(ci * h + oy * stride + ky) * w + ox * stride + kx];
                            }
                        }
                        od[oi] = acc * inv_area;
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

pub(super) fn pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    kind: PoolKind,
    k: usize,
    stride: usize,
    argmax: Option<&[usize]>,
    dout: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let (c, oh, ow) = (dout.shape()[0], dout.shape()[1], dout.shape()[2]);
    let (h, w) = (input_shape[1], input_shape[2]);
    let dod = dout.data();
    let dxd = dx.data_mut();
    match kind {
        PoolKind::Max => {
            let arg = argmax.expect("max pool saves argmax");
            for (oi, &xi) in arg.iter().enumerate() {
                dxd[xi] += dod[oi];
            }
        }
        PoolKind::Avg => {
            let inv_area = T::one() / T::from_f64((k * k) as f64);
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dod[(ci * oh + oy) * ow + ox] * inv_area;
                        for ky in 0..k {
                            for kx in 0..k {
                                dxd[(ci * h + oy * stride + ky) * w + ox * stride + kx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

pub(super) fn activation<T: Scalar>(x: &Tensor<T>, f: Activation) -> Tensor<T> {
    x.map(|v| activation_value(v, f))
}

pub(super) fn activation_value<T: Scalar>(v: T, f: Activation) -> T {
    match f {
        Activation::Relu => {
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        }
        Activation::Gelu => {
            // tanh-form GELU
            let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
            let a = T::from_f64(0.044715);
            let u = c * (v + a * v * v * v);
            T::from_f64(0.5) * v * (T::one() + u.tanh())
        }
        Activation::Sigmoid => sigmoid_value(v),
    }
}

pub(super) fn sigmoid_value<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(super) fn activation_derivative<T: Scalar>(v: T, f: Activation) -> T {
    match f {
        Activation::Relu => {
            if v > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Gelu => {
            let c = T::from_f64(0.7978845608028654);
            let a = T::from_f64(0.044715);
            let half = T::from_f64(0.5);
            let u = c * (v + a * v * v * v);
            let t = u.tanh();
            let du = c * (T::one() + T::from_f64(3.0) * a * v * v);
            half * (T::one() + t) + half * v * (T::one() - t * t) * du
        }
        Activation::Sigmoid => {
            let s = sigmoid_value(v);
            s * (T::one() - s)
        }
    }
}

/// Rearrange a C×H×W image into non-overlapping p×p patches:
/// rows are patches in row-major grid order, columns are (channel, py, px).
pub(super) fn im2patches<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(x)?;
    if h % p != 0 || w % p != 0 {
        return Err(TensorError::PatchIndivisible { h, w, patch: p });
    }
    let (gh, gw) = (h / p, w / p);
    let xd = x.data();
    let mut out = Tensor::zeros(&[gh * gw, c * p * p]);
    let od = out.data_mut();
    let cols = c * p * p;
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for ci in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        od[row * cols + (ci * p + py) * p + px] =
                            xd[(ci * h + gy * p + py) * w + gx * p + px];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(super) fn im2patches_backward<T: Scalar>(
    input_shape: &[usize],
    p: usize,
    dout: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (gh, gw) = (h / p, w / p);
    let mut dx = Tensor::zeros(input_shape);
    let dod = dout.data();
    let dxd = dx.data_mut();
    let cols = c * p * p;
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for ci in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        dxd[(ci * h + gy * p + py) * w + gx * p + px] =
                            dod[row * cols + (ci * p + py) * p + px];
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x spatial upsampling of a C×H×W map.
pub(super) fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(x)?;
    let xd = x.data();
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    let od = out.data_mut();
    for ci in 0..c {
        for y in 0..2 * h {
            for x2 in 0..2 * w {
                od[(ci * 2 * h + y) * 2 * w + x2] = xd[(ci * h + y / 2) * w + x2 / 2];
            }
        }
    }
    Ok(out)
}

pub(super) fn upsample2x_backward<T: Scalar>(input_shape: &[usize], dout: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let mut dx = Tensor::zeros(input_shape);
    let dod = dout.data();
    let dxd = dx.data_mut();
    for ci in 0..c {
        for y in 0..2 * h {
            for x2 in 0..2 * w {
                dxd[(ci * h + y / 2) * w + x2 / 2] += dod[(ci * 2 * h + y) * 2 * w + x2];
            }
        }
    }
    dx
}

/// One bilinear sample per output cell, taken at the cell centre of a box
/// given in feature-map coordinates. Samples are clamped to the border.
pub(super) fn roi_bilinear<T: Scalar>(
    feat: &Tensor<T>,
    bx: [f64; 4],
    out_size: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(feat)?;
    let [x1, y1, x2, y2] = bx;
    if !(x2 > x1 && y2 > y1) || !bx.iter().all(|v| v.is_finite()) {
        return Err(TensorError::Contract(format!(
            "degenerate roi box [{x1}, {y1}, {x2}, {y2}]"
        )));
    }
    let fd = feat.data();
    let mut out = Tensor::zeros(&[c, out_size, out_size]);
    let od = out.data_mut();
    for i in 0..out_size {
        for j in 0..out_size {
            let (y, x, iy, ix, fy, fx) = roi_sample_point(bx, out_size, i, j, h, w);
            let _ = (y, x);
            for ci in 0..c {
                let base = ci * h * w;
                let v00 = fd[base + iy * w + ix];
                let v01 = fd[base + iy * w + (ix + 1).min(w - 1)];
                let v10 = fd[base + (iy + 1).min(h - 1) * w + ix];
                let v11 = fd[base + (iy + 1).min(h - 1) * w + (ix + 1).min(w - 1)];
                let fyt = T::from_f64(fy);
                let fxt = T::from_f64(fx);
                let one = T::one();
                od[(ci * out_size + i) * out_size + j] = v00 * (one - fyt) * (one - fxt)
                    + v01 * (one - fyt) * fxt
                    + v10 * fyt * (one - fxt)
                    + v11 * fyt * fxt;
            }
        }
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
fn roi_sample_point(
    bx: [f64; 4],
    out_size: usize,
    i: usize,
    j: usize,
    h: usize,
    w: usize,
) -> (f64, f64, usize, usize, f64, f64) {
    let [x1, y1, x2, y2] = bx;
    let y = y1 + (i as f64 + 0.5) * (y2 - y1) / out_size as f64 - 0.5;
    let x = x1 + (j as f64 + 0.5) * (x2 - x1) / out_size as f64 - 0.5;
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let iy = yc.floor() as usize;
    let ix = xc.floor() as usize;
    (y, x, iy.min(h - 1), ix.min(w - 1), yc - iy as f64, xc - ix as f64)
}

pub(super) fn roi_bilinear_backward<T: Scalar>(
    input_shape: &[usize],
    bx: [f64; 4],
    out_size: usize,
    dout: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let mut dx = Tensor::zeros(input_shape);
    let dod = dout.data();
    let dxd = dx.data_mut();
    for i in 0..out_size {
        for j in 0..out_size {
            let (_, _, iy, ix, fy, fx) = roi_sample_point(bx, out_size, i, j, h, w);
            let iy1 = (iy + 1).min(h - 1);
            let ix1 = (ix + 1).min(w - 1);
            for ci in 0..c {
                let g = dod[(ci * out_size + i) * out_size + j];
                let base = ci * h * w;
                let fyt = T::from_f64(fy);
                let fxt = T::from_f64(fx);
                let one = T::one();
                dxd[base + iy * w + ix] += g * (one - fyt) * (one - fxt);
                dxd[base + iy * w + ix1] += g * (one - fyt) * fxt;
                dxd[base + iy1 * w + ix] += g * fyt * (one - fxt);
                dxd[base + iy1 * w + ix1] += g * fyt * fxt;
            }
        }
    }
    dx
}

pub(super) fn add_row_bias<T: Scalar>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, n) = dims2(a)?;
    if bias.shape() != [n] {
        return Err(TensorError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let b = bias.data();
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        for i in 0..n {
            row[i] += b[i];
        }
    }
    Ok(out)
}

pub(super) fn column_sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let n = a.shape()[1];
    let mut out = Tensor::zeros(&[n]);
    let od = out.data_mut();
    for row in a.data().chunks(n) {
        for i in 0..n {
            od[i] += row[i];
        }
    }
    out
}

pub(super) fn slice_cols<T: Scalar>(
    a: &Tensor<T>,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let (m, n) = dims2(a)?;
    if start + len > n {
        return Err(TensorError::SliceOutOfBounds {
            start,
            len,
            cols: n,
        });
    }
    let ad = a.data();
    let mut out = Tensor::zeros(&[m, len]);
    let od = out.data_mut();
    for i in 0..m {
        od[i * len..(i + 1) * len].copy_from_slice(&ad[i * n + start..i * n + start + len]);
    }
    Ok(out)
}

pub(super) fn slice_cols_backward<T: Scalar>(
    rows: usize,
    cols: usize,
    start: usize,
    dout: &Tensor<T>,
) -> Tensor<T> {
    let len = dout.shape()[1];
    let mut dx = Tensor::zeros(&[rows, cols]);
    let dod = dout.data();
    let dxd = dx.data_mut();
    for i in 0..rows {
        dxd[i * cols + start..i * cols + start + len]
            .copy_from_slice(&dod[i * len..(i + 1) * len]);
    }
    dx
}

pub(super) fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (m, _) = dims2(parts[0])?;
    let mut total = 0usize;
    for p in parts {
        let (pm, pn) = dims2(p)?;
        if pm != m {
            return Err(TensorError::ShapeMismatch {
                left: parts[0].shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        total += pn;
    }
    let mut out = Tensor::zeros(&[m, total]);
    let od = out.data_mut();
    for i in 0..m {
        let mut off = 0usize;
        for p in parts {
            let pn = p.shape()[1];
            od[i * total + off..i * total + off + pn]
                .copy_from_slice(&p.data()[i * pn..(i + 1) * pn]);
            off += pn;
        }
    }
    Ok(out)
}

pub(super) fn gather_rows<T: Scalar>(a: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let (m, n) = dims2(a)?;
    for &i in idx {
        if i >= m {
            return Err(TensorError::RowOutOfBounds { index: i, rows: m });
        }
    }
    let ad = a.data();
    let mut out = Tensor::zeros(&[idx.len(), n]);
    let od = out.data_mut();
    for (r, &i) in idx.iter().enumerate() {
        od[r * n..(r + 1) * n].copy_from_slice(&ad[i * n..(i + 1) * n]);
    }
    Ok(out)
}

pub(super) fn gather_rows_backward<T: Scalar>(
    rows: usize,
    idx: &[usize],
    dout: &Tensor<T>,
) -> Tensor<T> {
    let n = dout.shape()[1];
    let mut dx = Tensor::zeros(&[rows, n]);
    let dod = dout.data();
    let dxd = dx.data_mut();
    for (r, &i) in idx.iter().enumerate() {
        for c in 0..n {
            dxd[i * n + c] += dod[r * n + c];
        }
    }
    dx
}

/// out[i] = base[i] + table[idx[i]], the lookup pattern behind relative
/// position bias.
pub(super) fn add_gathered<T: Scalar>(
    base: &Tensor<T>,
    table: &Tensor<T>,
    idx: &[usize],
) -> Result<Tensor<T>> {
    if idx.len() != base.numel() {
        return Err(TensorError::Contract(format!(
            "gather index count {} does not match base element count {}",
            idx.len(),
            base.numel()
        )));
    }
    let td = table.data();
    for &i in idx {
        if i >= td.len() {
            return Err(TensorError::RowOutOfBounds {
                index: i,
                rows: td.len(),
            });
        }
    }
    let mut out = base.clone();
    for (v, &i) in out.data_mut().iter_mut().zip(idx.iter()) {
        *v += td[i];
    }
    Ok(out)
}

pub(super) fn add_gathered_backward_table<T: Scalar>(
    table_len: usize,
    idx: &[usize],
    dout: &Tensor<T>,
) -> Tensor<T> {
    let mut dt = Tensor::zeros(&[table_len]);
    let dtd = dt.data_mut();
    for (&i, &g) in idx.iter().zip(dout.data().iter()) {
        dtd[i] += g;
    }
    dt
}

/// Mean cross-entropy of logit rows against integer labels.
pub(super) fn cross_entropy_mean<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (m, k) = dims2(logits)?;
    if labels.len() != m {
        return Err(TensorError::Contract(format!(
            "{} labels for {} logit rows",
            labels.len(),
            m
        )));
    }
    let ld = logits.data();
    let mut total = T::zero();
    for (r, &lab) in labels.iter().enumerate() {
        if lab >= k {
            return Err(TensorError::RowOutOfBounds { index: lab, rows: k });
        }
        let row = &ld[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += lse - row[lab];
    }
    Ok(total / T::from_f64(m as f64))
}

pub(super) fn cross_entropy_backward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Tensor<T> {
    let (m, k) = (logits.shape()[0], logits.shape()[1]);
    let mut dx = softmax_last(logits).expect("logits already validated");
    let scale = upstream / T::from_f64(m as f64);
    let dxd = dx.data_mut();
    for (r, &lab) in labels.iter().enumerate() {
        dxd[r * k + lab] -= T::one();
        for v in dxd[r * k..(r + 1) * k].iter_mut() {
            *v *= scale;
        }
    }
    dx
}

/// Mean binary cross-entropy over logits, computed in the stable
/// max(x,0) - x*t + ln(1 + exp(-|x|)) form.
pub(super) fn bce_with_logits_mean<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<T> {
    if logits.shape() != targets.shape() {
        return Err(TensorError::ShapeMismatch {
            left: logits.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let mut total = T::zero();
    for (&x, &t) in logits.data().iter().zip(targets.data().iter()) {
        let pos = if x > T::zero() { x } else { T::zero() };
        total += pos - x * t + (T::one() + (-x.abs()).exp()).ln();
    }
    Ok(total / T::from_f64(logits.numel() as f64))
}

pub(super) fn bce_with_logits_backward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    upstream: T,
) -> Tensor<T> {
    let scale = upstream / T::from_f64(logits.numel() as f64);
    let mut dx = Tensor::zeros(logits.shape());
    for ((d, &x), &t) in dx
        .data_mut()
        .iter_mut()
        .zip(logits.data().iter())
        .zip(targets.data().iter())
    {
        *d = (sigmoid_value(x) - t) * scale;
    }
    dx
}

/// Mean smooth-L1 (Huber) distance between predictions and a constant target.
pub(super) fn smooth_l1_mean<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    beta: T,
) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let half = T::from_f64(0.5);
    let mut total = T::zero();
    for (&p, &t) in pred.data().iter().zip(target.data().iter()) {
        let d = p - t;
        total += if d.abs() < beta {
            half * d * d / beta
        } else {
            d.abs() - half * beta
        };
    }
    Ok(total / T::from_f64(pred.numel() as f64))
}

pub(super) fn smooth_l1_backward<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    beta: T,
    upstream: T,
) -> Tensor<T> {
    let scale = upstream / T::from_f64(pred.numel() as f64);
    let mut dx = Tensor::zeros(pred.shape());
    for ((g, &p), &t) in dx
        .data_mut()
        .iter_mut()
        .zip(pred.data().iter())
        .zip(target.data().iter())
    {
        let d = p - t;
        *g = if d.abs() < beta {
            d / beta
        } else if d > T::zero() {
            T::one()
        } else {
            -T::one()
        } * scale;
    }
    dx
}
