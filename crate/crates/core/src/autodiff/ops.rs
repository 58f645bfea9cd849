//! Forward kernels and their vector-Jacobian products.
//!
//! The forward functions are usable on plain tensors; [`super::Tape`] calls
//! them and records the matching backward rule.

use super::Tensor;
use crate::error::{Error, Result};

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        ref s => Err(Error::shape(format!("{what} must be rank 4, got {s:?}"))),
    }
}

/// Output positions `o` in `0..out` whose input `o * stride + k - pad` lies in `0..len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) fn conv_geom(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (n, c, h, w) = dims4(x, "conv2d input")?;
    let (f, kc, kh, kw) = dims4(k, "conv2d kernel")?;
    if stride == 0 {
        return Err(Error::param("conv2d stride must be >= 1"));
    }
    if kc != c {
        return Err(Error::shape(format!("conv2d kernel expects {kc} channels, input has {c}")));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [f] {
            return Err(Error::shape(format!("conv2d bias must be [{f}], got {:?}", b.shape())));
        }
    }
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
        stride,
        pad,
    })
}

/// Cross-correlation of `x[N,C,H,W]` with `k[F,C,kh,kw]`, zero padding.
pub fn conv2d(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(x, k, bias, stride, pad)?;
    let mut out = vec![0.0; g.n * g.f * g.oh * g.ow];
    let (xd, kd) = (x.data(), k.data());
    for b in 0..g.n {
        for fo in 0..g.f {
            let o = &mut out[(b * g.f + fo) * g.oh * g.ow..][..g.oh * g.ow];
            if let Some(bias) = bias {
                o.fill(bias.data()[fo]);
            }
            for ci in 0..g.c {
                let xin = &xd[(b * g.c + ci) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (y0, y1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let kv = kd[((fo * g.c + ci) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut o[oy * g.ow..][..g.ow];
                            let irow = &xin[iy * g.w..][..g.w];
                            for ox in x0..x1 {
                                orow[ox] += kv * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.f, g.oh, g.ow], out)
}

/// Returns (dx, dk, dbias) for an upstream gradient `gy`; each only when requested.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &ConvGeom,
    gy: &[f64],
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dx = want[0].then(|| vec![0.0; x.len()]);
    let mut dk = want[1].then(|| vec![0.0; k.len()]);
    let mut db = want[2].then(|| vec![0.0; g.f]);
    let (xd, kd) = (x.data(), k.data());
    for b in 0..g.n {
        for fo in 0..g.f {
            let go = &gy[(b * g.f + fo) * g.oh * g.ow..][..g.oh * g.ow];
            if let Some(db) = db.as_mut() {
                db[fo] += go.iter().sum::<f64>();
            }
            for ci in 0..g.c {
                let base = (b * g.c + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    let (y0, y1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let ki = ((fo * g.c + ci) * g.kh + ky) * g.kw + kx;
                        let kv = kd[ki];
                        let (x0, x1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &go[oy * g.ow..][..g.ow];
                            let ioff = base + iy * g.w;
                            if let Some(dx) = dx.as_mut() {
                                for ox in x0..x1 {
                                    dx[ioff + ox * g.stride + kx - g.pad] += kv * grow[ox];
                                }
                            }
                            if dk.is_some() {
                                for ox in x0..x1 {
                                    acc += grow[ox] * xd[ioff + ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk[ki] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// `x[N,D] · w[D,K] + b[K]`.
pub fn dense(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d, k) = dense_dims(x, w, bias)?;
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        let o = &mut out[r * k..][..k];
        if let Some(b) = bias {
            o.copy_from_slice(b.data());
        }
        for j in 0..d {
            let xv = x.data()[r * d + j];
            if xv == 0.0 {
                continue;
            }
            for (ov, wv) in o.iter_mut().zip(&w.data()[j * k..][..k]) {
                *ov += xv * wv;
            }
        }
    }
    Tensor::new(&[n, k], out)
}

pub(crate) fn dense_dims(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let (n, d) = match *x.shape() {
        [n, d] => (n, d),
        ref s => return Err(Error::shape(format!("dense input must be [N, D], got {s:?}"))),
    };
    let k = match *w.shape() {
        [wd, k] if wd == d => k,
        ref s => return Err(Error::shape(format!("dense weight must be [{d}, K], got {s:?}"))),
    };
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::shape(format!("dense bias must be [{k}], got {:?}", b.shape())));
        }
    }
    Ok((n, d, k))
}

pub(crate) fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &[f64],
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    let dx = want[0].then(|| {
        let mut dx = vec![0.0; n * d];
        for r in 0..n {
            let g = &gy[r * k..][..k];
            for j in 0..d {
                dx[r * d + j] = g.iter().zip(&w.data()[j * k..][..k]).map(|(a, b)| a * b).sum();
            }
        }
        dx
    });
    let dw = want[1].then(|| {
        let mut dw = vec![0.0; d * k];
        for r in 0..n {
            let g = &gy[r * k..][..k];
            for j in 0..d {
                let xv = x.data()[r * d + j];
                for (o, gv) in dw[j * k..][..k].iter_mut().zip(g) {
                    *o += xv * gv;
                }
            }
        }
        dw
    });
    let db = want[2].then(|| {
        let mut db = vec![0.0; k];
        for r in 0..n {
            for (o, gv) in db.iter_mut().zip(&gy[r * k..][..k]) {
                *o += gv;
            }
        }
        db
    });
    (dx, dw, db)
}

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped. Also returns the flat input index of each maximum.
pub fn max_pool2d(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = dims4(x, "max_pool2d input")?;
    if size == 0 || h < size || w < size {
        return Err(Error::shape(format!("max_pool2d window {size} does not fit {h}x{w}")));
    }
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                }
                out.push(x.data()[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, idx))
}

pub fn avg_pool2d(x: &Tensor, size: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "avg_pool2d input")?;
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(Error::shape(format!("avg_pool2d window {size} does not tile {h}x{w}")));
    }
    let (oh, ow) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                out[(p * oh + y / size) * ow + xx / size] += x.data()[(p * h + y) * w + xx] * norm;
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub(crate) fn avg_pool2d_backward(shape: &[usize], size: usize, gy: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                dx[(p * h + y) * w + xx] = gy[(p * oh + y / size) * ow + xx / size] * norm;
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample2d(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "upsample2d input")?;
    if factor == 0 {
        return Err(Error::param("upsample factor must be >= 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                out.push(x.data()[(p * h + y / factor) * w + xx / factor]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub(crate) fn upsample2d_backward(shape: &[usize], factor: usize, gy: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                dx[(p * h + y / factor) * w + xx / factor] += gy[(p * oh + y) * ow + xx];
            }
        }
    }
    dx
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(x)`.
pub fn swish(x: &Tensor) -> Tensor {
    map(x, |v| v * sigmoid_scalar(v))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

/// (outer, len, inner) split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(x.shape(), axis)?;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| x.data()[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (x.data()[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[at(k)] /= z;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, axis: usize, gy: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = split_axis(y.shape(), axis).expect("checked in forward");
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| gy[at(k)] * y.data()[at(k)]).sum();
            for k in 0..len {
                dx[at(k)] = y.data()[at(k)] * (gy[at(k)] - dot);
            }
        }
    }
    dx
}

/// Concatenation along `axis`; all other dimensions must agree.
pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let mut shape = first.shape().to_vec();
    split_axis(&shape, axis)?;
    let mut total = 0;
    for t in xs {
        let s = t.shape();
        if s.len() != shape.len() || s.iter().enumerate().any(|(d, &v)| d != axis && v != shape[d]) {
            return Err(Error::shape(format!("concat mismatch: {:?} vs {s:?} on axis {axis}", first.shape())));
        }
        total += s[axis];
    }
    shape[axis] = total;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in xs {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..][..chunk]);
        }
    }
    Tensor::new(&shape, out)
}

pub(crate) fn concat_backward(shapes: &[Vec<usize>], axis: usize, gy: &[f64]) -> Vec<Vec<f64>> {
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let mut parts: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (p, s) in parts.iter_mut().zip(shapes) {
            let chunk = s[axis] * inner;
            p.extend_from_slice(&gy[pos..pos + chunk]);
            pos += chunk;
        }
    }
    parts
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect())
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())
}

pub fn sum(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

pub fn mean(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum::<f64>() / x.len().max(1) as f64)
}

/// Mean of squared differences.
pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mse_loss")?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(Tensor::scalar(s / a.len().max(1) as f64))
}

fn last_dim(x: &Tensor, what: &str) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(Error::shape(format!("{what} needs a non-empty last axis, got {:?}", x.shape()))),
    }
}

/// Capsule nonlinearity over the last axis: `s * |s| / (1 + |s|^2)`, zero at zero.
pub fn squash(x: &Tensor) -> Result<Tensor> {
    let d = last_dim(x, "squash")?;
    let mut out = x.data().to_vec();
    for v in out.chunks_mut(d) {
        let n2: f64 = v.iter().map(|a| a * a).sum();
        let scale = if n2 > 0.0 { n2.sqrt() / (1.0 + n2) } else { 0.0 };
        v.iter_mut().for_each(|a| *a *= scale);
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn squash_backward(x: &Tensor, gy: &[f64]) -> Vec<f64> {
    let d = *x.shape().last().expect("checked in forward");
    let mut dx = vec![0.0; x.len()];
    for ((s, g), o) in x.data().chunks(d).zip(gy.chunks(d)).zip(dx.chunks_mut(d)) {
        let n2: f64 = s.iter().map(|a| a * a).sum();
        if n2 == 0.0 {
            continue;
        }
        let r = n2.sqrt();
        // v = f(r) s with f = r / (1 + r^2); dv/ds = f I + f'(r)/r s s^T.
        let f = r / (1.0 + n2);
        let fp = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
        let sg: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..d {
            o[k] = f * g[k] + fp / r * sg * s[k];
        }
    }
    dx
}

/// Euclidean norm over the last axis, which is removed.
pub fn norm_last(x: &Tensor) -> Result<Tensor> {
    let d = last_dim(x, "norm_last")?;
    let shape = &x.shape()[..x.rank() - 1];
    let out = x.data().chunks(d).map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt()).collect();
    Tensor::new(shape, out)
}

pub(crate) fn norm_last_backward(x: &Tensor, y: &Tensor, gy: &[f64]) -> Vec<f64> {
    let d = *x.shape().last().expect("checked in forward");
    let mut dx = vec![0.0; x.len()];
    for (i, (s, o)) in x.data().chunks(d).zip(dx.chunks_mut(d)).enumerate() {
        let n = y.data()[i];
        if n > 0.0 {
            for k in 0..d {
                o[k] = gy[i] * s[k] / n;
            }
        }
    }
    dx
}

/// Per-pair predictions `u_hat[b,i,j,:] = W[i,j] · u[b,i,:]` for
/// `u[N,m,d1]` and `W[m,n,d2,d1]`, giving `[N,m,n,d2]`.
pub fn capsule_predict(u: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (bn, m, d1) = match *u.shape() {
        [a, b, c] => (a, b, c),
        ref s => return Err(Error::shape(format!("capsule input must be [N, m, d1], got {s:?}"))),
    };
    let (n, d2) = match *w.shape() {
        [wm, n, d2, wd] if wm == m && wd == d1 => (n, d2),
        ref s => {
            return Err(Error::shape(format!(
                "capsule weights must be [{m}, n, d2, {d1}], got {s:?}"
            )))
        }
    };
    let mut out = vec![0.0; bn * m * n * d2];
    for b in 0..bn {
        for i in 0..m {
            let uv = &u.data()[(b * m + i) * d1..][..d1];
            for j in 0..n {
                for k in 0..d2 {
                    let row = &w.data()[((i * n + j) * d2 + k) * d1..][..d1];
                    out[((b * m + i) * n + j) * d2 + k] = row.iter().zip(uv).map(|(a, c)| a * c).sum();
                }
            }
        }
    }
    Tensor::new(&[bn, m, n, d2], out)
}

pub(crate) fn capsule_predict_backward(
    u: &Tensor,
    w: &Tensor,
    gy: &[f64],
    want: [bool; 2],
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (bn, m, d1) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let (n, d2) = (w.shape()[1], w.shape()[2]);
    let mut du = want[0].then(|| vec![0.0; u.len()]);
    let mut dw = want[1].then(|| vec![0.0; w.len()]);
    for b in 0..bn {
        for i in 0..m {
            let uoff = (b * m + i) * d1;
            for j in 0..n {
                for k in 0..d2 {
                    let g = gy[((b * m + i) * n + j) * d2 + k];
                    let woff = ((i * n + j) * d2 + k) * d1;
                    if let Some(du) = du.as_mut() {
                        for l in 0..d1 {
                            du[uoff + l] += g * w.data()[woff + l];
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        for l in 0..d1 {
                            dw[woff + l] += g * u.data()[uoff + l];
                        }
                    }
                }
            }
        }
    }
    (du, dw)
}

fn route_dims(c: &Tensor, uhat: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match (c.shape(), uhat.shape()) {
        ([a, b, cc], [ua, ub, uc, d]) if a == ua && b == ub && cc == uc => Ok((*a, *b, *cc, *d)),
        (cs, us) => Err(Error::shape(format!("routing shapes {cs:?} and {us:?} disagree"))),
    }
}

/// `s[b,j,:] = Σ_i c[b,i,j] · u_hat[b,i,j,:]`.
pub fn route_sum(c: &Tensor, uhat: &Tensor) -> Result<Tensor> {
    let (bn, m, n, d) = route_dims(c, uhat)?;
    let mut out = vec![0.0; bn * n * d];
    for b in 0..bn {
        for i in 0..m {
            for j in 0..n {
                let cv = c.data()[(b * m + i) * n + j];
                let u = &uhat.data()[((b * m + i) * n + j) * d..][..d];
                for (o, uv) in out[(b * n + j) * d..][..d].iter_mut().zip(u) {
                    *o += cv * uv;
                }
            }
        }
    }
    Tensor::new(&[bn, n, d], out)
}

pub(crate) fn route_sum_backward(
    c: &Tensor,
    uhat: &Tensor,
    gy: &[f64],
    want: [bool; 2],
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (bn, m, n) = (c.shape()[0], c.shape()[1], c.shape()[2]);
    let d = uhat.shape()[3];
    let mut dc = want[0].then(|| vec![0.0; c.len()]);
    let mut du = want[1].then(|| vec![0.0; uhat.len()]);
    for b in 0..bn {
        for i in 0..m {
            for j in 0..n {
                let ci = (b * m + i) * n + j;
                let g = &gy[(b * n + j) * d..][..d];
                let uo = ci * d;
                if let Some(dc) = dc.as_mut() {
                    dc[ci] = g.iter().zip(&uhat.data()[uo..uo + d]).map(|(a, e)| a * e).sum();
                }
                if let Some(du) = du.as_mut() {
                    for k in 0..d {
                        du[uo + k] += c.data()[ci] * g[k];
                    }
                }
            }
        }
    }
    (dc, du)
}

/// `a[b,i,j] = u_hat[b,i,j,:] · v[b,j,:]`.
pub fn agreement(uhat: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (bn, m, n, d) = match (uhat.shape(), v.shape()) {
        ([a, b, c, d], [va, vb, vc]) if a == va && c == vb && d == vc => (*a, *b, *c, *d),
        (us, vs) => return Err(Error::shape(format!("agreement shapes {us:?} and {vs:?} disagree"))),
    };
    let mut out = vec![0.0; bn * m * n];
    for b in 0..bn {
        for i in 0..m {
            for j in 0..n {
                let u = &uhat.data()[((b * m + i) * n + j) * d..][..d];
                let vv = &v.data()[(b * n + j) * d..][..d];
                out[(b * m + i) * n + j] = u.iter().zip(vv).map(|(a, e)| a * e).sum();
            }
        }
    }
    Tensor::new(&[bn, m, n], out)
}

pub(crate) fn agreement_backward(
    uhat: &Tensor,
    v: &Tensor,
    gy: &[f64],
    want: [bool; 2],
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (bn, m, n, d) = (uhat.shape()[0], uhat.shape()[1], uhat.shape()[2], uhat.shape()[3]);
    let mut du = want[0].then(|| vec![0.0; uhat.len()]);
    let mut dv = want[1].then(|| vec![0.0; v.len()]);
    for b in 0..bn {
        for i in 0..m {
            for j in 0..n {
                let g = gy[(b * m + i) * n + j];
                let uo = ((b * m + i) * n + j) * d;
                let vo = (b * n + j) * d;
                for k in 0..d {
                    if let Some(du) = du.as_mut() {
                        du[uo + k] += g * v.data()[vo + k];
                    }
                    if let Some(dv) = dv.as_mut() {
                        dv[vo + k] += g * uhat.data()[uo + k];
                    }
                }
            }
        }
    }
    (du, dv)
}

/// Picks capsule `idx[b]` of `v[N,n,d]` for every row, giving `[N,d]`.
pub fn select_capsule(v: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (bn, n, d) = match *v.shape() {
        [a, b, c] => (a, b, c),
        ref s => return Err(Error::shape(format!("select_capsule needs [N, n, d], got {s:?}"))),
    };
    if idx.len() != bn || idx.iter().any(|&j| j >= n) {
        return Err(Error::shape(format!("capsule indices {idx:?} invalid for {:?}", v.shape())));
    }
    let mut out = Vec::with_capacity(bn * d);
    for (b, &j) in idx.iter().enumerate() {
        out.extend_from_slice(&v.data()[(b * n + j) * d..][..d]);
    }
    Tensor::new(&[bn, d], out)
}
