//! Forward kernels shared by the eager API and the recording graph.

use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor used by [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_raw(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    out
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", x.shape(), &[axis]));
    }
    if x.shape()[axis] == 0 {
        return Err(Error::EmptyAxis("softmax"));
    }
    Tensor::new(x.shape().to_vec(), softmax_raw(x.data(), x.shape(), axis))
}

/// Batch, input channels and length of a conv input of rank 2 or 3.
fn conv_dims(x: &Tensor) -> Option<(usize, usize, usize)> {
    match x.shape() {
        [c, n] => Some((1, *c, *n)),
        [b, c, n] => Some((*b, *c, *n)),
        _ => None,
    }
}

/// Valid, stride-1 cross-correlation along the last (time) axis.
///
/// `x` is `d_in × n` or `batch × d_in × n`, `kernels` is `d_out × d_in × k`
/// and `bias` has length `d_out`. The output keeps the batch axis if present.
pub fn conv1d(x: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, d_in, n) = conv_dims(x).ok_or_else(|| Error::shape("conv1d", x.shape(), kernels.shape()))?;
    let &[d_out, kd_in, k] = kernels.shape() else {
        return Err(Error::shape("conv1d", x.shape(), kernels.shape()));
    };
    if kd_in != d_in || bias.shape() != [d_out] {
        return Err(Error::shape("conv1d", x.shape(), kernels.shape()));
    }
    if k == 0 || n < k {
        return Err(Error::WindowTooShort { len: n, kernel: k });
    }
    let w_out = n - k + 1;
    let (xd, kd, bd) = (x.data(), kernels.data(), bias.data());
    let mut out = vec![0.0; batch * d_out * w_out];
    for bi in 0..batch {
        let xb = &xd[bi * d_in * n..(bi + 1) * d_in * n];
        for o in 0..d_out {
            let dst = &mut out[(bi * d_out + o) * w_out..(bi * d_out + o + 1) * w_out];
            dst.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..d_in {
                let xrow = &xb[c * n..(c + 1) * n];
                for s in 0..k {
                    let wv = kd[(o * d_in + c) * k + s];
                    for (t, d) in dst.iter_mut().enumerate() {
                        *d += wv * xrow[t + s];
                    }
                }
            }
        }
    }
    let shape = if x.rank() == 2 {
        vec![d_out, w_out]
    } else {
        vec![batch, d_out, w_out]
    };
    Tensor::new(shape, out)
}

/// Row-wise maximum over the last axis, with the first argmax of each row.
pub(crate) fn maxpool_raw(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() < 2 {
        return Err(Error::shape("maxpool_time", x.shape(), &[]));
    }
    let width = x.cols();
    if width == 0 {
        return Err(Error::EmptyAxis("maxpool_time"));
    }
    let rows = x.numel() / width;
    let mut values = Vec::with_capacity(rows);
    let mut argmax = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * width..(r + 1) * width];
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        values.push(row[best]);
        argmax.push(r * width + best);
    }
    let shape = x.shape()[..x.rank() - 1].to_vec();
    Ok((Tensor::new(shape, values)?, argmax))
}

/// Maximum over the time (last) axis: `d × w → d`, or `b × d × w → b × d`.
pub fn maxpool_time(x: &Tensor) -> Result<Tensor> {
    maxpool_raw(x).map(|(t, _)| t)
}

pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_raw(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if x.rank() == 0 || d < 2 || gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let rows = x.numel() / d;
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let src = &x.data()[r * d..(r + 1) * d];
        let mean = src.iter().sum::<f64>() / d as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd.push(inv);
        for j in 0..d {
            let h = (src[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, LayerNormCache { xhat, rstd }))
}

/// Normalizes each position over the last axis, then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    layer_norm_raw(x, gain, bias, LAYER_NORM_EPS).map(|(t, _)| t)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
