//! Forward and backward kernels for every differentiable primitive. Generic
//! over the float type so the gradient suite can probe them at 64 bits.

use num_traits::Float;

use super::tensor::Tensor;
use crate::error::{Error, Result};

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(msg()))
    }
}

pub fn out_extent(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Valid output index range for one kernel tap along an axis (pad 1).
#[inline]
fn tap_range(k: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    // ix = o*stride + k - 1 <= len - 1
    let hi = ((len + 1 - k - 1) / stride + 1).min(out_len);
    (lo, hi)
}

fn plane_conv<T: Float>(
    x: &[T],
    (h, w): (usize, usize),
    k: &[T],
    stride: usize,
    out: &mut [T],
    (oh, ow): (usize, usize),
) {
    for ky in 0..3 {
        let (y0, y1) = tap_range(ky, stride, h, oh);
        for kx in 0..3 {
            let wv = k[ky * 3 + kx];
            if wv == T::zero() {
                continue;
            }
            let (x0, x1) = tap_range(kx, stride, w, ow);
            for oy in y0..y1 {
                let iy = oy * stride + ky - 1;
                let xrow = &x[iy * w..(iy + 1) * w];
                let orow = &mut out[oy * ow..(oy + 1) * ow];
                for ox in x0..x1 {
                    orow[ox] = orow[ox] + wv * xrow[ox * stride + kx - 1];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn plane_conv_back<T: Float>(
    x: &[T],
    (h, w): (usize, usize),
    k: &[T],
    stride: usize,
    dy: &[T],
    (oh, ow): (usize, usize),
    dx: &mut [T],
    dk: &mut [T],
) {
    for ky in 0..3 {
        let (y0, y1) = tap_range(ky, stride, h, oh);
        for kx in 0..3 {
            let wv = k[ky * 3 + kx];
            let (x0, x1) = tap_range(kx, stride, w, ow);
            let mut acc = T::zero();
            for oy in y0..y1 {
                let iy = oy * stride + ky - 1;
                let drow = &dy[oy * ow..(oy + 1) * ow];
                for ox in x0..x1 {
                    let ix = iy * w + ox * stride + kx - 1;
                    acc = acc + x[ix] * drow[ox];
                    dx[ix] = dx[ix] + wv * drow[ox];
                }
            }
            dk[ky * 3 + kx] = dk[ky * 3 + kx] + acc;
        }
    }
}

/// Dense 3x3 convolution, zero padding 1. Weights are `[cout, cin, 3, 3]`.
pub fn conv3x3<T: Float>(x: &Tensor<T>, weight: &[T], cout: usize, stride: usize) -> Result<Tensor<T>> {
    ensure(weight.len() == cout * x.c * 9, || {
        format!("conv3x3 weight has {} values, expected {}", weight.len(), cout * x.c * 9)
    })?;
    let (oh, ow) = (out_extent(x.h, stride), out_extent(x.w, stride));
    let mut y = Tensor::zeros(x.n, cout, oh, ow);
    for n in 0..x.n {
        for o in 0..cout {
            let mut out = vec![T::zero(); oh * ow];
            for i in 0..x.c {
                let k = &weight[(o * x.c + i) * 9..(o * x.c + i + 1) * 9];
                plane_conv(x.plane(n, i), (x.h, x.w), k, stride, &mut out, (oh, ow));
            }
            y.plane_mut(n, o).copy_from_slice(&out);
        }
    }
    Ok(y)
}

pub fn conv3x3_backward<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    stride: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>) {
    let cout = dy.c;
    let mut dx = Tensor::zeros_like(x);
    let mut dw = vec![T::zero(); weight.len()];
    for n in 0..x.n {
        for o in 0..cout {
            for i in 0..x.c {
                let r = (o * x.c + i) * 9..(o * x.c + i + 1) * 9;
                let off = dx.offset(n, i);
                let len = dx.plane_len();
                plane_conv_back(
                    x.plane(n, i),
                    (x.h, x.w),
                    &weight[r.clone()],
                    stride,
                    dy.plane(n, o),
                    (dy.h, dy.w),
                    &mut dx.data[off..off + len],
                    &mut dw[r],
                );
            }
        }
    }
    (dx, dw)
}

/// Per-channel 3x3 convolution, zero padding 1. Weights are `[c, 1, 3, 3]`.
pub fn depthwise3x3<T: Float>(x: &Tensor<T>, weight: &[T], stride: usize) -> Result<Tensor<T>> {
    ensure(weight.len() == x.c * 9, || {
        format!("depthwise weight has {} values for {} channels", weight.len(), x.c)
    })?;
    ensure(stride == 1 || stride == 2, || format!("unsupported stride {stride}"))?;
    let (oh, ow) = (out_extent(x.h, stride), out_extent(x.w, stride));
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for n in 0..x.n {
        for c in 0..x.c {
            let off = y.offset(n, c);
            plane_conv(
                x.plane(n, c),
                (x.h, x.w),
                &weight[c * 9..c * 9 + 9],
                stride,
                &mut y.data[off..off + oh * ow],
                (oh, ow),
            );
        }
    }
    Ok(y)
}

pub fn depthwise3x3_backward<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    stride: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>) {
    let mut dx = Tensor::zeros_like(x);
    let mut dw = vec![T::zero(); weight.len()];
    for n in 0..x.n {
        for c in 0..x.c {
            let off = dx.offset(n, c);
            let len = dx.plane_len();
            plane_conv_back(
                x.plane(n, c),
                (x.h, x.w),
                &weight[c * 9..c * 9 + 9],
                stride,
                dy.plane(n, c),
                (dy.h, dy.w),
                &mut dx.data[off..off + len],
                &mut dw[c * 9..c * 9 + 9],
            );
        }
    }
    (dx, dw)
}

/// Grouped 1x1 convolution. Weights are `[cout, cin / groups]`.
pub fn pointwise<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    ensure(groups > 0 && x.c % groups == 0 && cout % groups == 0, || {
        format!("groups {groups} must divide {} inputs and {cout} outputs", x.c)
    })?;
    let gin = x.c / groups;
    let gout = cout / groups;
    ensure(weight.len() == cout * gin, || {
        format!("pointwise weight has {} values, expected {}", weight.len(), cout * gin)
    })?;
    if let Some(b) = bias {
        ensure(b.len() == cout, || format!("bias has {} values for {cout} outputs", b.len()))?;
    }
    let mut y = Tensor::zeros(x.n, cout, x.h, x.w);
    let hw = x.plane_len();
    for n in 0..x.n {
        for o in 0..cout {
            let g = o / gout;
            let off = y.offset(n, o);
            let out = &mut y.data[off..off + hw];
            if let Some(b) = bias {
                out.fill(b[o]);
            }
            for j in 0..gin {
                let wv = weight[o * gin + j];
                if wv == T::zero() {
                    continue;
                }
                let xp = x.plane(n, g * gin + j);
                for (a, &v) in out.iter_mut().zip(xp) {
                    *a = *a + wv * v;
                }
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dweight, dbias)`.
pub fn pointwise_backward<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    groups: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let cout = dy.c;
    let gin = x.c / groups;
    let gout = cout / groups;
    let hw = x.plane_len();
    let mut dx = Tensor::zeros_like(x);
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); cout];
    for n in 0..x.n {
        for o in 0..cout {
            let g = o / gout;
            let d = dy.plane(n, o);
            db[o] = d.iter().fold(db[o], |a, &v| a + v);
            for j in 0..gin {
                let i = g * gin + j;
                let wv = weight[o * gin + j];
                let xp = x.plane(n, i);
                let mut acc = T::zero();
                for (&a, &b) in xp.iter().zip(d) {
                    acc = acc + a * b;
                }
                dw[o * gin + j] = dw[o * gin + j] + acc;
                let off = dx.offset(n, i);
                for (t, &v) in dx.data[off..off + hw].iter_mut().zip(d) {
                    *t = *t + wv * v;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Saved state of a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Normalize with batch statistics (biased variance).
pub fn batch_norm_train<T: Float>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor<T>, BnCache<T>) {
    let m = T::from(x.n * x.plane_len()).unwrap();
    let mut y = Tensor::zeros_like(x);
    let mut cache = BnCache {
        xhat: vec![T::zero(); x.numel()],
        inv_std: vec![T::zero(); x.c],
        mean: vec![T::zero(); x.c],
        var: vec![T::zero(); x.c],
    };
    for c in 0..x.c {
        let mut sum = T::zero();
        for n in 0..x.n {
            sum = x.plane(n, c).iter().fold(sum, |a, &v| a + v);
        }
        let mean = sum / m;
        let mut sq = T::zero();
        for n in 0..x.n {
            sq = x.plane(n, c).iter().fold(sq, |a, &v| a + (v - mean) * (v - mean));
        }
        let var = sq / m;
        let inv = T::one() / (var + eps).sqrt();
        cache.mean[c] = mean;
        cache.var[c] = var;
        cache.inv_std[c] = inv;
        for n in 0..x.n {
            let off = x.offset(n, c);
            for k in off..off + x.plane_len() {
                let xh = (x.data[k] - mean) * inv;
                cache.xhat[k] = xh;
                y.data[k] = gamma[c] * xh + beta[c];
            }
        }
    }
    (y, cache)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Float>(
    dy: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let m = T::from(dy.n * dy.plane_len()).unwrap();
    let mut dx = Tensor::zeros_like(dy);
    let mut dgamma = vec![T::zero(); dy.c];
    let mut dbeta = vec![T::zero(); dy.c];
    for c in 0..dy.c {
        let (mut sd, mut sdx) = (T::zero(), T::zero());
        for n in 0..dy.n {
            let off = dy.offset(n, c);
            for k in off..off + dy.plane_len() {
                sd = sd + dy.data[k];
                sdx = sdx + dy.data[k] * cache.xhat[k];
            }
        }
        dgamma[c] = sdx;
        dbeta[c] = sd;
        let scale = gamma[c] * cache.inv_std[c] / m;
        for n in 0..dy.n {
            let off = dy.offset(n, c);
            for k in off..off + dy.plane_len() {
                dx.data[k] = scale * (m * dy.data[k] - sd - cache.xhat[k] * sdx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Normalize with fixed statistics.
pub fn batch_norm_eval<T: Float>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Tensor<T> {
    let mut y = Tensor::zeros_like(x);
    for c in 0..x.c {
        let inv = T::one() / (var[c] + eps).sqrt();
        let s = gamma[c] * inv;
        let t = beta[c] - s * mean[c];
        for n in 0..x.n {
            let off = x.offset(n, c);
            for k in off..off + x.plane_len() {
                y.data[k] = s * x.data[k] + t;
            }
        }
    }
    y
}

pub fn batch_norm_eval_backward<T: Float>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let mut dx = Tensor::zeros_like(x);
    let mut dgamma = vec![T::zero(); x.c];
    let mut dbeta = vec![T::zero(); x.c];
    for c in 0..x.c {
        let inv = T::one() / (var[c] + eps).sqrt();
        for n in 0..x.n {
            let off = x.offset(n, c);
            for k in off..off + x.plane_len() {
                dgamma[c] = dgamma[c] + dy.data[k] * (x.data[k] - mean[c]) * inv;
                dbeta[c] = dbeta[c] + dy.data[k];
                dx.data[k] = dy.data[k] * gamma[c] * inv;
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = v.max(T::zero());
    }
    y
}

pub fn relu_backward<T: Float>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

pub fn sigmoid<T: Float>(w: T) -> T {
    T::one() / (T::one() + (-w).exp())
}

/// `y = a * x_f + (1 - a) * x_t` with `a = sigmoid(w)` per channel.
pub fn alpha_blend<T: Float>(xf: &Tensor<T>, xt: &Tensor<T>, logits: &[T]) -> Result<Tensor<T>> {
    ensure(xf.same_dims(xt), || {
        format!("blend inputs differ: {:?} vs {:?}", xf.dims(), xt.dims())
    })?;
    ensure(logits.len() == xf.c, || {
        format!("{} alpha logits for {} channels", logits.len(), xf.c)
    })?;
    let mut y = Tensor::zeros_like(xf);
    for c in 0..xf.c {
        let a = sigmoid(logits[c]);
        let b = T::one() - a;
        for n in 0..xf.n {
            let off = xf.offset(n, c);
            for k in off..off + xf.plane_len() {
                y.data[k] = a * xf.data[k] + b * xt.data[k];
            }
        }
    }
    Ok(y)
}

/// Returns `(dx_f, dx_t, dlogits)`.
pub fn alpha_blend_backward<T: Float>(
    xf: &Tensor<T>,
    xt: &Tensor<T>,
    logits: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let mut dxf = Tensor::zeros_like(xf);
    let mut dxt = Tensor::zeros_like(xt);
    let mut dw = vec![T::zero(); xf.c];
    for c in 0..xf.c {
        let a = sigmoid(logits[c]);
        let b = T::one() - a;
        let mut acc = T::zero();
        for n in 0..xf.n {
            let off = xf.offset(n, c);
            for k in off..off + xf.plane_len() {
                let d = dy.data[k];
                dxf.data[k] = a * d;
                dxt.data[k] = b * d;
                acc = acc + (xf.data[k] - xt.data[k]) * d;
            }
        }
        dw[c] = a * b * acc;
    }
    (dxf, dxt, dw)
}

/// Permute channels so output `k * g + j` takes input `j * (C / g) + k`.
pub fn channel_shuffle<T: Float>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    ensure(groups > 0 && x.c % groups == 0, || {
        format!("{} channels not divisible into {groups} groups", x.c)
    })?;
    let per = x.c / groups;
    let mut y = Tensor::zeros_like(x);
    for n in 0..x.n {
        for k in 0..per {
            for j in 0..groups {
                y.plane_mut(n, k * groups + j)
                    .copy_from_slice(x.plane(n, j * per + k));
            }
        }
    }
    Ok(y)
}

/// Inverse permutation of [`channel_shuffle`] (also its backward pass).
pub fn channel_unshuffle<T: Float>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    ensure(groups > 0 && x.c % groups == 0, || {
        format!("{} channels not divisible into {groups} groups", x.c)
    })?;
    let per = x.c / groups;
    let mut y = Tensor::zeros_like(x);
    for n in 0..x.n {
        for k in 0..per {
            for j in 0..groups {
                y.plane_mut(n, j * per + k)
                    .copy_from_slice(x.plane(n, k * groups + j));
            }
        }
    }
    Ok(y)
}

/// Swap the second channel halves: `a' = [a_lo | b_hi]`, `b' = [b_lo | a_hi]`.
/// An involution, so it is its own backward pass.
pub fn cross_core_shuffle<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure(a.same_dims(b), || format!("cross shuffle inputs differ: {:?} vs {:?}", a.dims(), b.dims()))?;
    ensure(a.c % 2 == 0, || format!("cross shuffle needs even channels, got {}", a.c))?;
    let half = a.c / 2;
    let mut a2 = a.clone();
    let mut b2 = b.clone();
    for n in 0..a.n {
        for c in half..a.c {
            a2.plane_mut(n, c).copy_from_slice(b.plane(n, c));
            b2.plane_mut(n, c).copy_from_slice(a.plane(n, c));
        }
    }
    Ok((a2, b2))
}

pub fn split_channels<T: Float>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let mut a = Tensor::zeros(x.n, first, x.h, x.w);
    let mut b = Tensor::zeros(x.n, x.c - first, x.h, x.w);
    for n in 0..x.n {
        for c in 0..x.c {
            if c < first {
                a.plane_mut(n, c).copy_from_slice(x.plane(n, c));
            } else {
                b.plane_mut(n, c - first).copy_from_slice(x.plane(n, c));
            }
        }
    }
    (a, b)
}

pub fn concat_channels<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure(a.n == b.n && a.h == b.h && a.w == b.w, || {
        format!("concat inputs differ: {:?} vs {:?}", a.dims(), b.dims())
    })?;
    let mut y = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for n in 0..a.n {
        for c in 0..a.c {
            y.plane_mut(n, c).copy_from_slice(a.plane(n, c));
        }
        for c in 0..b.c {
            y.plane_mut(n, a.c + c).copy_from_slice(b.plane(n, c));
        }
    }
    Ok(y)
}

/// Per-channel spatial mean, accumulated at 64 bits.
pub fn global_avg_pool<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = Tensor::zeros(x.n, x.c, 1, 1);
    let hw = x.plane_len() as f64;
    for n in 0..x.n {
        for c in 0..x.c {
            let s: f64 = x.plane(n, c).iter().map(|v| v.to_f64().unwrap()).sum();
            y.data[n * x.c + c] = T::from(s / hw).unwrap();
        }
    }
    y
}

pub fn global_avg_pool_backward<T: Float>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros_like(x);
    let hw = T::from(x.plane_len()).unwrap();
    for n in 0..x.n {
        for c in 0..x.c {
            let g = dy.data[n * x.c + c] / hw;
            dx.plane_mut(n, c).fill(g);
        }
    }
    dx
}

/// Mean cross-entropy over the batch. `logits` is `[N, K]` (any trailing
/// 1x1 spatial dims). Returns the loss and `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let k = logits.c * logits.h * logits.w;
    ensure(k >= 2, || format!("need at least 2 classes, got {k}"))?;
    ensure(labels.len() == logits.n, || {
        format!("{} labels for a batch of {}", labels.len(), logits.n)
    })?;
    let nf = T::from(logits.n).unwrap();
    let mut grad = Tensor::zeros_like(logits);
    let mut loss = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let row = &logits.data[i * k..(i + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let denom = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
        let log_denom = denom.ln();
        loss = loss - (row[label] - max - log_denom);
        for j in 0..k {
            let p = (row[j] - max).exp() / denom;
            let onehot = if j == label { T::one() } else { T::zero() };
            grad.data[i * k + j] = (p - onehot) / nf;
        }
    }
    Ok((loss / nf, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(1, c, h, w, data).unwrap()
    }

    #[test]
    fn blend_examples() {
        let xf = t(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let xt = t(2, 1, 2, vec![5.0, 6.0, -1.0, 0.0]);
        let y = alpha_blend(&xf, &xt, &[0.0, 0.0]).unwrap();
        assert_eq!(y.data, vec![3.0, 4.0, 1.0, 2.0]);
        let y = alpha_blend(&xf.cast::<f32>(), &xt.cast::<f32>(), &[-50.0, -50.0]).unwrap();
        for (a, b) in y.data.iter().zip(&xt.data) {
            assert!((*a as f64 - b).abs() <= 1e-6);
        }
        let dy = t(2, 1, 2, vec![0.3, -2.0, 1.0, 7.0]);
        let (_, _, dw) = alpha_blend_backward(&xf, &xf, &[0.4, -1.0], &dy);
        assert_eq!(dw, vec![0.0, 0.0]);
        assert!(alpha_blend(&xf, &t(1, 1, 2, vec![0.0, 0.0]), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn shuffle_examples() {
        let x = t(6, 1, 1, (0..6).map(|v| v as f64).collect());
        let y = channel_shuffle(&x, 2).unwrap();
        assert_eq!(y.data, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let x4 = t(4, 1, 1, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(channel_shuffle(&x4, 2).unwrap().data, vec![0.0, 2.0, 1.0, 3.0]);
        assert_eq!(channel_unshuffle(&y, 2).unwrap(), x);
        assert!(channel_shuffle(&t(3, 1, 1, vec![0.0; 3]), 2).is_err());
    }

    #[test]
    fn cross_shuffle_examples() {
        let a = t(4, 1, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let b = t(4, 1, 1, vec![10.0, 11.0, 12.0, 13.0]);
        let (a2, b2) = cross_core_shuffle(&a, &b).unwrap();
        assert_eq!(a2.data, vec![0.0, 1.0, 12.0, 13.0]);
        assert_eq!(b2.data, vec![10.0, 11.0, 2.0, 3.0]);
        let (a3, b3) = cross_core_shuffle(&a2, &b2).unwrap();
        assert_eq!((a3, b3), (a.clone(), b));
        let (same, _) = cross_core_shuffle(&a, &a).unwrap();
        assert_eq!(same, a);
        assert!(cross_core_shuffle(&t(3, 1, 1, vec![0.0; 3]), &t(3, 1, 1, vec![0.0; 3])).is_err());
    }

    #[test]
    fn depthwise_examples() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let x = t(1, 4, 4, (0..16).map(|v| v as f64).collect());
        assert_eq!(depthwise3x3(&x, &k, 1).unwrap(), x);

        let ones = t(1, 4, 4, vec![1.0; 16]);
        let y = depthwise3x3(&ones, &[1.0; 9], 1).unwrap();
        assert_eq!(y.data[5], 9.0);
        assert_eq!(y.data[0], 4.0);
        assert_eq!(y.data[1], 6.0);
        let y2 = depthwise3x3(&ones, &[1.0; 9], 2).unwrap();
        assert_eq!((y2.h, y2.w), (2, 2));
        // stride 2 samples input rows/cols 0 and 2 as centers
        assert_eq!(y2.data, vec![4.0, 6.0, 6.0, 9.0]);
    }

    #[test]
    fn stride_two_odd_sizes() {
        let x = t(1, 5, 3, vec![1.0; 15]);
        let y = depthwise3x3(&x, &[1.0; 9], 2).unwrap();
        assert_eq!((y.h, y.w), (3, 2));
    }

    #[test]
    fn pointwise_examples() {
        let x = t(1, 2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        assert_eq!(pointwise(&x, &[2.0], None, 1, 1).unwrap().data, vec![2.0, -4.0, 6.0, 1.0]);
        let x2 = t(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let ident = pointwise(&x2, &[1.0, 0.0, 0.0, 1.0], None, 2, 1).unwrap();
        assert_eq!(ident, x2);
        // groups == channels is a per-channel scale, i.e. a 1x1 depthwise conv
        let scaled = pointwise(&x2, &[3.0, -1.0], None, 2, 2).unwrap();
        assert_eq!(scaled.data, vec![3.0, 6.0, -3.0, -4.0]);
        assert!(pointwise(&x2, &[1.0; 3], None, 3, 2).is_err());
    }

    #[test]
    fn batch_norm_examples() {
        let x = t(1, 2, 2, vec![3.0; 4]);
        let (y, cache) = batch_norm_train(&x, &[2.0], &[0.25], 1e-5);
        assert!(y.data.iter().all(|&v| v == 0.25));
        assert_eq!(cache.var[0], 0.0);
        let x = t(2, 1, 2, vec![1.0, -2.0, 0.5, 4.0]);
        let y = batch_norm_eval(&x, &[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], 1e-5);
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-5 * b.abs() + 1e-12);
        }
    }

    #[test]
    fn relu_examples() {
        let x = t(3, 1, 1, vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data, vec![0.0, 0.0, 2.0]);
        let dy = t(3, 1, 1, vec![5.0, 5.0, 5.0]);
        assert_eq!(relu_backward(&x, &dy).data, vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = t(4, 1, 1, vec![0.0; 4]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(grad.data.iter().sum::<f64>().abs() < 1e-12);
        let big = t(3, 1, 1, vec![0.0, 1000.0, 0.0]);
        let (loss, _) = softmax_cross_entropy(&big, &[1]).unwrap();
        assert!(loss < 1e-12);
        assert!(softmax_cross_entropy(&big, &[3]).is_err());
        assert!(softmax_cross_entropy(&t(1, 1, 1, vec![0.0]), &[0]).is_err());
    }
}
