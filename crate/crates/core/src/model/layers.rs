//! Forward/backward kernels for the denoiser. Rows are tokens.
//!
//! Each `*_backward` accumulates parameter gradients into the caller's
//! views (`+=`) and returns the input gradient.

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type the model can run in.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite float")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    let th = u.tanh();
    let du = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x * x);
    T::c(0.5) * (T::one() + th) + T::c(0.5) * x * (T::one() - th * th) * du
}

/// `x W + b`.
pub fn linear<T: Scalar>(x: &Array2<T>, w: ArrayView2<T>, b: Option<ArrayView1<T>>) -> Array2<T> {
    let mut y = x.dot(&w);
    if let Some(b) = b {
        y += &b;
    }
    y
}

pub fn linear_backward<T: Scalar>(
    x: &Array2<T>,
    w: ArrayView2<T>,
    dy: &Array2<T>,
    dw: ArrayViewMut2<T>,
    db: Option<ArrayViewMut1<T>>,
    need_dx: bool,
) -> Option<Array2<T>> {
    let mut dw = dw;
    general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut dw);
    if let Some(mut db) = db {
        db += &dy.sum_axis(Axis(0));
    }
    need_dx.then(|| dy.dot(&w.t()))
}

pub struct NormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

pub fn layer_norm<T: Scalar>(x: &Array2<T>, g: ArrayView1<T>, b: ArrayView1<T>) -> (Array2<T>, NormCache<T>) {
    let d = T::c(x.ncols() as f64);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + T::c(LN_EPS)).sqrt();
        let k = *r;
        row.mapv_inplace(|v| v * k);
    }
    let y = &xhat * &g + b;
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    g: ArrayView1<T>,
    dy: &Array2<T>,
    mut dg: ArrayViewMut1<T>,
    mut db: ArrayViewMut1<T>,
) -> Array2<T> {
    dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    db += &dy.sum_axis(Axis(0));
    let d = T::c(dy.ncols() as f64);
    let mut dx = dy * &g;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
        let mean = row.sum() / d;
        let mean_x = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        for (v, &xv) in row.iter_mut().zip(xh.iter()) {
            *v = r * (*v - mean - xv * mean_x);
        }
    }
    dx
}

/// Row-wise numerically stable softmax, in place.
pub fn softmax_rows<T: Scalar>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Gradient through a row softmax: `P * (dP - rowsum(dP * P))`.
pub fn softmax_backward<T: Scalar>(p: &Array2<T>, dp: &Array2<T>) -> Array2<T> {
    let mut ds = dp.clone();
    for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
        let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<T>();
        for (d, &pv) in drow.iter_mut().zip(prow.iter()) {
            *d = pv * (*d - dot);
        }
    }
    ds
}

/// `softmax(Q K^T * scale) V` for one head; returns output and probabilities.
pub fn attention<T: Scalar>(q: ArrayView2<T>, k: ArrayView2<T>, v: ArrayView2<T>, scale: T) -> (Array2<T>, Array2<T>) {
    let mut p = q.dot(&k.t());
    p.mapv_inplace(|x| x * scale);
    softmax_rows(&mut p);
    (p.dot(&v), p)
}

/// Returns `(dq, dk, dv)` for [`attention`].
pub fn attention_backward<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    p: &Array2<T>,
    dout: ArrayView2<T>,
    scale: T,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let dp = dout.dot(&v.t());
    let dv = p.t().dot(&dout);
    let mut ds = softmax_backward(p, &dp);
    ds.mapv_inplace(|x| x * scale);
    let dq = ds.dot(&k);
    let dk = ds.t().dot(&q);
    (dq, dk, dv)
}

pub struct MhaCache<T> {
    qkv: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
}

/// Multi-head self-attention with fused QKV projection (`D x 3D`).
pub fn self_attention<T: Scalar>(
    x: &Array2<T>,
    w_qkv: ArrayView2<T>,
    b_qkv: ArrayView1<T>,
    w_o: ArrayView2<T>,
    b_o: ArrayView1<T>,
    heads: usize,
) -> (Array2<T>, MhaCache<T>) {
    let d = x.ncols();
    let dh = d / heads;
    let qkv = linear(x, w_qkv, Some(b_qkv));
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut ctx = Array2::zeros((x.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let (o, p) = attention(q, k, v, scale);
        ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&o);
        probs.push(p);
    }
    let y = linear(&ctx, w_o, Some(b_o));
    (y, MhaCache { qkv, probs, ctx })
}

#[allow(clippy::too_many_arguments)]
pub fn self_attention_backward<T: Scalar>(
    x: &Array2<T>,
    cache: &MhaCache<T>,
    w_qkv: ArrayView2<T>,
    w_o: ArrayView2<T>,
    dy: &Array2<T>,
    dw_qkv: ArrayViewMut2<T>,
    db_qkv: ArrayViewMut1<T>,
    dw_o: ArrayViewMut2<T>,
    db_o: ArrayViewMut1<T>,
    heads: usize,
) -> Array2<T> {
    let d = x.ncols();
    let dh = d / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let dctx = linear_backward(&cache.ctx, w_o, dy, dw_o, Some(db_o), true).unwrap();
    let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
    for h in 0..heads {
        let cols = |base: usize| s![.., base + h * dh..base + (h + 1) * dh];
        let q = cache.qkv.slice(cols(0));
        let k = cache.qkv.slice(cols(d));
        let v = cache.qkv.slice(cols(2 * d));
        let (dq, dk, dv) = attention_backward(q, k, v, &cache.probs[h], dctx.slice(cols(0)), scale);
        dqkv.slice_mut(cols(0)).assign(&dq);
        dqkv.slice_mut(cols(d)).assign(&dk);
        dqkv.slice_mut(cols(2 * d)).assign(&dv);
    }
    linear_backward(x, w_qkv, &dqkv, dw_qkv, Some(db_qkv), true).unwrap()
}

/// 2-D convolution over an HWC image with zero padding and stride 1.
/// Kernel layout is `[out][in][ky][kx]`.
pub fn conv2d<T: Scalar>(
    img: &[T],
    side: usize,
    channels: usize,
    kernel: &[T],
    bias: &[T],
    ksize: usize,
) -> Vec<T> {
    let pad = (ksize / 2) as isize;
    let mut out = vec![T::zero(); img.len()];
    for y in 0..side {
        for x in 0..side {
            let o = (y * side + x) * channels;
            for co in 0..channels {
                let mut acc = bias[co];
                for ci in 0..channels {
                    for ky in 0..ksize {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= side as isize {
                            continue;
                        }
                        for kx in 0..ksize {
                            let sx = x as isize + kx as isize - pad;
                            if sx < 0 || sx >= side as isize {
                                continue;
                            }
                            let w = kernel[((co * channels + ci) * ksize + ky) * ksize + kx];
                            acc += w * img[(sy as usize * side + sx as usize) * channels + ci];
                        }
                    }
                }
                out[o + co] = acc;
            }
        }
    }
    out
}

/// Accumulates kernel/bias gradients and returns the input gradient.
pub fn conv2d_backward<T: Scalar>(
    img: &[T],
    side: usize,
    channels: usize,
    kernel: &[T],
    ksize: usize,
    dout: &[T],
    dkernel: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let pad = (ksize / 2) as isize;
    let mut dimg = vec![T::zero(); img.len()];
    for y in 0..side {
        for x in 0..side {
            let o = (y * side + x) * channels;
            for co in 0..channels {
                let g = dout[o + co];
                dbias[co] += g;
                for ci in 0..channels {
                    for ky in 0..ksize {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= side as isize {
                            continue;
                        }
                        for kx in 0..ksize {
                            let sx = x as isize + kx as isize - pad;
                            if sx < 0 || sx >= side as isize {
                                continue;
                            }
                            let ki = ((co * channels + ci) * ksize + ky) * ksize + kx;
                            let ii = (sy as usize * side + sx as usize) * channels + ci;
                            dkernel[ki] += g * img[ii];
                            dimg[ii] += g * kernel[ki];
                        }
                    }
                }
            }
        }
    }
    dimg
}
