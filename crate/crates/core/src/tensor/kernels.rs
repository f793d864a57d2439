//! Raw loops behind the heavier tape ops.

use super::gemm::gemm;
use super::Real;

/// Unfolds one `c x h x w` image into a `(c*k*k) x (ho*wo)` patch matrix for
/// a valid, stride-1 convolution.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for y in 0..ho {
                    let src = ci * h * w + (y + ky) * w + kx;
                    dst[y * wo..(y + 1) * wo].copy_from_slice(&x[src..src + wo]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patches back into a `c x h x w` image.
pub(crate) fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for y in 0..ho {
                    let dst = ci * h * w + (y + ky) * w + kx;
                    for (o, &v) in out[dst..dst + wo].iter_mut().zip(&src[y * wo..(y + 1) * wo]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

/// Valid stride-1 convolution. `w` is `[c_out, c_in, k, k]`.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: &[T], d: &ConvDims) -> Vec<T> {
    let (ho, wo) = (d.h + 1 - d.k, d.w + 1 - d.k);
    let ckk = d.c_in * d.k * d.k;
    let mut col = vec![T::zero(); ckk * ho * wo];
    let mut out = vec![T::zero(); d.n * d.c_out * ho * wo];
    for i in 0..d.n {
        let xi = &x[i * d.c_in * d.h * d.w..(i + 1) * d.c_in * d.h * d.w];
        im2col(xi, d.c_in, d.h, d.w, d.k, &mut col);
        let oi = &mut out[i * d.c_out * ho * wo..(i + 1) * d.c_out * ho * wo];
        gemm(d.c_out, ckk, ho * wo, w, false, &col, false, oi, T::zero());
        for (o, &bias) in b.iter().enumerate() {
            for v in oi[o * ho * wo..(o + 1) * ho * wo].iter_mut() {
                *v += bias;
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]; each output is accumulated only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    d: &ConvDims,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let (ho, wo) = (d.h + 1 - d.k, d.w + 1 - d.k);
    let ckk = d.c_in * d.k * d.k;
    let mut col = vec![T::zero(); ckk * ho * wo];
    let mut dcol = vec![T::zero(); ckk * ho * wo];
    for i in 0..d.n {
        let gi = &g[i * d.c_out * ho * wo..(i + 1) * d.c_out * ho * wo];
        if let Some(gw) = gw.as_deref_mut() {
            let xi = &x[i * d.c_in * d.h * d.w..(i + 1) * d.c_in * d.h * d.w];
            im2col(xi, d.c_in, d.h, d.w, d.k, &mut col);
            gemm(d.c_out, ho * wo, ckk, gi, false, &col, true, gw, T::one());
        }
        if let Some(gb) = gb.as_deref_mut() {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += gi[o * ho * wo..(o + 1) * ho * wo].iter().copied().sum::<T>();
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            gemm(ckk, d.c_out, ho * wo, w, true, gi, false, &mut dcol, T::zero());
            let gxi = &mut gx[i * d.c_in * d.h * d.w..(i + 1) * d.c_in * d.h * d.w];
            col2im(&dcol, d.c_in, d.h, d.w, d.k, gxi);
        }
    }
}

/// Stride-1 transposed convolution growing each spatial dim by `k - 1`.
/// `w` is `[c_in, c_out, k, k]`.
pub(crate) fn conv_transpose2d_forward<T: Real>(x: &[T], w: &[T], b: &[T], d: &ConvDims) -> Vec<T> {
    let (hb, wb) = (d.h + d.k - 1, d.w + d.k - 1);
    let okk = d.c_out * d.k * d.k;
    let mut cols = vec![T::zero(); okk * d.h * d.w];
    let mut out = vec![T::zero(); d.n * d.c_out * hb * wb];
    for i in 0..d.n {
        let xi = &x[i * d.c_in * d.h * d.w..(i + 1) * d.c_in * d.h * d.w];
        gemm(okk, d.c_in, d.h * d.w, w, true, xi, false, &mut cols, T::zero());
        let oi = &mut out[i * d.c_out * hb * wb..(i + 1) * d.c_out * hb * wb];
        col2im(&cols, d.c_out, hb, wb, d.k, oi);
        for (o, &bias) in b.iter().enumerate() {
            for v in oi[o * hb * wb..(o + 1) * hb * wb].iter_mut() {
                *v += bias;
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    d: &ConvDims,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let (hb, wb) = (d.h + d.k - 1, d.w + d.k - 1);
    let okk = d.c_out * d.k * d.k;
    let mut dcols = vec![T::zero(); okk * d.h * d.w];
    for i in 0..d.n {
        let gi = &g[i * d.c_out * hb * wb..(i + 1) * d.c_out * hb * wb];
        if let Some(gb) = gb.as_deref_mut() {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += gi[o * hb * wb..(o + 1) * hb * wb].iter().copied().sum::<T>();
            }
        }
        if gx.is_none() && gw.is_none() {
            continue;
        }
        im2col(gi, d.c_out, hb, wb, d.k, &mut dcols);
        if let Some(gx) = gx.as_deref_mut() {
            let gxi = &mut gx[i * d.c_in * d.h * d.w..(i + 1) * d.c_in * d.h * d.w];
            gemm(d.c_in, okk, d.h * d.w, w, false, &dcols, false, gxi, T::one());
        }
        if let Some(gw) = gw.as_deref_mut() {
            let xi = &x[i * d.c_in * d.h * d.w..(i + 1) * d.c_in * d.h * d.w];
            gemm(d.c_in, d.h * d.w, okk, xi, false, &dcols, true, gw, T::one());
        }
    }
}

/// Recurrent (constant cost per token) evaluation of the RWKV weighted key-value
/// mixing. Inputs are `[batch, time, channels]`; `decay` is the log of the
/// per-channel decay rate and `first` the bonus given to the current token.
pub(crate) fn wkv_forward<T: Real>(
    k: &[T],
    v: &[T],
    decay: &[T],
    first: &[T],
    batch: usize,
    time: usize,
    channels: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); batch * time * channels];
    for b in 0..batch {
        for c in 0..channels {
            let w = decay[c].exp();
            let u = first[c];
            let (mut num, mut den, mut max) = (T::zero(), T::zero(), T::neg_infinity());
            for t in 0..time {
                let i = (b * time + t) * channels + c;
                let (kk, vv) = (k[i], v[i]);
                let ww = u + kk;
                let p = max.max(ww);
                let e1 = (max - p).exp();
                let e2 = (ww - p).exp();
                y[i] = (e1 * num + e2 * vv) / (e1 * den + e2);
                let ww = max - w;
                let p = ww.max(kk);
                let e1 = (ww - p).exp();
                let e2 = (kk - p).exp();
                num = e1 * num + e2 * vv;
                den = e1 * den + e2;
                max = p;
            }
        }
    }
    y
}

pub(crate) struct WkvGrads<'a, T> {
    pub k: Option<&'a mut [T]>,
    pub v: Option<&'a mut [T]>,
    pub decay: Option<&'a mut [T]>,
    pub first: Option<&'a mut [T]>,
}

/// Backward of [`wkv_forward`] through the equivalent softmax-weighted sum:
/// `y_t = sum_i a_ti v_i` with logits `k_i - (t-1-i) w` for `i < t` and
/// `u + k_t` for `i = t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn wkv_backward<T: Real>(
    k: &[T],
    v: &[T],
    decay: &[T],
    first: &[T],
    y: &[T],
    g: &[T],
    batch: usize,
    time: usize,
    channels: usize,
    mut out: WkvGrads<'_, T>,
) {
    let mut logits = vec![T::zero(); time];
    for b in 0..batch {
        for c in 0..channels {
            let w = decay[c].exp();
            let u = first[c];
            let idx = |t: usize| (b * time + t) * channels + c;
            let mut dw = T::zero();
            let mut du = T::zero();
            for t in 0..time {
                let gt = g[idx(t)];
                if gt == T::zero() {
                    continue;
                }
                let mut max = T::neg_infinity();
                for (i, l) in logits.iter_mut().enumerate().take(t + 1) {
                    *l = if i < t {
                        k[idx(i)] - T::from_usize(t - 1 - i).unwrap() * w
                    } else {
                        u + k[idx(t)]
                    };
                    max = max.max(*l);
                }
                let mut z = T::zero();
                for l in logits.iter_mut().take(t + 1) {
                    *l = (*l - max).exp();
                    z += *l;
                }
                let yt = y[idx(t)];
                for i in 0..=t {
                    let a = logits[i] / z;
                    if let Some(gv) = out.v.as_deref_mut() {
                        gv[idx(i)] += a * gt;
                    }
                    let dl = gt * a * (v[idx(i)] - yt);
                    if let Some(gk) = out.k.as_deref_mut() {
                        gk[idx(i)] += dl;
                    }
                    if i == t {
                        du += dl;
                    } else {
                        dw -= dl * T::from_usize(t - 1 - i).unwrap();
                    }
                }
            }
            if let Some(gd) = out.decay.as_deref_mut() {
                gd[c] += dw * w;
            }
            if let Some(gf) = out.first.as_deref_mut() {
                gf[c] += du;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k) = (2, 5, 4, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.3).sin()).collect();
        let n = c * k * k * (h - 2) * (w - 2);
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut col = vec![0.0; n];
        im2col(&x, c, h, w, k, &mut col);
        let mut back = vec![0.0; c * h * w];
        col2im(&y, c, h, w, k, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_shrinks_by_kernel_minus_one() {
        let d = ConvDims { n: 1, c_in: 3, c_out: 18, h: 64, w: 64, k: 3 };
        let x = vec![0.5f32; 3 * 64 * 64];
        let w = vec![0.01f32; 18 * 3 * 9];
        let b = vec![0.0f32; 18];
        let y = conv2d_forward(&x, &w, &b, &d);
        assert_eq!(y.len(), 18 * 62 * 62);
        // interior value: 27 taps of 0.5 * 0.01
        assert!((y[100] - 0.135).abs() < 1e-6);
    }
}
