//! Forward and backward tensor kernels.
//!
//! All reductions accumulate in f64 with a fixed summation order, so results
//! are bit-identical across runs and across worker-thread counts (the rayon
//! splits below only ever write disjoint output regions; no reduction crosses
//! a thread boundary).

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of a convolution/pooling axis, floor semantics.
/// Panics when the window does not fit.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "window k={k} does not fit extent {input} with pad {pad}"
    );
    (input + 2 * pad - k) / stride + 1
}

fn conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (usize, usize, usize, usize, usize, usize, usize, usize) {
    let (n, c, h, win) = x.dims4();
    let (o, cw, k, k2) = w.dims4();
    assert_eq!(k, k2, "conv kernels must be square, got {k}x{k2}");
    assert!(matches!(k, 1 | 3 | 5 | 7), "unsupported kernel size {k}");
    assert_eq!(cw, c, "weight expects {cw} input channels, input has {c}");
    assert!(stride >= 1, "stride must be >= 1");
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(win, k, stride, pad);
    (n, c, h, win, o, k, ho, wo)
}

/// Valid output range [lo, hi) on one axis for a given kernel offset:
/// input index = out·stride + koff − pad must land in [0, extent).
fn out_range(extent: usize, out_extent: usize, stride: usize, pad: usize, koff: usize) -> (usize, usize) {
    let lo = if koff >= pad {
        0
    } else {
        (pad - koff + stride - 1) / stride
    };
    let hi_in = extent + pad;
    if hi_in <= koff {
        return (0, 0);
    }
    let hi = ((hi_in - koff - 1) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, win, o, k, ho, wo) = conv_shapes(x, w, stride, pad);
    if let Some(b) = bias {
        assert_eq!(b.shape(), &[o], "bias must be [{o}], got {:?}", b.shape());
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); n * o * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(no, plane)| {
        let (ni, oi) = (no / o, no % o);
        let mut acc = vec![0.0f64; ho * wo];
        if let Some(b) = bias {
            acc.fill(b.data()[oi].f64());
        }
        for ci in 0..c {
            let xp = &xd[(ni * c + ci) * h * win..][..h * win];
            let wp = &wd[(oi * c + ci) * k * k..][..k * k];
            for kh in 0..k {
                let (oh_lo, oh_hi) = out_range(h, ho, stride, pad, kh);
                for kw in 0..k {
                    let wv = wp[kh * k + kw].f64();
                    let (ow_lo, ow_hi) = out_range(win, wo, stride, pad, kw);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kh - pad;
                        let xrow = &xp[ih * win..][..win];
                        let arow = &mut acc[oh * wo..][..wo];
                        if stride == 1 {
                            let ibase = ow_lo + kw - pad;
                            let src = &xrow[ibase..ibase + (ow_hi - ow_lo)];
                            for (a, &xv) in arow[ow_lo..ow_hi].iter_mut().zip(src) {
                                *a += wv * xv.f64();
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                arow[ow] += wv * xrow[ow * stride + kw - pad].f64();
                            }
                        }
                    }
                }
            }
        }
        for (dst, &a) in plane.iter_mut().zip(&acc) {
            *dst = T::of(a);
        }
    });
    Tensor::from_vec(&[n, o, ho, wo], out)
}

pub fn conv2d_backward_input<T: Scalar>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, win) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (o, _, k, _) = w.dims4();
    let (_, dyo, ho, wo) = dy.dims4();
    assert_eq!(dyo, o, "grad channels mismatch");
    let dyd = dy.data();
    let wd = w.data();
    let mut dx = vec![T::zero(); n * c * h * win];
    dx.par_chunks_mut(h * win).enumerate().for_each(|(nc, plane)| {
        let (ni, ci) = (nc / c, nc % c);
        let mut acc = vec![0.0f64; h * win];
        for oi in 0..o {
            let dyp = &dyd[(ni * o + oi) * ho * wo..][..ho * wo];
            let wp = &wd[(oi * c + ci) * k * k..][..k * k];
            for kh in 0..k {
                let (oh_lo, oh_hi) = out_range(h, ho, stride, pad, kh);
                for kw in 0..k {
                    let wv = wp[kh * k + kw].f64();
                    let (ow_lo, ow_hi) = out_range(win, wo, stride, pad, kw);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kh - pad;
                        let dyrow = &dyp[oh * wo..][..wo];
                        let arow = &mut acc[ih * win..][..win];
                        if stride == 1 {
                            let ibase = ow_lo + kw - pad;
                            let dst = &mut arow[ibase..ibase + (ow_hi - ow_lo)];
                            for (a, &g) in dst.iter_mut().zip(&dyrow[ow_lo..ow_hi]) {
                                *a += wv * g.f64();
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                arow[ow * stride + kw - pad] += wv * dyrow[ow].f64();
                            }
                        }
                    }
                }
            }
        }
        for (dst, &a) in plane.iter_mut().zip(&acc) {
            *dst = T::of(a);
        }
    });
    Tensor::from_vec(&[n, c, h, win], dx)
}

/// Dot product with a fixed 4-lane reduction tree (deterministic and
/// autovectorizable).
fn dot4<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (pa, pb) = (&a[4 * i..4 * i + 4], &b[4 * i..4 * i + 4]);
        for lane in 0..4 {
            s[lane] += pa[lane].f64() * pb[lane].f64();
        }
    }
    let mut tail = 0.0f64;
    for i in 4 * chunks..a.len() {
        tail += a[i].f64() * b[i].f64();
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

pub fn conv2d_backward_weight<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, win) = x.dims4();
    let (o, k) = (w_shape[0], w_shape[2]);
    assert_eq!(w_shape[1], c, "weight expects {} input channels", w_shape[1]);
    let (_, _, ho, wo) = dy.dims4();
    let xd = x.data();
    let dyd = dy.data();
    let mut dw = vec![T::zero(); o * c * k * k];
    dw.par_chunks_mut(k * k).enumerate().for_each(|(oc, wplane)| {
        let (oi, ci) = (oc / c, oc % c);
        let mut acc = vec![0.0f64; k * k];
        for ni in 0..n {
            let dyp = &dyd[(ni * o + oi) * ho * wo..][..ho * wo];
            let xp = &xd[(ni * c + ci) * h * win..][..h * win];
            for kh in 0..k {
                let (oh_lo, oh_hi) = out_range(h, ho, stride, pad, kh);
                for kw in 0..k {
                    let (ow_lo, ow_hi) = out_range(win, wo, stride, pad, kw);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let mut sum = 0.0f64;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kh - pad;
                        let dyrow = &dyp[oh * wo..][..wo];
                        let xrow = &xp[ih * win..][..win];
                        if stride == 1 {
                            let ibase = ow_lo + kw - pad;
                            sum += dot4(
                                &dyrow[ow_lo..ow_hi],
                                &xrow[ibase..ibase + (ow_hi - ow_lo)],
                            );
                        } else {
                            for ow in ow_lo..ow_hi {
                                sum += dyrow[ow].f64() * xrow[ow * stride + kw - pad].f64();
                            }
                        }
                    }
                    acc[kh * k + kw] += sum;
                }
            }
        }
        for (dst, &a) in wplane.iter_mut().zip(&acc) {
            *dst = T::of(a);
        }
    });
    Tensor::from_vec(w_shape, dw)
}

pub fn conv2d_backward_bias<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, o, ho, wo) = dy.dims4();
    let dyd = dy.data();
    let mut db = vec![T::zero(); o];
    for oi in 0..o {
        let mut s = 0.0f64;
        for ni in 0..n {
            for &g in &dyd[(ni * o + oi) * ho * wo..][..ho * wo] {
                s += g.f64();
            }
        }
        db[oi] = T::of(s);
    }
    Tensor::from_vec(&[o], db)
}

/// Per-channel batch statistics saved by the train-mode forward.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (÷m) variance, pre-eps.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Elements per channel (N·H·W).
    pub m: usize,
}

fn bn_check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>) -> (usize, usize, usize) {
    let (n, c, h, w) = x.dims4();
    assert_eq!(gamma.shape(), &[c], "gamma must be [{c}]");
    (n, c, h * w)
}

pub fn bn_forward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, BnStats) {
    let (n, c, hw) = bn_check(x, gamma);
    assert_eq!(beta.shape(), &[c], "beta must be [{c}]");
    let m = n * hw;
    assert!(m > 0, "batchnorm over empty batch");
    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let (mut s, mut s2) = (0.0f64, 0.0f64);
        for ni in 0..n {
            for &v in &xd[(ni * c + ci) * hw..][..hw] {
                let v = v.f64();
                s += v;
                s2 += v * v;
            }
        }
        let mu = s / m as f64;
        mean[ci] = mu;
        var[ci] = (s2 / m as f64 - mu * mu).max(0.0);
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let (g, b) = (gamma.data()[ci].f64(), beta.data()[ci].f64());
            let (mu, is) = (mean[ci], inv_std[ci]);
            let base = (ni * c + ci) * hw;
            for i in 0..hw {
                out[base + i] = T::of(g * (xd[base + i].f64() - mu) * is + b);
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), out),
        BnStats {
            mean,
            var,
            inv_std,
            m,
        },
    )
}

pub fn bn_forward_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> (Tensor<T>, Vec<f64>, Vec<f64>) {
    let (n, c, hw) = bn_check(x, gamma);
    assert_eq!(beta.shape(), &[c], "beta must be [{c}]");
    assert_eq!(running_mean.len(), c, "running mean must be [{c}]");
    assert_eq!(running_var.len(), c, "running var must be [{c}]");
    let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let (g, b) = (gamma.data()[ci].f64(), beta.data()[ci].f64());
            let (mu, is) = (running_mean[ci], inv_std[ci]);
            let base = (ni * c + ci) * hw;
            for i in 0..hw {
                out[base + i] = T::of(g * (xd[base + i].f64() - mu) * is + b);
            }
        }
    }
    (Tensor::from_vec(x.shape(), out), running_mean.to_vec(), inv_std)
}

/// Backward shared by train and eval modes: with x̂ = (x−μ)·inv_std,
/// dβ = Σdy, dγ = Σdy·x̂, and
///   train: dx = γ·inv_std·(dy − dβ/m − x̂·dγ/m)
///   eval:  dx = γ·inv_std·dy          (μ, inv_std are constants)
pub fn bn_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, hw) = bn_check(x, gamma);
    let m = (n * hw) as f64;
    let (xd, dyd) = (x.data(), dy.data());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, is) = (mean[ci], inv_std[ci]);
            let (mut sg, mut sb) = (0.0f64, 0.0f64);
            for i in 0..hw {
                let g = dyd[base + i].f64();
                sb += g;
                sg += g * (xd[base + i].f64() - mu) * is;
            }
            dgamma[ci] += sg;
            dbeta[ci] += sb;
        }
    }
    let mut dx = vec![T::zero(); xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, is) = (mean[ci], inv_std[ci]);
            let g = gamma.data()[ci].f64();
            if batch_stats {
                let (mg, mb) = (dgamma[ci] / m, dbeta[ci] / m);
                for i in 0..hw {
                    let xhat = (xd[base + i].f64() - mu) * is;
                    dx[base + i] = T::of(g * is * (dyd[base + i].f64() - mb - xhat * mg));
                }
            } else {
                for i in 0..hw {
                    dx[base + i] = T::of(g * is * dyd[base + i].f64());
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), dx),
        Tensor::from_vec(&[c], dgamma.iter().map(|&v| T::of(v)).collect()),
        Tensor::from_vec(&[c], dbeta.iter().map(|&v| T::of(v)).collect()),
    )
}

pub fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Vec<u32>) {
    assert!(matches!(k, 2 | 3), "unsupported pool size {k}");
    let (n, c, h, w) = x.dims4();
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut argmax = vec![0u32; n * c * ho * wo];
    for nc in 0..n * c {
        let xp = &xd[nc * h * w..][..h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best: Option<(T, usize)> = None;
                for kh in 0..k {
                    let ih = oh * stride + kh;
                    if ih < pad || ih - pad >= h {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = ow * stride + kw;
                        if iw < pad || iw - pad >= w {
                            continue;
                        }
                        let idx = (ih - pad) * w + (iw - pad);
                        let v = xp[idx];
                        // Strict > keeps the first maximum on ties.
                        if best.map_or(true, |(bv, _)| v > bv) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("pool window entirely in padding");
                let oidx = nc * ho * wo + oh * wo + ow;
                out[oidx] = v;
                argmax[oidx] = (nc * h * w + idx) as u32;
            }
        }
    }
    (Tensor::from_vec(&[n, c, ho, wo], out), argmax)
}

pub fn maxpool_backward<T: Scalar>(dy: &Tensor<T>, argmax: &[u32], x_shape: &[usize]) -> Tensor<T> {
    let len: usize = x_shape.iter().product();
    let mut acc = vec![0.0f64; len];
    for (i, &g) in dy.data().iter().enumerate() {
        acc[argmax[i] as usize] += g.f64();
    }
    Tensor::from_vec(x_shape, acc.into_iter().map(T::of).collect())
}

/// Per-axis interpolation taps for 2x bilinear upsampling
/// (half-pixel mapping: src = max(0, (dst+0.5)/2 − 0.5)).
fn bilinear_taps(extent: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * extent)
        .map(|d| {
            let src = ((d as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear2x_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (2 * h, 2 * w);
    let vt = bilinear_taps(h);
    let ht = bilinear_taps(w);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for nc in 0..n * c {
        let xp = &xd[nc * h * w..][..h * w];
        let op = &mut out[nc * ho * wo..][..ho * wo];
        for oh in 0..ho {
            let (y0, y1, fy) = vt[oh];
            for ow in 0..wo {
                let (x0, x1, fx) = ht[ow];
                let v = (1.0 - fy) * (1.0 - fx) * xp[y0 * w + x0].f64()
                    + (1.0 - fy) * fx * xp[y0 * w + x1].f64()
                    + fy * (1.0 - fx) * xp[y1 * w + x0].f64()
                    + fy * fx * xp[y1 * w + x1].f64();
                op[oh * wo + ow] = T::of(v);
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

pub fn bilinear2x_backward<T: Scalar>(dy: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let vt = bilinear_taps(h);
    let ht = bilinear_taps(w);
    let dyd = dy.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        let dp = &dyd[nc * ho * wo..][..ho * wo];
        let mut acc = vec![0.0f64; h * w];
        for oh in 0..ho {
            let (y0, y1, fy) = vt[oh];
            for ow in 0..wo {
                let (x0, x1, fx) = ht[ow];
                let g = dp[oh * wo + ow].f64();
                acc[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * g;
                acc[y0 * w + x1] += (1.0 - fy) * fx * g;
                acc[y1 * w + x0] += fy * (1.0 - fx) * g;
                acc[y1 * w + x1] += fy * fx * g;
            }
        }
        for (dst, &a) in dx[nc * h * w..][..h * w].iter_mut().zip(&acc) {
            *dst = T::of(a);
        }
    }
    Tensor::from_vec(x_shape, dx)
}

pub fn unpool_zero2x_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for nc in 0..n * c {
        for ih in 0..h {
            for iw in 0..w {
                out[nc * ho * wo + (2 * ih) * wo + 2 * iw] = xd[nc * h * w + ih * w + iw];
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

pub fn unpool_zero2x_backward<T: Scalar>(dy: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let dyd = dy.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        for ih in 0..h {
            for iw in 0..w {
                dx[nc * h * w + ih * w + iw] = dyd[nc * ho * wo + (2 * ih) * wo + 2 * iw];
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, rng_from};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = rng_from(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| normal(&mut rng) as f32).collect())
    }

    /// Direct six-loop convolution reference.
    fn conv_oracle(
        x: &Tensor<f32>,
        w: &Tensor<f32>,
        bias: Option<&Tensor<f32>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f32> {
        let (n, c, h, win) = x.dims4();
        let (o, _, k, _) = w.dims4();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (win + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        for ni in 0..n {
            for oi in 0..o {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias.map_or(0.0f64, |b| b.data()[oi] as f64);
                        for ci in 0..c {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (oh * stride + kh) as isize - pad as isize;
                                    let iw = (ow * stride + kw) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= win as isize {
                                        continue;
                                    }
                                    let xi = ((ni * c + ci) * h + ih as usize) * win + iw as usize;
                                    let wi = ((oi * c + ci) * k + kh) * k + kw;
                                    acc += x.data()[xi] as f64 * w.data()[wi] as f64;
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * ho + oh) * wo + ow] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &Tensor<f32>, b: &Tensor<f32>, tol: f32, what: &str) {
        assert_eq!(a.shape(), b.shape(), "{what}: shape");
        for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "{what}: element {i}: {x} vs {y}"
            );
        }
    }

    #[test]
    fn conv_scalar_kernel_scales_input() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0_f32);
        let w = Tensor::full(&[1, 1, 1, 1], 2.0_f32);
        let y = conv2d_forward(&x, &w, None, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let x = rand_tensor(&[2, 3, 5, 4], 1);
        let mut w = Tensor::zeros(&[3, 3, 3, 3]);
        for o in 0..3 {
            // center tap of the o-th input channel
            w.data_mut()[((o * 3 + o) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = conv2d_forward(&x, &w, None, 1, 1);
        assert_close(&y, &x, 1e-7, "identity conv");
    }

    #[test]
    fn conv_matches_oracle_small() {
        let x = rand_tensor(&[1, 2, 4, 4], 2);
        let w = rand_tensor(&[3, 2, 3, 3], 3);
        let b = rand_tensor(&[3], 4);
        let y = conv2d_forward(&x, &w, Some(&b), 1, 1);
        let want = conv_oracle(&x, &w, Some(&b), 1, 1);
        assert_close(&y, &want, 1e-6, "conv vs oracle");
    }

    #[test]
    fn conv_matches_oracle_over_property_grid() {
        for &k in &[1usize, 3, 5, 7] {
            for &stride in &[1usize, 2] {
                for pad in 0..=3usize {
                    let h = 9;
                    if h + 2 * pad < k {
                        continue;
                    }
                    let x = rand_tensor(&[2, 3, h, 8], (k * 100 + stride * 10 + pad) as u64);
                    let w = rand_tensor(&[4, 3, k, k], (k * 7 + pad) as u64);
                    let y = conv2d_forward(&x, &w, None, stride, pad);
                    let want = conv_oracle(&x, &w, None, stride, pad);
                    assert_close(&y, &want, 1e-6, &format!("k={k} s={stride} p={pad}"));
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "does not fit")]
    fn conv_rejects_undersized_input() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 7, 7]);
        let _ = conv2d_forward::<f32>(&x, &w, None, 1, 0);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = rand_tensor(&[2, 2, 5, 5], 10);
        let w = rand_tensor(&[3, 2, 3, 3], 11);
        let b = rand_tensor(&[3], 12);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let y = conv2d_forward(&x, &w, Some(&b), stride, pad);
            // loss = sum(y) → dy = ones
            let dy = Tensor::full(y.shape(), 1.0_f32);
            let dx = conv2d_backward_input(&dy, &w, x.shape(), stride, pad);
            let dw = conv2d_backward_weight(&dy, &x, w.shape(), stride, pad);
            let db = conv2d_backward_bias(&dy);
            let loss = |x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>| -> f64 {
                conv2d_forward(x, w, Some(b), stride, pad)
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .sum()
            };
            let eps = 1e-2f32;
            let check = |which: &str, base: &Tensor<f32>, grad: &Tensor<f32>, idx: usize| {
                let mut p = base.clone();
                p.data_mut()[idx] += eps;
                let (lp, lm);
                match which {
                    "x" => {
                        lp = loss(&p, &w, &b);
                        p.data_mut()[idx] -= 2.0 * eps;
                        lm = loss(&p, &w, &b);
                    }
                    "w" => {
                        lp = loss(&x, &p, &b);
                        p.data_mut()[idx] -= 2.0 * eps;
                        lm = loss(&x, &p, &b);
                    }
                    _ => {
                        lp = loss(&x, &w, &p);
                        p.data_mut()[idx] -= 2.0 * eps;
                        lm = loss(&x, &w, &p);
                    }
                }
                let fd = (lp - lm) / (2.0 * eps as f64);
                let ad = grad.data()[idx] as f64;
                assert!(
                    (ad - fd).abs() / (1.0f64).max(ad.abs() + fd.abs()) < 1e-3,
                    "{which}[{idx}] s={stride} p={pad}: ad {ad} fd {fd}"
                );
            };
            for idx in [0usize, 7, 31] {
                check("x", &x, &dx, idx);
                check("w", &w, &dw, idx % w.len());
                check("b", &b, &db, idx % b.len());
            }
        }
    }

    #[test]
    fn bn_constant_channel_outputs_beta() {
        let x = Tensor::full(&[2, 1, 3, 3], 4.0_f32);
        let gamma = Tensor::full(&[1], 2.0_f32);
        let beta = Tensor::full(&[1], -0.5_f32);
        let (y, stats) = bn_forward_train(&x, &gamma, &beta, 1e-5);
        assert!(y.data().iter().all(|&v| v == -0.5), "{:?}", y.data());
        assert_eq!(stats.mean[0], 4.0);
        assert_eq!(stats.var[0], 0.0);
    }

    #[test]
    fn bn_normalized_input_passes_through() {
        // Construct a channel with exact zero mean and unit variance.
        let vals = [-1.0f32, 1.0, -1.0, 1.0];
        let x = Tensor::from_vec(&[1, 1, 2, 2], vals.to_vec());
        let gamma = Tensor::full(&[1], 1.0_f32);
        let beta = Tensor::zeros(&[1]);
        let (y, _) = bn_forward_train(&x, &gamma, &beta, 1e-5);
        for (a, b) in y.data().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn bn_output_moments_are_standardized() {
        let x = rand_tensor(&[4, 3, 6, 6], 20).map(|v| v * 3.0 + 0.7);
        let gamma = Tensor::full(&[3], 1.0_f32);
        let beta = Tensor::zeros(&[3]);
        let (y, _) = bn_forward_train(&x, &gamma, &beta, 1e-5);
        let (n, c, h, w) = y.dims4();
        let m = (n * h * w) as f64;
        for ci in 0..c {
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for ni in 0..n {
                for i in 0..h * w {
                    let v = y.data()[(ni * c + ci) * h * w + i] as f64;
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / m;
            let var = s2 / m - mean * mean;
            assert!(mean.abs() < 1e-4, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {ci} var {var}");
        }
    }

    #[test]
    fn bn_eval_uses_running_stats() {
        let x = rand_tensor(&[2, 2, 3, 3], 21);
        let gamma = Tensor::full(&[2], 1.5_f32);
        let beta = Tensor::full(&[2], 0.25_f32);
        let rm = vec![0.1f64, -0.2];
        let rv = vec![4.0f64, 0.25];
        let (y, _, _) = bn_forward_eval(&x, &gamma, &beta, &rm, &rv, 1e-5);
        let i = 5usize; // channel 0 of sample 0
        let want = 1.5 * (x.data()[i] as f64 - 0.1) / (4.0 + 1e-5f64).sqrt() + 0.25;
        assert!((y.data()[i] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn maxpool_2x2_example_and_argmax() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]);
        let (y, argmax) = maxpool_forward(&x, 2, 2, 0);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 4.0);
        assert_eq!(argmax, vec![3]);
    }

    #[test]
    fn maxpool_3x3_stride2_pad1_halves_even_extents() {
        let x = rand_tensor(&[1, 2, 8, 8], 30);
        let (y, _) = maxpool_forward(&x, 3, 2, 1);
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]);
        let (y, argmax) = maxpool_forward(&x, 2, 2, 0);
        let dy = Tensor::full(y.shape(), 2.5_f32);
        let dx = maxpool_backward(&dy, &argmax, x.shape());
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 2.5]);
    }

    #[test]
    fn unpool_places_top_left() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0f32]);
        let y = unpool_zero2x_forward(&x);
        assert_eq!(y.data(), &[5.0, 0.0, 0.0, 0.0]);

        let dy = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]);
        let dx = unpool_zero2x_backward(&dy, &[1, 1, 1, 1]);
        assert_eq!(dx.data(), &[1.0]);
    }

    #[test]
    fn bilinear_preserves_constants_and_interpolates() {
        let x = Tensor::full(&[1, 1, 3, 3], 7.0_f32);
        let y = bilinear2x_forward(&x);
        assert_eq!(y.shape(), &[1, 1, 6, 6]);
        assert!(y.data().iter().all(|&v| (v - 7.0).abs() < 1e-6));

        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0f32, 4.0]);
        let y = bilinear2x_forward(&x);
        // Half-pixel mapping: src cols for dst 0..4 are 0, 0.25, 0.75, 1
        // (clamped); the single source row duplicates vertically.
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn bilinear_backward_is_transpose_of_forward() {
        // <A x, y> == <x, Aᵀ y> for random x, y.
        let x = rand_tensor(&[1, 2, 3, 4], 40);
        let y = rand_tensor(&[1, 2, 6, 8], 41);
        let ax = bilinear2x_forward(&x);
        let aty = bilinear2x_backward(&y, x.shape());
        let lhs: f64 = ax.data().iter().zip(y.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn kernels_are_deterministic() {
        let x = rand_tensor(&[2, 3, 8, 8], 50);
        let w = rand_tensor(&[4, 3, 3, 3], 51);
        let a = conv2d_forward(&x, &w, None, 1, 1);
        let b = conv2d_forward(&x, &w, None, 1, 1);
        assert_eq!(a, b);
    }
}
