//! Raw compute kernels behind the tape ops.
//!
//! Every kernel accumulates each output element in a fixed left-to-right
//! order, so results are bitwise reproducible across runs and thread counts.
//! Heavy kernels (matmul, conv) parallelize over disjoint output chunks; the
//! per-element order never depends on the split.

use super::par::for_each_chunk;
use super::Element;

/// `y += alpha * x`, elementwise. No reduction dependency, vectorizes.
#[inline]
fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

// ---------------------------------------------------------------- matmul

/// `a [m,k] * b [k,n] -> [m,n]`. Parallel over rows of the output.
pub(crate) fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for_each_chunk(&mut out, n, |i, row| {
        for kk in 0..k {
            axpy(a[i * k + kk], &b[kk * n..kk * n + n], row);
        }
    });
    out
}

/// `a [m,k] * b^T` with `b [n,k]` -> `[m,n]`. Rows of both operands are
/// contiguous; used by linear layers where the weight is stored `[out,in]`.
pub(crate) fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for_each_chunk(&mut out, n, |i, row| {
        let arow = &a[i * k..i * k + k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(arow, &b[j * k..j * k + k]);
        }
    });
    out
}

/// `a^T * b` with `a [m,k]`, `b [m,n]` -> `[k,n]`. Used for weight gradients.
pub(crate) fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; k * n];
    for_each_chunk(&mut out, n, |kk, row| {
        for i in 0..m {
            axpy(a[i * k + kk], &b[i * n..i * n + n], row);
        }
    });
    out
}

// ---------------------------------------------------------------- conv2d

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Valid `[lo, hi)` output range along one axis for kernel offset `kof`:
/// exactly the `o` with `0 <= o*stride + kof - pad < input`.
#[inline]
fn valid_range(input: usize, out: usize, stride: usize, pad: usize, kof: usize) -> (usize, usize) {
    if kof >= input + pad {
        return (0, 0);
    }
    let lo = if kof >= pad {
        0
    } else {
        (pad - kof + stride - 1) / stride
    };
    let hi = ((input - 1 + pad - kof) / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// Direct convolution. Each `(n, f)` output plane is accumulated over
/// `(c, ky, kx)` in ascending order; the inner x-loop is a contiguous axpy
/// when `stride == 1`.
pub(crate) fn conv2d_forward<T: Element>(input: &[T], kernel: &[T], d: &ConvDims) -> Vec<T> {
    let mut out = vec![T::ZERO; d.n * d.f * d.oh * d.ow];
    let plane = d.oh * d.ow;
    let hw = d.h * d.w;
    for_each_chunk(&mut out, plane, |idx, out_plane| {
        let ni = idx / d.f;
        let fi = idx % d.f;
        for ci in 0..d.c {
            let in_plane = &input[(ni * d.c + ci) * hw..][..hw];
            for ky in 0..d.k {
                let (ylo, yhi) = valid_range(d.h, d.oh, d.stride, d.pad, ky);
                for kx in 0..d.k {
                    let (xlo, xhi) = valid_range(d.w, d.ow, d.stride, d.pad, kx);
                    if xlo >= xhi {
                        continue;
                    }
                    let wgt = kernel[((fi * d.c + ci) * d.k + ky) * d.k + kx];
                    for oy in ylo..yhi {
                        let iy = oy * d.stride + ky - d.pad;
                        let irow = &in_plane[iy * d.w..iy * d.w + d.w];
                        let orow = &mut out_plane[oy * d.ow..oy * d.ow + d.ow];
                        if d.stride == 1 {
                            let ix0 = xlo + kx - d.pad;
                            axpy(wgt, &irow[ix0..ix0 + (xhi - xlo)], &mut orow[xlo..xhi]);
                        } else {
                            for ox in xlo..xhi {
                                orow[ox] += wgt * irow[ox * d.stride + kx - d.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient w.r.t. the convolution input. Parallel over `(n, c)` planes.
pub(crate) fn conv2d_backward_input<T: Element>(
    grad_out: &[T],
    kernel: &[T],
    d: &ConvDims,
) -> Vec<T> {
    let mut din = vec![T::ZERO; d.n * d.c * d.h * d.w];
    let hw = d.h * d.w;
    let oplane = d.oh * d.ow;
    for_each_chunk(&mut din, hw, |idx, din_plane| {
        let ni = idx / d.c;
        let ci = idx % d.c;
        for fi in 0..d.f {
            let gplane = &grad_out[(ni * d.f + fi) * oplane..][..oplane];
            for ky in 0..d.k {
                let (ylo, yhi) = valid_range(d.h, d.oh, d.stride, d.pad, ky);
                for kx in 0..d.k {
                    let (xlo, xhi) = valid_range(d.w, d.ow, d.stride, d.pad, kx);
                    if xlo >= xhi {
                        continue;
                    }
                    let wgt = kernel[((fi * d.c + ci) * d.k + ky) * d.k + kx];
                    for oy in ylo..yhi {
                        let iy = oy * d.stride + ky - d.pad;
                        let grow = &gplane[oy * d.ow..oy * d.ow + d.ow];
                        let drow = &mut din_plane[iy * d.w..iy * d.w + d.w];
                        if d.stride == 1 {
                            let ix0 = xlo + kx - d.pad;
                            axpy(wgt, &grow[xlo..xhi], &mut drow[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                drow[ox * d.stride + kx - d.pad] += wgt * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    din
}

/// Gradient w.r.t. the convolution kernel. Parallel over output channels;
/// each `[c,k,k]` slab accumulates over `(n, oy, ox)` in ascending order.
pub(crate) fn conv2d_backward_kernel<T: Element>(
    input: &[T],
    grad_out: &[T],
    d: &ConvDims,
) -> Vec<T> {
    let mut dk = vec![T::ZERO; d.f * d.c * d.k * d.k];
    let slab = d.c * d.k * d.k;
    let oplane = d.oh * d.ow;
    for_each_chunk(&mut dk, slab, |fi, dk_slab| {
        for ni in 0..d.n {
            let gplane = &grad_out[(ni * d.f + fi) * oplane..][..oplane];
            for oy in 0..d.oh {
                let sy = oy * d.stride;
                let ky_lo = d.pad.saturating_sub(sy);
                let ky_hi = (d.h + d.pad - sy).min(d.k);
                if ky_lo >= ky_hi {
                    continue;
                }
                let grow = &gplane[oy * d.ow..oy * d.ow + d.ow];
                for ox in 0..d.ow {
                    let g = grow[ox];
                    let sx = ox * d.stride;
                    let kx_lo = d.pad.saturating_sub(sx);
                    let kx_hi = (d.w + d.pad - sx).min(d.k);
                    if kx_lo >= kx_hi {
                        continue;
                    }
                    for ci in 0..d.c {
                        let in_plane = &input[(ni * d.c + ci) * d.h * d.w..][..d.h * d.w];
                        for ky in ky_lo..ky_hi {
                            let iy = sy + ky - d.pad;
                            let irow = &in_plane[iy * d.w..iy * d.w + d.w];
                            let drow = &mut dk_slab[(ci * d.k + ky) * d.k..][..d.k];
                            let ix0 = sx + kx_lo - d.pad;
                            axpy(g, &irow[ix0..ix0 + (kx_hi - kx_lo)], &mut drow[kx_lo..kx_hi]);
                        }
                    }
                }
            }
        }
    });
    dk
}

// ---------------------------------------------------------------- pooling

pub(crate) struct PoolOut<T> {
    pub values: Vec<T>,
    /// Flat index into the input plane of the chosen element (max pools only).
    pub argmax: Vec<u32>,
}

/// Windowed max pool over `[N,C,H,W]`. First maximum wins ties.
pub(crate) fn max_pool2d<T: Element>(
    input: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> PoolOut<T> {
    let mut values = vec![T::ZERO; n * c * oh * ow];
    let mut argmax = vec![0u32; n * c * oh * ow];
    for p in 0..n * c {
        let plane = &input[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = plane[oy * stride * w + ox * stride];
                let mut best_ix = (oy * stride * w + ox * stride) as u32;
                for ky in 0..k {
                    for kx in 0..k {
                        let ix = (oy * stride + ky) * w + ox * stride + kx;
                        if plane[ix] > best {
                            best = plane[ix];
                            best_ix = ix as u32;
                        }
                    }
                }
                values[(p * oh + oy) * ow + ox] = best;
                argmax[(p * oh + oy) * ow + ox] = best_ix;
            }
        }
    }
    PoolOut { values, argmax }
}

/// Windowed average pool over `[N,C,H,W]`.
pub(crate) fn avg_pool2d<T: Element>(
    input: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut values = vec![T::ZERO; n * c * oh * ow];
    let inv = T::ONE / T::from_f64((k * k) as f64);
    for p in 0..n * c {
        let plane = &input[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::ZERO;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += plane[(oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                values[(p * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    values
}

// ---------------------------------------------------------------- batchnorm

pub(crate) struct BnForward<T> {
    pub output: Vec<T>,
    /// Normalized activations, kept for the backward pass.
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var_biased: Vec<T>,
}

/// Training-mode batch norm over `[N,C,H,W]`, per-channel statistics.
pub(crate) fn batchnorm_forward<T: Element>(
    input: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
    eps: T,
) -> BnForward<T> {
    let m = T::from_f64((n * hw) as f64);
    let mut output = vec![T::ZERO; input.len()];
    let mut xhat = vec![T::ZERO; input.len()];
    let mut inv_std = vec![T::ZERO; c];
    let mut mean = vec![T::ZERO; c];
    let mut var_biased = vec![T::ZERO; c];
    for ci in 0..c {
        let mut sum = T::ZERO;
        for ni in 0..n {
            let plane = &input[(ni * c + ci) * hw..][..hw];
            for &v in plane {
                sum += v;
            }
        }
        let mu = sum / m;
        let mut var_sum = T::ZERO;
        for ni in 0..n {
            let plane = &input[(ni * c + ci) * hw..][..hw];
            for &v in plane {
                let d = v - mu;
                var_sum += d * d;
            }
        }
        let var = var_sum / m;
        let istd = T::ONE / (var + eps).sqrt();
        mean[ci] = mu;
        var_biased[ci] = var;
        inv_std[ci] = istd;
        let (g, b) = (gamma[ci], beta[ci]);
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in 0..hw {
                let xh = (input[base + i] - mu) * istd;
                xhat[base + i] = xh;
                output[base + i] = g * xh + b;
            }
        }
    }
    BnForward {
        output,
        xhat,
        inv_std,
        mean,
        var_biased,
    }
}

pub(crate) struct BnGrads<T> {
    pub dinput: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub(crate) fn batchnorm_backward<T: Element>(
    grad_out: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> BnGrads<T> {
    let m = T::from_f64((n * hw) as f64);
    let mut dinput = vec![T::ZERO; grad_out.len()];
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for ci in 0..c {
        let mut sum_dy = T::ZERO;
        let mut sum_dy_xhat = T::ZERO;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in 0..hw {
                let dy = grad_out[base + i];
                sum_dy += dy;
                sum_dy_xhat += dy * xhat[base + i];
            }
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;
        let scale = gamma[ci] * inv_std[ci];
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in 0..hw {
                dinput[base + i] =
                    scale * (grad_out[base + i] - mean_dy - xhat[base + i] * mean_dy_xhat);
            }
        }
    }
    BnGrads {
        dinput,
        dgamma,
        dbeta,
    }
}

// ---------------------------------------------------------------- softmax

/// Row-wise log-softmax with max-shift, `[n, c]`.
pub(crate) fn log_softmax<T: Element>(input: &[T], n: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; input.len()];
    for i in 0..n {
        let row = &input[i * c..i * c + c];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut lse = T::ZERO;
        for &v in row {
            lse += (v - mx).exp();
        }
        let lse = lse.ln() + mx;
        for (o, &v) in out[i * c..i * c + c].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}
