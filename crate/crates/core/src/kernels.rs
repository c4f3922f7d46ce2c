//! Slice-level forward and backward kernels.
//!
//! Everything here works on flat row-major buffers with explicit extents and
//! accumulates into `out` (`+=`) unless the name says otherwise. The tape in
//! [`crate::tape`] owns shape checking; these functions assume valid extents.

use alloc::vec;
use alloc::vec::Vec;

use crate::Real;

/// `out[n,p] += a[n,k] · b[k,p]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n,k] += g[n,p] · b[k,p]ᵀ`
pub fn matmul_bt_acc<T: Real>(g: &[T], b: &[T], out: &mut [T], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let g_row = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let b_row = &b[kk * p..(kk + 1) * p];
            let mut acc = T::ZERO;
            for (&x, &y) in g_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * k + kk] += acc;
        }
    }
}

/// `out[k,p] += a[n,k]ᵀ · g[n,p]`
pub fn matmul_at_acc<T: Real>(a: &[T], g: &[T], out: &mut [T], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let g_row = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::ZERO {
                continue;
            }
            let out_row = &mut out[kk * p..(kk + 1) * p];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Real>(x: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = x[base];
            for j in 1..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = T::ZERO;
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
}

/// `gx += y ⊙ (gy − Σ gy·y)` along the softmax axis.
pub fn softmax_backward<T: Real>(
    y: &[T],
    gy: &[T],
    gx: &mut [T],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::ZERO;
            for j in 0..len {
                let idx = base + j * inner;
                dot += gy[idx] * y[idx];
            }
            for j in 0..len {
                let idx = base + j * inner;
                gx[idx] += y[idx] * (gy[idx] - dot);
            }
        }
    }
}

fn row_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let c = T::from_usize(row.len());
    let mean = row.iter().copied().sum::<T>() / c;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / c;
    (mean, T::ONE / (var + eps).sqrt())
}

/// Normalizes each length-`c` row, then applies `gamma`/`beta`.
pub fn layer_norm<T: Real>(x: &[T], gamma: &[T], beta: &[T], eps: T, out: &mut [T], c: usize) {
    for (row, out_row) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let (mean, rstd) = row_moments(row, eps);
        for j in 0..c {
            out_row[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    eps: T,
    gy: &[T],
    gx: Option<&mut [T]>,
    ggamma: Option<&mut [T]>,
    gbeta: Option<&mut [T]>,
    c: usize,
) {
    let rows = x.len() / c;
    let cn = T::from_usize(c);
    let mut gx = gx;
    let mut ggamma = ggamma;
    let mut gbeta = gbeta;
    let mut xhat = vec![T::ZERO; c];
    let mut dxhat = vec![T::ZERO; c];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let g_row = &gy[r * c..(r + 1) * c];
        let (mean, rstd) = row_moments(row, eps);
        let mut sum_d = T::ZERO;
        let mut sum_dx = T::ZERO;
        for j in 0..c {
            xhat[j] = (row[j] - mean) * rstd;
            dxhat[j] = g_row[j] * gamma[j];
            sum_d += dxhat[j];
            sum_dx += dxhat[j] * xhat[j];
        }
        if let Some(gg) = ggamma.as_deref_mut() {
            for j in 0..c {
                gg[j] += g_row[j] * xhat[j];
            }
        }
        if let Some(gb) = gbeta.as_deref_mut() {
            for j in 0..c {
                gb[j] += g_row[j];
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gx_row = &mut gx[r * c..(r + 1) * c];
            for j in 0..c {
                gx_row[j] += rstd * (dxhat[j] - sum_d / cn - xhat[j] * sum_dx / cn);
            }
        }
    }
}

/// Exact GELU, `x·Φ(x)` with the erf form of the normal CDF.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Geometry of a 2-D convolution over NCHW data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// MACs: `H_out·W_out·C_out·(C_in/g)·k²` per image.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_h() * self.out_w() * self.c_out * (self.c_in / self.groups))
            as u64
            * (self.kh * self.kw) as u64
    }

    /// Output positions `o` with `o·stride + k_off − pad` inside `[0, len)`.
    fn valid(&self, out_len: usize, in_len: usize, k_off: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = k_off as isize - self.pad as isize;
        // o*s + shift >= 0  and  o*s + shift <= in_len - 1
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi_num = in_len as isize - 1 - shift;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out_len as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    /// Visits every (batch, out-channel, in-channel, tap) with the matching
    /// flat plane offsets and the valid output window.
    fn for_each_tap(&self, mut f: impl FnMut(Tap)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cin_g = self.c_in / self.groups;
        let cout_g = self.c_out / self.groups;
        for b in 0..self.batch {
            for oc in 0..self.c_out {
                let g = oc / cout_g;
                for icl in 0..cin_g {
                    let ic = g * cin_g + icl;
                    for ky in 0..self.kh {
                        let (y_lo, y_hi) = self.valid(oh, self.h, ky);
                        if y_lo >= y_hi {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let (x_lo, x_hi) = self.valid(ow, self.w, kx);
                            if x_lo >= x_hi {
                                continue;
                            }
                            f(Tap {
                                in_plane: (b * self.c_in + ic) * self.h * self.w,
                                out_plane: (b * self.c_out + oc) * oh * ow,
                                w_idx: ((oc * cin_g + icl) * self.kh + ky) * self.kw + kx,
                                ky,
                                kx,
                                y: (y_lo, y_hi),
                                x: (x_lo, x_hi),
                            });
                        }
                    }
                }
            }
        }
    }

    fn in_index(&self, tap: &Tap, oy: usize, ox: usize) -> usize {
        let iy = oy * self.stride + tap.ky - self.pad;
        let ix = ox * self.stride + tap.kx - self.pad;
        tap.in_plane + iy * self.w + ix
    }
}

struct Tap {
    in_plane: usize,
    out_plane: usize,
    w_idx: usize,
    ky: usize,
    kx: usize,
    y: (usize, usize),
    x: (usize, usize),
}

/// Zero-padded cross-correlation; `out` must be zeroed or hold a partial sum.
pub fn conv2d<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let ow = g.out_w();
    let plane = g.out_h() * ow;
    if let Some(bias) = bias {
        for (c_plane, chunk) in out.chunks_exact_mut(plane).enumerate() {
            let bv = bias[c_plane % g.c_out];
            chunk.iter_mut().for_each(|o| *o += bv);
        }
    }
    g.for_each_tap(|tap| {
        let wv = w[tap.w_idx];
        if wv == T::ZERO {
            return;
        }
        for oy in tap.y.0..tap.y.1 {
            let o_row = tap.out_plane + oy * ow;
            if g.stride == 1 {
                let start = g.in_index(&tap, oy, tap.x.0);
                let len = tap.x.1 - tap.x.0;
                let src = &x[start..start + len];
                let dst = &mut out[o_row + tap.x.0..o_row + tap.x.1];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            } else {
                for ox in tap.x.0..tap.x.1 {
                    out[o_row + ox] += wv * x[g.in_index(&tap, oy, ox)];
                }
            }
        }
    });
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let ow = g.out_w();
    let plane = g.out_h() * ow;
    if let Some(gb) = gb {
        for (c_plane, chunk) in gy.chunks_exact(plane).enumerate() {
            gb[c_plane % g.c_out] += chunk.iter().copied().sum::<T>();
        }
    }
    if gx.is_none() && gw.is_none() {
        return;
    }
    g.for_each_tap(|tap| {
        let wv = w[tap.w_idx];
        let mut acc = T::ZERO;
        for oy in tap.y.0..tap.y.1 {
            let o_row = tap.out_plane + oy * ow;
            for ox in tap.x.0..tap.x.1 {
                let go = gy[o_row + ox];
                let ii = g.in_index(&tap, oy, ox);
                if let Some(gx) = gx.as_deref_mut() {
                    gx[ii] += wv * go;
                }
                acc += go * x[ii];
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            gw[tap.w_idx] += acc;
        }
    });
}

/// Bin `[start, end)` of output cell `i` when `len` input cells are averaged
/// into `out` cells. Consecutive bins partition `[0, len)`.
pub fn pool_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, (i + 1) * len / out)
}

pub fn adaptive_avg_pool2d<T: Real>(
    x: &[T],
    out: &mut [T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) {
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = pool_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = pool_bin(ox, w, ow);
                let mut acc = T::ZERO;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += src[y * w + xx];
                    }
                }
                out[(p * oh + oy) * ow + ox] = acc / T::from_usize((y1 - y0) * (x1 - x0));
            }
        }
    }
}

pub fn adaptive_avg_pool2d_backward<T: Real>(
    gy: &[T],
    gx: &mut [T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) {
    for p in 0..planes {
        for oy in 0..oh {
            let (y0, y1) = pool_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = pool_bin(ox, w, ow);
                let g = gy[(p * oh + oy) * ow + ox] / T::from_usize((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    for xx in x0..x1 {
                        gx[p * h * w + y * w + xx] += g;
                    }
                }
            }
        }
    }
}

/// Source taps for one axis of a half-pixel bilinear resize:
/// `(low index, high index, weight of high)` per output position.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (libm::floor(src) as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_resize<T: Real>(
    x: &[T],
    out: &mut [T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64(ly);
            let hy = T::ONE - ly;
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::from_f64(lx);
                let hx = T::ONE - lx;
                dst[oy * ow + ox] = hy * (hx * src[y0 * w + x0] + lx * src[y0 * w + x1])
                    + ly * (hx * src[y1 * w + x0] + lx * src[y1 * w + x1]);
            }
        }
    }
}

pub fn bilinear_resize_backward<T: Real>(
    gy: &[T],
    gx: &mut [T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for p in 0..planes {
        let g_out = &gy[p * oh * ow..(p + 1) * oh * ow];
        let g_in = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64(ly);
            let hy = T::ONE - ly;
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::from_f64(lx);
                let hx = T::ONE - lx;
                let g = g_out[oy * ow + ox];
                g_in[y0 * w + x0] += hy * hx * g;
                g_in[y0 * w + x1] += hy * lx * g;
                g_in[y1 * w + x0] += ly * hx * g;
                g_in[y1 * w + x1] += ly * lx * g;
            }
        }
    }
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Writes `x` (extents `shape`) permuted by `perm` into `out`, so that
/// `out` axis `i` is input axis `perm[i]`. With `accumulate`, adds instead.
pub fn permute<T: Real>(x: &[T], shape: &[usize], perm: &[usize], out: &mut [T], accumulate: bool) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    if rank == 0 {
        if accumulate {
            out[0] += x[0];
        } else {
            out[0] = x[0];
        }
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut dst = 0usize;
    let total = out.len();
    while dst < total {
        for j in 0..inner {
            let v = x[src + j * inner_stride];
            if accumulate {
                out[dst + j] += v;
            } else {
                out[dst + j] = v;
            }
        }
        dst += inner;
        // advance the multi-index over all axes but the last
        let mut axis = last;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            src += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

/// Mean pixel cross-entropy over `[B,K,H,W]` logits; writes the gradient
/// w.r.t. the logits scaled by `1/(B·H·W)` into `grad` when given.
pub fn cross_entropy<T: Real>(
    logits: &[T],
    labels: &[u32],
    batch: usize,
    classes: usize,
    plane: usize,
    mut grad: Option<&mut [T]>,
) -> T {
    let count = T::from_usize(batch * plane);
    let mut total = 0.0f64;
    let mut probs = vec![T::ZERO; classes];
    for b in 0..batch {
        for p in 0..plane {
            let at = |k: usize| (b * classes + k) * plane + p;
            let mut max = logits[at(0)];
            for k in 1..classes {
                max = max.max(logits[at(k)]);
            }
            let mut sum = T::ZERO;
            for (k, pr) in probs.iter_mut().enumerate() {
                *pr = (logits[at(k)] - max).exp();
                sum += *pr;
            }
            let label = labels[b * plane + p] as usize;
            total += (sum.ln() - (logits[at(label)] - max)).to_f64();
            if let Some(g) = grad.as_deref_mut() {
                for (k, &pr) in probs.iter().enumerate() {
                    let target = if k == label { T::ONE } else { T::ZERO };
                    g[at(k)] += (pr / sum - target) / count;
                }
            }
        }
    }
    T::from_f64(total / (batch * plane) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let (n, k, p) = (5, 7, 3);
        let a = lcg(1, n * k);
        let b = lcg(2, k * p);
        let mut out = vec![0.0; n * p];
        matmul_acc(&a, &b, &mut out, n, k, p);
        for i in 0..n {
            for j in 0..p {
                let mut want = 0.0;
                for kk in 0..k {
                    want += a[i * k + kk] * b[kk * p + j];
                }
                assert!((out[i * p + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transposes() {
        let (n, k, p) = (3, 4, 2);
        let g = lcg(3, n * p);
        let b = lcg(4, k * p);
        let a = lcg(5, n * k);
        let bt: Vec<f64> = (0..p * k).map(|i| b[(i % k) * p + i / k]).collect();
        let at: Vec<f64> = (0..k * n).map(|i| a[(i % n) * k + i / n]).collect();
        let (mut x, mut y) = (vec![0.0; n * k], vec![0.0; n * k]);
        matmul_bt_acc(&g, &b, &mut x, n, k, p);
        matmul_acc(&g, &bt, &mut y, n, p, k);
        assert!(x.iter().zip(&y).all(|(u, v)| (u - v).abs() < 1e-12));
        let (mut x, mut y) = (vec![0.0; k * p], vec![0.0; k * p]);
        matmul_at_acc(&a, &g, &mut x, n, k, p);
        matmul_acc(&at, &g, &mut y, k, n, p);
        assert!(x.iter().zip(&y).all(|(u, v)| (u - v).abs() < 1e-12));
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        for (c_in, c_out, k, stride, pad, groups) in [(3, 4, 3, 1, 1, 1), (3, 2, 3, 2, 1, 1), (4, 4, 3, 1, 1, 4), (4, 6, 5, 2, 2, 2)] {
            let g = ConvGeom {
                batch: 1,
                c_in,
                h: 5,
                w: 5,
                c_out,
                kh: k,
                kw: k,
                stride,
                pad,
                groups,
            };
            let x = lcg(6, c_in * 25);
            let w = lcg(7, c_out * (c_in / groups) * k * k);
            let bias = lcg(8, c_out);
            let (oh, ow) = (g.out_h(), g.out_w());
            let mut out = vec![0.0; c_out * oh * ow];
            conv2d(&g, &x, &w, Some(&bias), &mut out);
            let cin_g = c_in / groups;
            let cout_g = c_out / groups;
            for oc in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut want = bias[oc];
                        for icl in 0..cin_g {
                            let ic = (oc / cout_g) * cin_g + icl;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                        want += x[ic * 25 + iy as usize * 5 + ix as usize]
                                            * w[((oc * cin_g + icl) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        let got = out[(oc * oh + oy) * ow + ox];
                        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_output_extents() {
        let g = ConvGeom {
            batch: 1,
            c_in: 1,
            h: 7,
            w: 7,
            c_out: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            groups: 1,
        };
        assert_eq!((g.out_h(), g.out_w()), (4, 4));
        assert_eq!(g.macs(), 16 * 9);
    }

    #[test]
    fn pool_bins_partition_the_axis() {
        for len in 1..40 {
            for out in 1..=len {
                let mut next = 0;
                for i in 0..out {
                    let (a, b) = pool_bin(i, len, out);
                    assert_eq!(a, next);
                    assert!(b > a);
                    next = b;
                }
                assert_eq!(next, len);
            }
        }
    }

    #[test]
    fn pool_ramp_to_two_by_two() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut out = vec![0.0; 4];
        adaptive_avg_pool2d(&x, &mut out, 1, (4, 4), (2, 2));
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn bilinear_same_size_taps_are_exact() {
        for (i, &(lo, hi, f)) in bilinear_taps(5, 5).iter().enumerate() {
            assert_eq!((lo, f), (i, 0.0));
            assert!(hi == i + 1 || hi == 4);
        }
    }

    #[test]
    fn bilinear_two_to_four_matches_closed_form() {
        // half-pixel centres: output o samples input at (o + 0.5)/2 − 0.5
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 16];
        bilinear_resize(&x, &mut out, 1, (2, 2), (4, 4));
        let axis = |o: usize| -> (usize, usize, f64) {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = s.floor() as usize;
            (lo.min(1), (lo + 1).min(1), s - lo as f64)
        };
        for oy in 0..4 {
            for ox in 0..4 {
                let (y0, y1, fy) = axis(oy);
                let (x0, x1, fx) = axis(ox);
                let want = (1.0 - fy) * ((1.0 - fx) * x[y0 * 2 + x0] + fx * x[y0 * 2 + x1])
                    + fy * ((1.0 - fx) * x[y1 * 2 + x0] + fx * x[y1 * 2 + x1]);
                assert!((out[oy * 4 + ox] - want).abs() < 1e-12);
            }
        }
        assert_eq!(&out[..4], &[1.0, 1.25, 1.75, 2.0]);
    }

    #[test]
    fn permute_round_trip() {
        let shape = [2, 3, 4];
        let x = lcg(9, 24);
        let mut y = vec![0.0; 24];
        permute(&x, &shape, &[2, 0, 1], &mut y, false);
        // y has extents [4,2,3]; y[k,i,j] = x[i,j,k]
        assert_eq!(y[(3 * 2 + 1) * 3 + 2], x[(3 + 2) * 4 + 3]);
        let mut back = vec![0.0; 24];
        permute(&y, &[4, 2, 3], &[1, 2, 0], &mut back, false);
        assert_eq!(back, x);
    }

    #[test]
    fn gelu_reference_values() {
        // 0.5·(1 + erf(1/√2)) computed in extended precision
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0f64).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let loss = cross_entropy(&[0.0f64; 8], &[0, 1, 1, 0], 1, 2, 4, None);
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-15);
    }
}
