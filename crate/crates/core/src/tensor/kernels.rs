//! Slice-level kernels shared by the forward and backward passes.
//!
//! All buffers are row-major. Accumulating kernels (`*_acc`) add into `out`.

use super::Real;

/// `out[m×n] += a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &s) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + s * bv;
            }
        }
    }
}

/// `out[p×q] += aᵀ · b` where `a` is `r×p` and `b` is `r×q`.
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], r: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), r * p);
    debug_assert_eq!(b.len(), r * q);
    debug_assert_eq!(out.len(), p * q);
    for ri in 0..r {
        let a_row = &a[ri * p..(ri + 1) * p];
        let b_row = &b[ri * q..(ri + 1) * q];
        for (pi, &s) in a_row.iter().enumerate() {
            if s == T::zero() {
                continue;
            }
            let row = &mut out[pi * q..(pi + 1) * q];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + s * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Output extent along one axis, `None` when it is not integral.
    pub fn extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let span = (size + 2 * pad).checked_sub(k)?;
        if stride == 0 || span % stride != 0 {
            return None;
        }
        Some(span / stride + 1)
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `x[c×h×w]` into `[c·k·k × out_h·out_w]` patch columns.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.rows() * cols];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: folds patch columns back, accumulating into `dx`.
pub fn col2im_acc<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let d = &mut plane[iy as usize * g.w + ix as usize];
                            *d = *d + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Block-mean pooling of `x[c×h×w]` to `c×oh×ow`; extents must divide.
pub fn avgpool<T: Real>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let (bh, bw) = (h / oh, w / ow);
    let inv = T::one() / T::of((bh * bw) as f64);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for y in oy * bh..(oy + 1) * bh {
                    let row = &x[(ch * h + y) * w + ox * bw..(ch * h + y) * w + (ox + 1) * bw];
                    for &v in row {
                        acc = acc + v;
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Real>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let (bh, bw) = (h / oh, w / ow);
    let inv = T::one() / T::of((bh * bw) as f64);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                dx[(ch * h + y) * w + x] = g[(ch * oh + y / bh) * ow + x / bw] * inv;
            }
        }
    }
    dx
}

/// One axis of an align-corners-false bilinear resampling: for each output
/// index the two source indices and the weight of the upper one.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub fn bilinear<T: Real>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                let top = plane[y0 * w + x0] * gx + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * gx + plane[y1 * w + x1] * fx;
                out[(ch * oh + oy) * ow + ox] = top * gy + bottom * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Real>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                let v = g[(ch * oh + oy) * ow + ox];
                plane[y0 * w + x0] = plane[y0 * w + x0] + v * gy * gx;
                plane[y0 * w + x1] = plane[y0 * w + x1] + v * gy * fx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + v * fy * gx;
                plane[y1 * w + x1] = plane[y1 * w + x1] + v * fy * fx;
            }
        }
    }
    dx
}

/// Splits a shape around `axis` into (outer, axis extent, inner) strides.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..n {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Real>(y: &[T], g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..n {
                dot = dot + g[at(j)] * y[at(j)];
            }
            for j in 0..n {
                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_extent_rejects_fractional() {
        assert_eq!(ConvGeometry::extent(8, 3, 1, 1), Some(8));
        assert_eq!(ConvGeometry::extent(8, 3, 2, 1), None);
        assert_eq!(ConvGeometry::extent(9, 3, 2, 1), Some(5));
        assert_eq!(ConvGeometry::extent(2, 5, 1, 0), None);
    }

    #[test]
    fn bilinear_taps_identity_when_same_size() {
        for (i, &(lo, hi, f)) in bilinear_taps(5, 5).iter().enumerate() {
            assert_eq!(lo, i);
            assert!(f == 0.0 || hi == lo, "{i}: {lo} {hi} {f}");
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3x4
        let mut ab = vec![0.0; 8];
        matmul_acc(&a, &b, &mut ab, 2, 3, 4);
        // aᵀ as 3x2, then (aᵀ)ᵀ b through tn.
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect();
        let mut tn = vec![0.0; 8];
        matmul_tn_acc(&at, &b, &mut tn, 3, 2, 4);
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let mut nt = vec![0.0; 8];
        matmul_nt_acc(&a, &bt, &mut nt, 2, 3, 4);
        for i in 0..8 {
            assert!((ab[i] - tn[i]).abs() < 1e-12);
            assert!((ab[i] - nt[i]).abs() < 1e-12);
        }
    }
}
