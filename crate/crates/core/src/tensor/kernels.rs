//! Raw forward and backward kernels over row-major slices.
//!
//! Every reduction accumulates in `f64` and rounds once on output, and every
//! loop runs in a fixed order, so results are independent of thread count.

use crate::scalar::Scalar;

fn narrow<T: Scalar>(acc: &[f64]) -> Vec<T> {
    acc.iter().map(|&v| T::lit(v)).collect()
}

fn widen<T: Scalar>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.wide()).collect()
}

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
struct Layout {
    rs: isize,
    cs: isize,
}

impl Layout {
    /// Row-major `rows×cols`.
    fn rm(cols: usize) -> Self {
        Self { rs: cols as isize, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    fn tr(cols: usize) -> Self {
        Self { rs: 1, cs: cols as isize }
    }
}

/// `c = a·b + beta·c` in `f64`, `a: m×k`, `b: k×n`, `c: m×n` row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand sizes");
    // SAFETY: the slices cover every element addressed by the given shapes
    // and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, &widen(a), Layout::rm(k), &widen(b), Layout::rm(n), 0.0, &mut c);
    narrow(&c)
}

/// `c = a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, &widen(a), Layout::rm(k), &widen(b), Layout::tr(k), 0.0, &mut c);
    narrow(&c)
}

/// `c = aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, &widen(a), Layout::tr(m), &widen(b), Layout::rm(n), 0.0, &mut c);
    narrow(&c)
}

/// Geometry of a 2-D cross-correlation on one `C×H×W` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Range of output columns whose input column `ox*stride + kx - pad` is in bounds.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        // ix < w  <=>  ox*stride < w + pad - kx
        let lim = self.w + self.pad;
        let hi = if lim <= kx { 0 } else { ((lim - kx - 1) / self.stride + 1).min(self.w_out) };
        (lo, hi.max(lo))
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1×1, stride-1, unpadded kernel reads the input as-is.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unrolls `x` into `(c_in·kh·kw) × (h_out·w_out)` patch columns (zero padded).
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let mut col = vec![0.0; g.patch_len() * p];
    for ci in 0..g.c_in {
        let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.h_out {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let dst = &mut row[oy * g.w_out..(oy + 1) * g.w_out];
                    for ox in lo..hi {
                        dst[ox] = xin[iy * g.w + ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch columns back onto the input grid.
fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let xin = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.h_out {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let src = &row[oy * g.w_out..(oy + 1) * g.w_out];
                    for ox in lo..hi {
                        xin[iy * g.w + ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
    x
}

fn columns<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<f64> {
    let xw = widen(x);
    if g.pointwise() {
        xw
    } else {
        im2col(&xw, g)
    }
}

pub fn conv2d<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let col = columns(x, g);
    let mut out: Vec<f64> = b.iter().flat_map(|v| std::iter::repeat(v.wide()).take(p)).collect();
    let k = g.patch_len();
    gemm(g.c_out, k, p, &widen(w), Layout::rm(k), &col, Layout::rm(p), 1.0, &mut out);
    narrow(&out)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input<T: Scalar>(gy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, k) = (g.positions(), g.patch_len());
    let mut dcol = vec![0.0; k * p];
    gemm(k, g.c_out, p, &widen(w), Layout::tr(k), &widen(gy), Layout::rm(p), 0.0, &mut dcol);
    if g.pointwise() {
        narrow(&dcol)
    } else {
        narrow(&col2im(&dcol, g))
    }
}

/// Gradients of [`conv2d`] with respect to weight and bias.
pub fn conv2d_grad_params<T: Scalar>(gy: &[T], x: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let (p, k) = (g.positions(), g.patch_len());
    let col = columns(x, g);
    let gyw = widen(gy);
    let mut gw = vec![0.0; g.c_out * k];
    gemm(g.c_out, p, k, &gyw, Layout::rm(p), &col, Layout::tr(p), 0.0, &mut gw);
    let gb: Vec<f64> = gyw.chunks(p.max(1)).map(|r| r.iter().sum()).collect();
    (narrow(&gw), narrow(&gb))
}

/// Zero-padded `k×k` box mean with stride 1 on each `h×w` plane.
///
/// The operator is self-adjoint, so the same routine computes its gradient.
pub fn box_mean<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = k / 2;
    let norm = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(c * h * w);
    let mut rows = vec![0.0f64; h * w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        // horizontal pass
        for y in 0..h {
            for xx in 0..w {
                let lo = xx.saturating_sub(r);
                let hi = (xx + r).min(w - 1);
                rows[y * w + xx] = plane[y * w + lo..=y * w + hi].iter().map(|v| v.wide()).sum();
            }
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            for xx in 0..w {
                let s: f64 = (lo..=hi).map(|yy| rows[yy * w + xx]).sum();
                out.push(T::lit(s * norm));
            }
        }
    }
    out
}

/// Per-axis interpolation taps `(i0, i1, weight of i1)` for half-pixel-centre
/// bilinear resampling by an integer factor, clamped at the borders.
pub fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = Vec::with_capacity(c * ty.len() * tx.len());
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let top = p[y0 * w + x0].wide() * (1.0 - wx) + p[y0 * w + x1].wide() * wx;
                let bot = p[y1 * w + x0].wide() * (1.0 - wx) + p[y1 * w + x1].wide() * wx;
                out.push(T::lit(top * (1.0 - wy) + bot * wy));
            }
        }
    }
    out
}

pub fn upsample_bilinear_grad<T: Scalar>(gy: &[T], c: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut acc = vec![0.0f64; c * h * w];
    let mut it = gy.iter();
    for ch in 0..c {
        let p = &mut acc[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let g = it.next().expect("gradient length").wide();
                p[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                p[y0 * w + x1] += g * (1.0 - wy) * wx;
                p[y1 * w + x0] += g * wy * (1.0 - wx);
                p[y1 * w + x1] += g * wy * wx;
            }
        }
    }
    narrow(&acc)
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mx = (0..len).map(|j| x[idx(j)].wide()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (x[idx(j)].wide() - mx).exp();
                sum += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                out[idx(j)] = T::lit(b / sum);
            }
        }
    }
    out
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn transpose<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
