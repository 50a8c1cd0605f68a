//! Raw dense kernels on row-major slices. No tape, no validation.

use crate::par;

/// Strided read-only matrix operand for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    /// Row-major matrix with `cols` columns.
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn offset_rows(self, r: usize) -> Self {
        View {
            data: &self.data[r * self.row_stride..],
            ..self
        }
    }
}

/// Rows of the output handled by one parallel task.
const GEMM_ROW_BLOCK: usize = 32;

fn gemm_into(a: View<'_>, b: View<'_>, c: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: the views cover m×k and k×n elements at the given strides
    // (checked by the callers' shapes) and `c` holds m×n row-major values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a · b` for `a: m×k`, `b: k×n`, split over row blocks. Each output
/// element is accumulated in the same order whatever the split, so the
/// parallel and sequential paths agree bit for bit.
pub fn gemm(a: View<'_>, b: View<'_>, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if n == 0 {
        return c;
    }
    par::for_each_chunk_mut(&mut c, GEMM_ROW_BLOCK * n, |blk, out| {
        let r0 = blk * GEMM_ROW_BLOCK;
        gemm_into(a.offset_rows(r0), b, out, out.len() / n, k, n);
    });
    c
}

/// `c = a · b` with row-major `a: m×k`, `b: k×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(
        a.len() >= m * k && b.len() >= k * n,
        "matmul operands too short"
    );
    gemm(View::rows(a, k), View::rows(b, n), m, k, n)
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Output columns `ox` whose tap `kx` lands inside the image.
fn valid_ox(kx: usize, g: &ConvGeom, wo: usize) -> (usize, usize) {
    let s = g.stride;
    let lo = g.padding.saturating_sub(kx).div_ceil(s);
    let hi = if g.width + g.padding > kx {
        ((g.width + g.padding - kx - 1) / s + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one image `(C, H, W)` into `(C·k·k, Ho·Wo)`.
pub fn im2col(img: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let mut cols = Vec::with_capacity(g.col_rows() * ho * wo);
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_ox(kx, g, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        cols.resize(cols.len() + wo, 0.0);
                        continue;
                    }
                    let src = &img[(c * g.height + iy as usize) * g.width..][..g.width];
                    cols.resize(cols.len() + lo, 0.0);
                    if hi > lo {
                        let first = lo * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            cols.extend_from_slice(&src[first..first + (hi - lo)]);
                        } else {
                            cols.extend(src[first..].iter().step_by(g.stride).take(hi - lo));
                        }
                    }
                    cols.resize(cols.len() + wo - hi, 0.0);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds `(C·k·k, Ho·Wo)` back into `(C, H, W)` by summation.
pub fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_ox(kx, g, wo);
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    if lo == hi {
                        continue;
                    }
                    let base = (c * g.height + iy as usize) * g.width;
                    let dst = &mut img[base..base + g.width];
                    let first = lo * g.stride + kx - g.padding;
                    let vals = &src[oy * wo + lo..oy * wo + hi];
                    for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(vals) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Batched convolution. `x: (N, C, H, W)`, `w: (O, C, k, k)` → `(N, O, Ho, Wo)`.
pub fn conv2d(x: &[f64], w: &[f64], n: usize, out_ch: usize, g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let in_item = g.channels * g.height * g.width;
    let out_item = out_ch * ho * wo;
    let mut out = vec![0.0; n * out_item];
    par::for_each_chunk_mut(&mut out, out_item, |i, dst| {
        let cols = im2col(&x[i * in_item..(i + 1) * in_item], g);
        gemm_into(
            View::rows(w, g.col_rows()),
            View::rows(&cols, ho * wo),
            dst,
            out_ch,
            g.col_rows(),
            ho * wo,
        );
    });
    out
}

/// Gradients of [`conv2d`] with respect to input and weight.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    n: usize,
    out_ch: usize,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_hw();
    let in_item = g.channels * g.height * g.width;
    let out_item = out_ch * ho * wo;
    let kk = g.col_rows();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = par::map(n, |i| {
        let gy = &grad_out[i * out_item..(i + 1) * out_item];
        let gcols = gemm_seq(
            View::transposed(w, kk),
            View::rows(gy, ho * wo),
            kk,
            out_ch,
            ho * wo,
        );
        let mut gx = vec![0.0; in_item];
        col2im(&gcols, g, &mut gx);
        let cols = im2col(&x[i * in_item..(i + 1) * in_item], g);
        let gw = gemm_seq(
            View::rows(gy, ho * wo),
            View::transposed(&cols, ho * wo),
            out_ch,
            ho * wo,
            kk,
        );
        (gx, gw)
    });
    let mut gx = Vec::with_capacity(n * in_item);
    let mut gw = vec![0.0; out_ch * kk];
    for (px, pw) in partials {
        gx.extend_from_slice(&px);
        for (a, b) in gw.iter_mut().zip(&pw) {
            *a += b;
        }
    }
    (gx, gw)
}

/// Transposed convolution. `x: (N, C, H, W)`, `w: (C, O, k, k)` → `(N, O, Ho, Wo)`
/// where `g` describes the output image `(O, Ho, Wo)` as seen by the adjoint conv.
pub fn conv_transpose2d(x: &[f64], w: &[f64], n: usize, in_ch: usize, g: &ConvGeom) -> Vec<f64> {
    let (h, wd) = g.out_hw();
    let kk = g.col_rows();
    let in_item = in_ch * h * wd;
    let out_item = g.channels * g.height * g.width;
    let mut out = vec![0.0; n * out_item];
    par::for_each_chunk_mut(&mut out, out_item, |i, dst| {
        let cols = gemm_seq(
            View::transposed(w, kk),
            View::rows(&x[i * in_item..(i + 1) * in_item], h * wd),
            kk,
            in_ch,
            h * wd,
        );
        col2im(&cols, g, dst);
    });
    out
}

pub fn conv_transpose2d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    n: usize,
    in_ch: usize,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (h, wd) = g.out_hw();
    let kk = g.col_rows();
    let in_item = in_ch * h * wd;
    let out_item = g.channels * g.height * g.width;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = par::map(n, |i| {
        let gcols = im2col(&grad_out[i * out_item..(i + 1) * out_item], g);
        let gx = matmul_seq(w, &gcols, in_ch, kk, h * wd);
        // grad_w = x_i (C × HW) · gcolsᵀ (HW × kk)
        let gw = gemm_seq(
            View::rows(&x[i * in_item..(i + 1) * in_item], h * wd),
            View::transposed(&gcols, h * wd),
            in_ch,
            h * wd,
            kk,
        );
        (gx, gw)
    });
    let mut gx = Vec::with_capacity(n * in_item);
    let mut gw = vec![0.0; in_ch * kk];
    for (px, pw) in partials {
        gx.extend_from_slice(&px);
        for (a, b) in gw.iter_mut().zip(&pw) {
            *a += b;
        }
    }
    (gx, gw)
}

/// Single-threaded matmul for use inside already-parallel loops.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(
        a.len() >= m * k && b.len() >= k * n,
        "matmul operands too short"
    );
    gemm_seq(View::rows(a, k), View::rows(b, n), m, k, n)
}

pub fn gemm_seq(a: View<'_>, b: View<'_>, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_into(a, b, &mut c, m, k, n);
    c
}
