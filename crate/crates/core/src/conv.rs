//! Periodic ("same", wrap-around) 2D convolutions and their adjoints.
//!
//! Both directions are lowered to one GEMM through an im2col buffer:
//! `cols[(c, a, b), (i, j)] = x[c, (i*s + a - k/2) mod H, (j*s + b - k/2) mod W]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = op(a) * op(b) + beta * c` for row-major dense matrices, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c_in: usize,
    k: usize,
    stride: usize,
    /// Fine grid.
    h: usize,
    w: usize,
}

impl Geometry {
    fn ho(&self) -> usize {
        self.h / self.stride
    }

    fn wo(&self) -> usize {
        self.w / self.stride
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

fn kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize)> {
    match kernel.shape()[..] {
        [co, ci, k1, k2] if k1 == k2 && k1 % 2 == 1 => Ok((co, ci, k1)),
        _ => Err(Error::shape(format!(
            "kernel must be [Cout, Cin, k, k] with odd k, got {:?}",
            kernel.shape()
        ))),
    }
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::contract("stride must be positive"));
    }
    Ok(())
}

/// Fills `cols` (`[Cin*k*k, Ho*Wo]`) from a fine-grid field by gathering.
fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let (h, w, k, s) = (g.h, g.w, g.k, g.stride);
    let (ho, wo) = (g.ho(), g.wo());
    let r = k / 2;
    let mut col_index = vec![0usize; wo];
    for c in 0..g.c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for a in 0..k {
            for b in 0..k {
                for (j, ci) in col_index.iter_mut().enumerate() {
                    *ci = (j * s + b + w - r) % w;
                }
                let row = (c * k + a) * k + b;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for i in 0..ho {
                    let src = &plane[((i * s + a + h - r) % h) * w..][..w];
                    let out = &mut dst[i * wo..(i + 1) * wo];
                    for (o, &ci) in out.iter_mut().zip(col_index.iter()) {
                        *o = src[ci];
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back onto a fine-grid field (adjoint of `im2col`).
fn col2im(cols: &[f64], g: &Geometry, x: &mut [f64]) {
    let (h, w, k, s) = (g.h, g.w, g.k, g.stride);
    let (ho, wo) = (g.ho(), g.wo());
    let r = k / 2;
    let mut col_index = vec![0usize; wo];
    for c in 0..g.c_in {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for a in 0..k {
            for b in 0..k {
                for (j, ci) in col_index.iter_mut().enumerate() {
                    *ci = (j * s + b + w - r) % w;
                }
                let row = (c * k + a) * k + b;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for i in 0..ho {
                    let dst = &mut plane[((i * s + a + h - r) % h) * w..][..w];
                    for (&v, &ci) in src[i * wo..(i + 1) * wo].iter().zip(col_index.iter()) {
                        dst[ci] += v;
                    }
                }
            }
        }
    }
}

// Stride-1 lowering. Each plane is padded periodically by r = k/2 on every
// side into rows of width wp = w + 2r. The im2col row for tap (a, b) is then
// the contiguous slice starting at a*wp + b, and outputs live in a "wide"
// layout of h rows of wp entries whose last 2r entries per row are junk.

impl Geometry {
    fn wp(&self) -> usize {
        self.w + 2 * (self.k / 2)
    }

    /// Padded plane length, including slack read by the junk columns.
    fn plane_len(&self) -> usize {
        let r = self.k / 2;
        (self.h + 2 * r) * self.wp() + 2 * r
    }

    /// Number of GEMM columns for this geometry.
    fn ncols(&self) -> usize {
        if self.stride == 1 {
            self.h * self.wp()
        } else {
            self.ho() * self.wo()
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<Vec<f64>>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// A reusable buffer of length `len`. Contents are unspecified; callers
/// overwrite every element before reading.
fn scratch(len: usize) -> Vec<f64> {
    let mut v = SCRATCH.with(|s| s.borrow_mut().pop()).unwrap_or_default();
    v.resize(len, 0.0);
    v
}

fn recycle(v: Vec<f64>) {
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        if s.len() < 4 {
            s.push(v);
        }
    });
}

fn pad_indices(n: usize, r: usize) -> Vec<usize> {
    (0..n + 2 * r).map(|p| (p + n * (r + 1) - r) % n).collect()
}

fn lower(x: &[f64], g: &Geometry) -> Vec<f64> {
    let mut cols = scratch(g.col_rows() * g.ncols());
    if g.stride != 1 {
        im2col(x, g, &mut cols);
        return cols;
    }
    let (h, w, k, wp, len) = (g.h, g.w, g.k, g.wp(), g.plane_len());
    let r = k / 2;
    let (rows, cols_idx) = (pad_indices(h, r), pad_indices(w, r));
    let mut padded = vec![0.0; len];
    let n = g.ncols();
    for c in 0..g.c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for (pi, &src_row) in rows.iter().enumerate() {
            let src = &plane[src_row * w..(src_row + 1) * w];
            for (d, &cj) in padded[pi * wp..(pi + 1) * wp].iter_mut().zip(&cols_idx) {
                *d = src[cj];
            }
        }
        for a in 0..k {
            for b in 0..k {
                let row = (c * k + a) * k + b;
                cols[row * n..(row + 1) * n].copy_from_slice(&padded[a * wp + b..][..n]);
            }
        }
    }
    cols
}

/// Adjoint of [`lower`]: accumulates `cols` onto a zeroed fine field.
fn raise(cols: &[f64], g: &Geometry, x: &mut [f64]) {
    if g.stride != 1 {
        col2im(cols, g, x);
        return;
    }
    let (h, w, k, wp, len) = (g.h, g.w, g.k, g.wp(), g.plane_len());
    let r = k / 2;
    let (rows, cols_idx) = (pad_indices(h, r), pad_indices(w, r));
    let n = g.ncols();
    let mut padded = vec![0.0; len];
    for c in 0..g.c_in {
        padded.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..k {
            for b in 0..k {
                let row = (c * k + a) * k + b;
                let dst = &mut padded[a * wp + b..][..n];
                for (d, &v) in dst.iter_mut().zip(&cols[row * n..(row + 1) * n]) {
                    *d += v;
                }
            }
        }
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for (pi, &dst_row) in rows.iter().enumerate() {
            let dst = &mut plane[dst_row * w..(dst_row + 1) * w];
            for (&v, &cj) in padded[pi * wp..(pi + 1) * wp].iter().zip(&cols_idx) {
                dst[cj] += v;
            }
        }
    }
}

/// Drops the junk columns of a wide `[rows, h*wp]` buffer.
fn compact(wide: Vec<f64>, rows: usize, g: &Geometry) -> Vec<f64> {
    if g.stride != 1 {
        return wide;
    }
    let (w, wp) = (g.w, g.wp());
    if w == wp {
        return wide;
    }
    let mut out = Vec::with_capacity(rows * g.h * w);
    for chunk in wide.chunks_exact(wp) {
        out.extend_from_slice(&chunk[..w]);
    }
    out
}

/// Inverse of [`compact`], with zero junk columns.
fn widen(x: &[f64], rows: usize, g: &Geometry) -> Vec<f64> {
    if g.stride != 1 || g.k == 1 {
        return x.to_vec();
    }
    let (w, wp) = (g.w, g.wp());
    let mut out = vec![0.0; rows * g.h * wp];
    for (dst, src) in out.chunks_exact_mut(wp).zip(x.chunks_exact(w)) {
        dst[..w].copy_from_slice(src);
    }
    out
}

/// Periodic convolution with "same" padding, optionally strided.
///
/// `input` is `[Cin, H, W]`, `kernel` is `[Cout, Cin, k, k]`; the result is
/// `[Cout, H/stride, W/stride]`.
pub fn conv2d_periodic(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    check_stride(stride)?;
    let (c_in, h, w) = input.dims3()?;
    let (c_out, kc_in, k) = kernel_dims(kernel)?;
    if kc_in != c_in {
        return Err(Error::shape(format!(
            "input has {c_in} channels but kernel expects {kc_in}"
        )));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(format!(
            "grid {h}x{w} not divisible by stride {stride}"
        )));
    }
    let g = Geometry {
        c_in,
        k,
        stride,
        h,
        w,
    };
    let n = g.ncols();
    let cols = lower(input.data(), &g);
    let mut out = vec![0.0; c_out * n];
    gemm(
        c_out,
        g.col_rows(),
        n,
        kernel.data(),
        false,
        &cols,
        false,
        0.0,
        &mut out,
    );
    recycle(cols);
    Tensor::from_vec(&[c_out, g.ho(), g.wo()], compact(out, c_out, &g))
}

/// Exact adjoint of [`conv2d_periodic`] with the same kernel and stride.
///
/// `input` is `[kernel.shape[0], h, w]` and the result is
/// `[kernel.shape[1], h*stride, w*stride]`, so that
/// `<conv(x, K, s), y> == <x, conv_t(y, K, s)>`.
pub fn conv2d_transposed_periodic(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    check_stride(stride)?;
    let (c, ho, wo) = input.dims3()?;
    let (c_out, c_in, k) = kernel_dims(kernel)?;
    if c != c_out {
        return Err(Error::shape(format!(
            "transposed conv input has {c} channels but kernel produces {c_out}"
        )));
    }
    let g = Geometry {
        c_in,
        k,
        stride,
        h: ho * stride,
        w: wo * stride,
    };
    let n = g.ncols();
    let wide = widen(input.data(), c_out, &g);
    let mut cols = scratch(g.col_rows() * n);
    gemm(
        g.col_rows(),
        c_out,
        n,
        kernel.data(),
        true,
        &wide,
        false,
        0.0,
        &mut cols,
    );
    let mut out = vec![0.0; c_in * g.h * g.w];
    raise(&cols, &g, &mut out);
    recycle(cols);
    Tensor::from_vec(&[c_in, g.h, g.w], out)
}

/// Gradient of `<grad_out, conv2d_periodic(input, K, stride)>` with respect
/// to `K`, for a kernel of spatial size `k`.
pub fn conv2d_kernel_grad(
    input: &Tensor,
    grad_out: &Tensor,
    k: usize,
    stride: usize,
) -> Result<Tensor> {
    check_stride(stride)?;
    let (c_in, h, w) = input.dims3()?;
    let (c_out, ho, wo) = grad_out.dims3()?;
    if ho * stride != h || wo * stride != w {
        return Err(Error::shape(format!(
            "grad_out {:?} inconsistent with input {:?} at stride {stride}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let g = Geometry {
        c_in,
        k,
        stride,
        h,
        w,
    };
    let n = g.ncols();
    let cols = lower(input.data(), &g);
    let wide = widen(grad_out.data(), c_out, &g);
    let mut dk = vec![0.0; c_out * g.col_rows()];
    gemm(
        c_out,
        n,
        g.col_rows(),
        &wide,
        false,
        &cols,
        true,
        0.0,
        &mut dk,
    );
    recycle(cols);
    Tensor::from_vec(&[c_out, c_in, k, k], dk)
}

/// Pointwise channel map: `out[o] = sum_c weight[o, c] * input[c]`.
pub fn channel_mix(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3()?;
    let (c_out, wc_in) = match weight.shape()[..] {
        [a, b] => (a, b),
        _ => {
            return Err(Error::shape(format!(
                "channel weight must be [Cout, Cin], got {:?}",
                weight.shape()
            )))
        }
    };
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "input has {c_in} channels but weight expects {wc_in}"
        )));
    }
    let mut out = vec![0.0; c_out * h * w];
    gemm(c_out, c_in, h * w, weight.data(), false, input.data(), false, 0.0, &mut out);
    Tensor::from_vec(&[c_out, h, w], out)
}
