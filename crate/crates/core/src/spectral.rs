//! 2D discrete Fourier transforms on power-of-two periodic grids and the
//! truncated spectral convolution used by the Fourier layer.
//!
//! Conventions: the forward transform is unnormalised, the inverse carries
//! `1/(H*W)`. Index `p` along an axis of length `n` is the signed frequency
//! `p` for `p < n/2` and `p - n` otherwise.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

/// Signed frequency of index `p` on an axis of length `n`.
pub fn signed_freq(p: usize, n: usize) -> i64 {
    if p < n.div_ceil(2) {
        p as i64
    } else {
        p as i64 - n as i64
    }
}

fn check_pow2(h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::UnsupportedSize(format!(
            "FFT grids must be powers of two, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Cached row/column plans for one `H x W` grid.
pub struct Fft2Plan {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize), Rc<Fft2Plan>>> = RefCell::new(HashMap::new());
}

impl Fft2Plan {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        check_pow2(h, w)?;
        let mut planner = FftPlanner::new();
        Ok(Fft2Plan {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        })
    }

    /// Shared per-thread plan for an `h x w` grid.
    pub fn cached(h: usize, w: usize) -> Result<Rc<Fft2Plan>> {
        check_pow2(h, w)?;
        Ok(PLANS.with(|p| {
            p.borrow_mut()
                .entry((h, w))
                .or_insert_with(|| Rc::new(Fft2Plan::new(h, w).expect("checked size")))
                .clone()
        }))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn run(&self, buf: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        let (h, w) = (self.h, self.w);
        assert_eq!(buf.len(), h * w);
        rows.process(buf);
        let mut t = vec![Complex64::new(0.0, 0.0); h * w];
        for i in 0..h {
            for j in 0..w {
                t[j * h + i] = buf[i * w + j];
            }
        }
        cols.process(&mut t);
        for j in 0..w {
            for i in 0..h {
                buf[i * w + j] = t[j * h + i];
            }
        }
    }

    /// In-place unnormalised forward transform of one `h x w` plane.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    /// In-place inverse transform including the `1/(h*w)` factor.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_inv, &self.col_inv);
        let scale = 1.0 / (self.h * self.w) as f64;
        for z in buf.iter_mut() {
            *z *= scale;
        }
    }

    /// Forward transform of a real plane.
    pub fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Inverse transform returning the real part and the largest discarded
    /// imaginary magnitude.
    pub fn inverse_real(&self, mut buf: Vec<Complex64>) -> (Vec<f64>, f64) {
        self.inverse(&mut buf);
        let residue = buf.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
        (buf.iter().map(|z| z.re).collect(), residue)
    }
}

/// Complex spectrum of a `[C, H, W]` field, stored as paired real tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumField {
    pub re: Tensor,
    pub im: Tensor,
}

impl SpectrumField {
    pub fn zeros(shape: &[usize]) -> Self {
        SpectrumField {
            re: Tensor::zeros(shape),
            im: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn get(&self, idx: usize) -> Complex64 {
        Complex64::new(self.re.data()[idx], self.im.data()[idx])
    }

    /// Largest violation of `X[k] = conj(X[-k])` over all channels.
    pub fn hermitian_defect(&self) -> Result<f64> {
        let (c, h, w) = self.re.dims3()?;
        let mut worst = 0.0f64;
        for ch in 0..c {
            for p in 0..h {
                for q in 0..w {
                    let a = self.get((ch * h + p) * w + q);
                    let b = self.get((ch * h + (h - p) % h) * w + (w - q) % w);
                    worst = worst.max((a - b.conj()).norm());
                }
            }
        }
        Ok(worst)
    }
}

/// Unnormalised forward DFT of every channel of a `[C, H, W]` field.
pub fn fft2(x: &Tensor) -> Result<SpectrumField> {
    let (c, h, w) = x.dims3()?;
    let plan = Fft2Plan::cached(h, w)?;
    let mut out = SpectrumField::zeros(&[c, h, w]);
    for ch in 0..c {
        let spec = plan.forward_real(&x.data()[ch * h * w..(ch + 1) * h * w]);
        for (i, z) in spec.iter().enumerate() {
            out.re.data_mut()[ch * h * w + i] = z.re;
            out.im.data_mut()[ch * h * w + i] = z.im;
        }
    }
    Ok(out)
}

/// Inverse DFT returning both real and imaginary parts.
pub fn ifft2_complex(s: &SpectrumField) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = s.re.dims3()?;
    s.re.expect_same_shape(&s.im)?;
    let plan = Fft2Plan::cached(h, w)?;
    let mut re = Tensor::zeros(&[c, h, w]);
    let mut im = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let mut buf: Vec<Complex64> = (0..h * w).map(|i| s.get(ch * h * w + i)).collect();
        plan.inverse(&mut buf);
        for (i, z) in buf.iter().enumerate() {
            re.data_mut()[ch * h * w + i] = z.re;
            im.data_mut()[ch * h * w + i] = z.im;
        }
    }
    Ok((re, im))
}

/// Inverse DFT; the imaginary part is discarded.
pub fn ifft2(s: &SpectrumField) -> Result<Tensor> {
    Ok(ifft2_complex(s)?.0)
}

/// How a retained mode reads its weight from the `[.., m, m]` block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ModeClass {
    /// `ky > 0`, or `ky == 0 && kx > 0`: weight as stored.
    Upper,
    /// The mirror half-plane: complex conjugate of the stored weight.
    Lower,
    /// DC: real part only.
    Zero,
}

#[derive(Clone, Copy, Debug)]
struct Mode {
    /// Flat offset `p * W + q` in the spectrum plane.
    offset: usize,
    /// Flat offset `|kx| * m + |ky|` in the weight block.
    weight: usize,
    class: ModeClass,
}

/// Modes with `|kx| < m` and `|ky| < m`, each mapped to its stored weight.
///
/// A single `[m, m]` complex block indexed by `(|kx|, |ky|)` serves both
/// half-planes: the lower half takes the conjugate weight, which keeps the
/// multiplier Hermitian and the layer real-in/real-out.
fn retained_modes(h: usize, w: usize, m: usize) -> Vec<Mode> {
    let mut modes = Vec::with_capacity((2 * m - 1) * (2 * m - 1));
    for p in 0..h {
        let kx = signed_freq(p, h);
        if kx.unsigned_abs() as usize >= m {
            continue;
        }
        for q in 0..w {
            let ky = signed_freq(q, w);
            if ky.unsigned_abs() as usize >= m {
                continue;
            }
            let class = if kx == 0 && ky == 0 {
                ModeClass::Zero
            } else if ky > 0 || (ky == 0 && kx > 0) {
                ModeClass::Upper
            } else {
                ModeClass::Lower
            };
            modes.push(Mode {
                offset: p * w + q,
                weight: kx.unsigned_abs() as usize * m + ky.unsigned_abs() as usize,
                class,
            });
        }
    }
    modes
}

fn mode_weight(re: f64, im: f64, class: ModeClass) -> Complex64 {
    match class {
        ModeClass::Upper => Complex64::new(re, im),
        ModeClass::Lower => Complex64::new(re, -im),
        ModeClass::Zero => Complex64::new(re, 0.0),
    }
}

/// Validated spectral-conv geometry: `(n_out, n_in, m, h, w)`.
fn spectral_dims(g: &Tensor, w_re: &Tensor, w_im: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, w) = g.dims3()?;
    w_re.expect_same_shape(w_im)?;
    let (n_out, n_in, m) = match w_re.shape()[..] {
        [a, b, m1, m2] if m1 == m2 => (a, b, m1),
        _ => {
            return Err(Error::shape(format!(
                "spectral weights must be [n_out, n_in, m, m], got {:?}",
                w_re.shape()
            )))
        }
    };
    if n_in != c {
        return Err(Error::shape(format!(
            "input has {c} channels but spectral weights expect {n_in}"
        )));
    }
    if m == 0 || m > h / 2 || m > w / 2 {
        return Err(Error::contract(format!(
            "mode count {m} must satisfy 1 <= m <= H/2, W/2 for a {h}x{w} grid"
        )));
    }
    Ok((n_out, n_in, m, h, w))
}

fn channel_spectra(plan: &Fft2Plan, x: &Tensor) -> Vec<Vec<Complex64>> {
    let (c, h, w) = x.dims3().expect("validated");
    (0..c)
        .map(|ch| plan.forward_real(&x.data()[ch * h * w..(ch + 1) * h * w]))
        .collect()
}

/// Applies `Y_i(k) = sum_j G_ij(k) X_j(k)` on the retained modes, with the
/// weight either as stored or conjugate-transposed (for the adjoint).
fn mix_modes(
    spectra: &[Vec<Complex64>],
    w_re: &Tensor,
    w_im: &Tensor,
    modes: &[Mode],
    adjoint: bool,
    plane: usize,
) -> Vec<Vec<Complex64>> {
    let (n_out, n_in, m) = (w_re.shape()[0], w_re.shape()[1], w_re.shape()[2]);
    let (rows, cols) = if adjoint { (n_in, n_out) } else { (n_out, n_in) };
    let mut out = vec![vec![Complex64::new(0.0, 0.0); plane]; rows];
    for (r, y) in out.iter_mut().enumerate() {
        for (c, x) in spectra.iter().enumerate().take(cols) {
            let (i, j) = if adjoint { (c, r) } else { (r, c) };
            let base = (i * n_in + j) * m * m;
            for md in modes {
                let g = mode_weight(w_re.data()[base + md.weight], w_im.data()[base + md.weight], md.class);
                let g = if adjoint { g.conj() } else { g };
                y[md.offset] += g * x[md.offset];
            }
        }
    }
    out
}

fn spectral_conv_impl(
    g: &Tensor,
    w_re: &Tensor,
    w_im: &Tensor,
    adjoint: bool,
) -> Result<(Tensor, f64)> {
    let (n_out, n_in, m, h, w) = spectral_dims_any(g, w_re, w_im, adjoint)?;
    let plan = Fft2Plan::cached(h, w)?;
    let modes = retained_modes(h, w, m);
    let spectra = channel_spectra(&plan, g);
    let mixed = mix_modes(&spectra, w_re, w_im, &modes, adjoint, h * w);
    let c_out = if adjoint { n_in } else { n_out };
    let mut out = Vec::with_capacity(c_out * h * w);
    let mut residue = 0.0f64;
    for y in mixed {
        let (re, r) = plan.inverse_real(y);
        residue = residue.max(r);
        out.extend(re);
    }
    Ok((Tensor::from_vec(&[c_out, h, w], out)?, residue))
}

fn spectral_dims_any(
    g: &Tensor,
    w_re: &Tensor,
    w_im: &Tensor,
    adjoint: bool,
) -> Result<(usize, usize, usize, usize, usize)> {
    if !adjoint {
        return spectral_dims(g, w_re, w_im);
    }
    // The adjoint consumes `n_out` channels.
    let (c, h, w) = g.dims3()?;
    let n_out = *w_re.shape().first().unwrap_or(&0);
    if c != n_out {
        return Err(Error::shape(format!(
            "adjoint input has {c} channels, weights produce {n_out}"
        )));
    }
    let probe = Tensor::zeros(&[w_re.shape().get(1).copied().unwrap_or(0), h, w]);
    spectral_dims(&probe, w_re, w_im)
}

/// Fourier-layer kernel: forward transform, mix channels on the retained
/// low modes (`|kx| < m`, `|ky| < m`), zero the rest, inverse transform.
///
/// `g` is `[n_in, H, W]`; weights are `[n_out, n_in, m, m]` real and
/// imaginary parts.
pub fn spectral_conv(g: &Tensor, w_re: &Tensor, w_im: &Tensor) -> Result<Tensor> {
    Ok(spectral_conv_impl(g, w_re, w_im, false)?.0)
}

/// Like [`spectral_conv`] but also reports the largest imaginary part
/// discarded by the inverse transform.
pub fn spectral_conv_with_residue(g: &Tensor, w_re: &Tensor, w_im: &Tensor) -> Result<(Tensor, f64)> {
    spectral_conv_impl(g, w_re, w_im, false)
}

/// Gradients of `<grad_out, spectral_conv(g, W)>` with respect to `g` and
/// the real/imaginary weight tensors.
pub(crate) fn spectral_conv_backward(
    g: &Tensor,
    w_re: &Tensor,
    w_im: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n_out, n_in, m, h, w) = spectral_dims(g, w_re, w_im)?;
    let grad_in = spectral_conv_impl(grad_out, w_re, w_im, true)?.0;

    let plan = Fft2Plan::cached(h, w)?;
    let modes = retained_modes(h, w, m);
    let xs = channel_spectra(&plan, g);
    let gs = channel_spectra(&plan, grad_out);
    let inv_n = 1.0 / (h * w) as f64;
    let mut d_re = Tensor::zeros(w_re.shape());
    let mut d_im = Tensor::zeros(w_im.shape());
    for i in 0..n_out {
        for j in 0..n_in {
            let base = (i * n_in + j) * m * m;
            for md in &modes {
                // d<gout, out>/dG(k) pairs with X_j(k) conj(Gout_i(k)) / N.
                let z = xs[j][md.offset] * gs[i][md.offset].conj() * inv_n;
                let idx = base + md.weight;
                d_re.data_mut()[idx] += z.re;
                match md.class {
                    ModeClass::Upper => d_im.data_mut()[idx] -= z.im,
                    ModeClass::Lower => d_im.data_mut()[idx] += z.im,
                    ModeClass::Zero => {}
                }
            }
        }
    }
    Ok((grad_in, d_re, d_im))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// O(N^2) 2D DFT straight from the definition.
    fn naive_dft(re: &[f64], im: &[f64], h: usize, w: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
        let mut out_re = vec![0.0; h * w];
        let mut out_im = vec![0.0; h * w];
        for p in 0..h {
            for q in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..h {
                    for j in 0..w {
                        let ph = sign * 2.0 * PI * ((p * i) as f64 / h as f64 + (q * j) as f64 / w as f64);
                        acc += Complex64::new(re[i * w + j], im[i * w + j]) * Complex64::from_polar(1.0, ph);
                    }
                }
                out_re[p * w + q] = acc.re;
                out_im[p * w + q] = acc.im;
            }
        }
        (out_re, out_im)
    }

    #[test]
    fn delta_transforms_to_ones() {
        let mut x = Tensor::zeros(&[1, 4, 8]);
        x.data_mut()[0] = 1.0;
        let s = fft2(&x).unwrap();
        assert!(s.re.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(s.im.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn constant_is_dc_only() {
        let x = Tensor::full(&[2, 8, 8], 2.5);
        let s = fft2(&x).unwrap();
        for ch in 0..2 {
            assert!((s.re.data()[ch * 64] - 2.5 * 64.0).abs() < 1e-12);
            for i in 1..64 {
                assert!(s.get(ch * 64 + i).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_dft_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[1, 4, 4], &mut rng);
        let s = fft2(&x).unwrap();
        let (re, im) = naive_dft(x.data(), &[0.0; 16], 4, 4, -1.0);
        for i in 0..16 {
            assert!((s.re.data()[i] - re[i]).abs() < 1e-10);
            assert!((s.im.data()[i] - im[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn non_power_of_two_rejected() {
        assert!(matches!(
            fft2(&Tensor::zeros(&[1, 6, 8])),
            Err(Error::UnsupportedSize(_))
        ));
    }

    #[test]
    fn zero_spectrum_inverts_to_zero() {
        let s = SpectrumField::zeros(&[2, 4, 4]);
        assert!(ifft2(&s).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverse_of_hermitian_spectrum_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Spectrum of a real field is Hermitian by construction.
        let x = Tensor::randn(&[1, 8, 4], &mut rng);
        let s = fft2(&x).unwrap();
        assert!(s.hermitian_defect().unwrap() < 1e-12);
        let (re, im) = ifft2_complex(&s).unwrap();
        let (nre, _) = naive_dft(s.re.data(), s.im.data(), 8, 4, 1.0);
        for i in 0..32 {
            assert!((re.data()[i] - nre[i] / 32.0).abs() < 1e-10);
        }
        assert!(im.max_abs() < 1e-10);
    }

    #[test]
    fn signed_frequencies() {
        let f: Vec<i64> = (0..8).map(|p| signed_freq(p, 8)).collect();
        assert_eq!(f, vec![0, 1, 2, 3, -4, -3, -2, -1]);
    }

    #[test]
    fn retained_mode_count() {
        let modes = retained_modes(32, 32, 16);
        assert_eq!(modes.len(), 31 * 31);
        assert_eq!(modes.iter().filter(|m| m.class == ModeClass::Zero).count(), 1);
        let upper = modes.iter().filter(|m| m.class == ModeClass::Upper).count();
        let lower = modes.iter().filter(|m| m.class == ModeClass::Lower).count();
        assert_eq!(upper, lower);
    }

    #[test]
    fn rejects_too_many_modes() {
        let g = Tensor::zeros(&[1, 8, 8]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(spectral_conv(&g, &w, &w), Err(Error::Contract(_))));
    }
}
