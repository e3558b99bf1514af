//! Periodic Gaussian-process random fields on the unit square.
//!
//! Covariance `k(x, x') = exp(-(1/(2 l^2)) * sum_d sin^2(pi (x_d - x'_d)))`
//! on grid points `x = (i/H, j/W)`. Samples are `L z` with
//! `K + jitter I = L L^T` (dense Cholesky, cached per grid and parameters).

use crate::error::{Error, Result};
use crate::spectral::{signed_freq, Fft2Plan};
use crate::tensor::Tensor;
use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

pub const DEFAULT_LENGTH_SCALE: f64 = 0.2;
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Largest grid side sampled directly; larger grids are upsampled spectrally.
pub const MAX_DIRECT_SIDE: usize = 64;

/// Dense covariance matrix over an `h x w` grid (row-major point order).
pub fn covariance(h: usize, w: usize, length_scale: f64) -> DMatrix<f64> {
    let c = 1.0 / (2.0 * length_scale * length_scale);
    let axis = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|d| {
                let s = (PI * d as f64 / n as f64).sin();
                s * s
            })
            .collect()
    };
    let (sy, sx) = (axis(h), axis(w));
    let n = h * w;
    DMatrix::from_fn(n, n, |p, q| {
        let (pi, pj) = (p / w, p % w);
        let (qi, qj) = (q / w, q % w);
        // Minimal lag keeps the matrix exactly symmetric.
        let di = pi.abs_diff(qi).min(h - pi.abs_diff(qi));
        let dj = pj.abs_diff(qj).min(w - pj.abs_diff(qj));
        (-c * (sy[di] + sx[dj])).exp()
    })
}

type FactorKey = (usize, usize, u64, u64);

thread_local! {
    static FACTORS: RefCell<HashMap<FactorKey, Rc<DMatrix<f64>>>> = RefCell::new(HashMap::new());
}

/// Lower Cholesky factor of `K + jitter I`.
pub fn cholesky_factor(h: usize, w: usize, length_scale: f64, jitter: f64) -> Result<Rc<DMatrix<f64>>> {
    if !(length_scale > 0.0) || !length_scale.is_finite() {
        return Err(Error::contract(format!(
            "length scale must be positive, got {length_scale}"
        )));
    }
    let key = (h, w, length_scale.to_bits(), jitter.to_bits());
    if let Some(l) = FACTORS.with(|f| f.borrow().get(&key).cloned()) {
        return Ok(l);
    }
    let mut k = covariance(h, w, length_scale);
    for i in 0..h * w {
        k[(i, i)] += jitter;
    }
    let chol = Cholesky::new(k).ok_or_else(|| {
        Error::Numerical(format!(
            "GP covariance is not positive definite on a {h}x{w} grid \
             (length scale {length_scale}, jitter {jitter}); increase the jitter"
        ))
    })?;
    let l = Rc::new(chol.unpack());
    FACTORS.with(|f| f.borrow_mut().insert(key, l.clone()));
    Ok(l)
}

/// Draws one `[1, H, W]` field. Grids wider than [`MAX_DIRECT_SIDE`] are
/// sampled at the capped size and interpolated spectrally.
pub fn sample_gp_initial(h: usize, w: usize, length_scale: f64, jitter: f64, seed: u64) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::shape("GP grid must be non-empty"));
    }
    let (hs, ws) = (h.min(MAX_DIRECT_SIDE), w.min(MAX_DIRECT_SIDE));
    let l = cholesky_factor(hs, ws, length_scale, jitter)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_fn(hs * ws, |_, _| StandardNormal.sample(&mut rng));
    let field = &*l * z;
    let t = Tensor::from_vec(&[1, hs, ws], field.as_slice().to_vec())?;
    if (hs, ws) == (h, w) {
        Ok(t)
    } else {
        spectral_upsample(&t, h, w)
    }
}

/// Band-limited interpolation of `[C, h, w]` onto a finer `[C, H, W]` grid
/// by zero-padding the spectrum. The Nyquist row/column of the coarse grid is
/// dropped so the result stays real.
pub fn spectral_upsample(x: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h_out < h || w_out < w {
        return Err(Error::shape(format!(
            "cannot upsample {h}x{w} onto smaller {h_out}x{w_out}"
        )));
    }
    let small = Fft2Plan::cached(h, w)?;
    let big = Fft2Plan::cached(h_out, w_out)?;
    let scale = (h_out * w_out) as f64 / (h * w) as f64;
    let mut out = Vec::with_capacity(c * h_out * w_out);
    for plane in x.data().chunks_exact(h * w) {
        let spec = small.forward_real(plane);
        let mut padded = vec![Complex64::new(0.0, 0.0); h_out * w_out];
        for i in 0..h {
            let ki = signed_freq(i, h);
            if h % 2 == 0 && ki == -(h as i64 / 2) {
                continue;
            }
            for j in 0..w {
                let kj = signed_freq(j, w);
                if w % 2 == 0 && kj == -(w as i64 / 2) {
                    continue;
                }
                let bi = ki.rem_euclid(h_out as i64) as usize;
                let bj = kj.rem_euclid(w_out as i64) as usize;
                padded[bi * w_out + bj] = spec[i * w + j] * scale;
            }
        }
        let (re, _) = big.inverse_real(padded);
        out.extend(re);
    }
    Tensor::from_vec(&[c, h_out, w_out], out)
}
