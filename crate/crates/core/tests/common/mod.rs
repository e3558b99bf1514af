//! Naive reference implementations shared by the integration tests.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rno_core::Tensor;
use std::f64::consts::PI;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

/// `out[o,i,j] = sum k[o,c,a,b] x[c, (i s + a - r) mod H, (j s + b - r) mod W]`.
pub fn naive_conv(x: &Tensor, k: &Tensor, s: usize) -> Tensor {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, ks) = (k.shape()[0], k.shape()[2]);
    let r = ks / 2;
    let (ho, wo) = (h / s, w / s);
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    for o in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for c in 0..cin {
                    for a in 0..ks {
                        for b in 0..ks {
                            let p = (i * s + a + h - r) % h;
                            let q = (j * s + b + w - r) % w;
                            acc += k.data()[((o * cin + c) * ks + a) * ks + b] * x.data()[(c * h + p) * w + q];
                        }
                    }
                }
                out.data_mut()[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    out
}

/// Scatter form of the adjoint of [`naive_conv`].
pub fn naive_conv_t(y: &Tensor, k: &Tensor, s: usize) -> Tensor {
    let (cout, ho, wo) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let (cin, ks) = (k.shape()[1], k.shape()[2]);
    let r = ks / 2;
    let (h, w) = (ho * s, wo * s);
    let mut out = Tensor::zeros(&[cin, h, w]);
    for o in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let v = y.data()[(o * ho + i) * wo + j];
                for c in 0..cin {
                    for a in 0..ks {
                        for b in 0..ks {
                            let p = (i * s + a + h - r) % h;
                            let q = (j * s + b + w - r) % w;
                            out.data_mut()[(c * h + p) * w + q] += k.data()[((o * cin + c) * ks + a) * ks + b] * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `out[o] = sum_c w[o,c] x[c] + bias[o]`.
pub fn naive_affine(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = weight.shape()[0];
    Tensor::from_fn(&[cout, h, w], |p| {
        let (o, s) = (p / (h * w), p % (h * w));
        bias.data()[o] + (0..cin).map(|c| weight.data()[o * cin + c] * x.data()[c * h * w + s]).sum::<f64>()
    })
}

fn signed(p: usize, n: usize) -> i64 {
    if p < n.div_ceil(2) {
        p as i64
    } else {
        p as i64 - n as i64
    }
}

/// Direct 2D DFT of one complex plane; `sign = -1` is the forward transform.
pub fn naive_dft(plane: &[(f64, f64)], h: usize, w: usize, sign: f64) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); h * w];
    for p in 0..h {
        for q in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let ph = sign * 2.0 * PI * ((p * i) as f64 / h as f64 + (q * j) as f64 / w as f64);
                    let (a, b) = plane[i * w + j];
                    re += a * ph.cos() - b * ph.sin();
                    im += a * ph.sin() + b * ph.cos();
                }
            }
            out[p * w + q] = (re, im);
        }
    }
    out
}

/// Spectral convolution by direct DFTs. Mode `(kx, ky)` with `|kx|, |ky| < m`
/// uses the stored weight at `(|kx|, |ky|)`; the half-plane `ky < 0` (and
/// `ky = 0, kx < 0`) uses its conjugate, and DC uses the real part.
pub fn naive_spectral_conv(x: &Tensor, w_re: &Tensor, w_im: &Tensor) -> Tensor {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, m) = (w_re.shape()[0], w_re.shape()[2]);
    let spectra: Vec<Vec<(f64, f64)>> = (0..cin)
        .map(|c| {
            let plane: Vec<(f64, f64)> = x.data()[c * h * w..(c + 1) * h * w].iter().map(|&v| (v, 0.0)).collect();
            naive_dft(&plane, h, w, -1.0)
        })
        .collect();
    let mut out = Vec::with_capacity(cout * h * w);
    for o in 0..cout {
        let mut y = vec![(0.0, 0.0); h * w];
        for p in 0..h {
            for q in 0..w {
                let (kx, ky) = (signed(p, h), signed(q, w));
                if kx.unsigned_abs() as usize >= m || ky.unsigned_abs() as usize >= m {
                    continue;
                }
                for c in 0..cin {
                    let idx = ((o * cin + c) * m + kx.unsigned_abs() as usize) * m + ky.unsigned_abs() as usize;
                    let (gr, mut gi) = (w_re.data()[idx], w_im.data()[idx]);
                    if kx == 0 && ky == 0 {
                        gi = 0.0;
                    } else if ky < 0 || (ky == 0 && kx < 0) {
                        gi = -gi;
                    }
                    let (xr, xi) = spectra[c][p * w + q];
                    y[p * w + q].0 += gr * xr - gi * xi;
                    y[p * w + q].1 += gr * xi + gi * xr;
                }
            }
        }
        let back = naive_dft(&y, h, w, 1.0);
        out.extend(back.iter().map(|z| z.0 / (h * w) as f64));
    }
    Tensor::from_vec(&[cout, h, w], out).unwrap()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}
