//! Property tests for the linear building blocks: convolution adjoints,
//! FFT identities and the spectral convolution.

mod common;

use common::{naive_conv, naive_spectral_conv, randn};
use proptest::prelude::*;
use rno_core::conv::{conv2d_periodic, conv2d_transposed_periodic};
use rno_core::spectral::{fft2, ifft2, ifft2_complex, spectral_conv, spectral_conv_with_residue};
use rno_core::Tensor;
use std::f64::consts::PI;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn pow2() -> impl Strategy<Value = usize> {
    prop_oneof![Just(4usize), Just(8), Just(16)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_adjoint_identity(
        cin in 1usize..4, cout in 1usize..4, h in pow2(), w in pow2(),
        k in prop_oneof![Just(1usize), Just(3), Just(5)], stride in 1usize..=2, seed in 0u64..1000,
    ) {
        let x = randn(&[cin, h, w], seed);
        let kern = randn(&[cout, cin, k, k], seed + 1);
        let y = randn(&[cout, h / stride, w / stride], seed + 2);
        let lhs = conv2d_periodic(&x, &kern, stride).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&conv2d_transposed_periodic(&y, &kern, stride).unwrap()).unwrap();
        prop_assert!(rel(lhs, rhs) < 1e-10, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn conv_matches_naive_loops(
        cin in 1usize..3, cout in 1usize..3, h in pow2(), stride in 1usize..=2, seed in 0u64..1000,
    ) {
        let x = randn(&[cin, h, h], seed);
        let kern = randn(&[cout, cin, 3, 3], seed + 1);
        let d = conv2d_periodic(&x, &kern, stride).unwrap().max_abs_diff(&naive_conv(&x, &kern, stride)).unwrap();
        prop_assert!(d < 1e-12);
    }

    #[test]
    fn conv_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, stride in 1usize..=2, seed in 0u64..1000) {
        let (x, y) = (randn(&[2, 8, 8], seed), randn(&[2, 8, 8], seed + 1));
        let k = randn(&[3, 2, 3, 3], seed + 2);
        let combo = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d_periodic(&combo, &k, stride).unwrap();
        let rhs = conv2d_periodic(&x, &k, stride).unwrap().scale(a)
            .add(&conv2d_periodic(&y, &k, stride).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn parseval(c in 1usize..3, h in pow2(), w in pow2(), seed in 0u64..1000) {
        let x = randn(&[c, h, w], seed);
        let s = fft2(&x).unwrap();
        let energy = (s.re.dot(&s.re).unwrap() + s.im.dot(&s.im).unwrap()) / (h * w) as f64;
        prop_assert!(rel(x.dot(&x).unwrap(), energy) < 1e-10);
    }

    #[test]
    fn fft_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let (x, y) = (randn(&[2, 8, 16], seed), randn(&[2, 8, 16], seed + 1));
        let lhs = fft2(&x.scale(a).add(&y.scale(b)).unwrap()).unwrap();
        let (fx, fy) = (fft2(&x).unwrap(), fft2(&y).unwrap());
        let re = fx.re.scale(a).add(&fy.re.scale(b)).unwrap();
        let im = fx.im.scale(a).add(&fy.im.scale(b)).unwrap();
        prop_assert!(lhs.re.max_abs_diff(&re).unwrap() < 1e-12 * (1.0 + re.max_abs()));
        prop_assert!(lhs.im.max_abs_diff(&im).unwrap() < 1e-12 * (1.0 + im.max_abs()));
    }

    #[test]
    fn fft_round_trip_and_hermitian(h in pow2(), w in pow2(), seed in 0u64..1000) {
        let x = randn(&[2, h, w], seed);
        let s = fft2(&x).unwrap();
        prop_assert!(s.hermitian_defect().unwrap() < 1e-12 * (h * w) as f64);
        let (re, im) = ifft2_complex(&s).unwrap();
        prop_assert!(re.max_abs_diff(&x).unwrap() < 1e-10);
        prop_assert!(im.max_abs() < 1e-10);
    }

    #[test]
    fn spectral_conv_linear_and_real(
        m in 1usize..=4, a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000,
    ) {
        let (x, y) = (randn(&[2, 8, 8], seed), randn(&[2, 8, 8], seed + 1));
        let (re, im) = (randn(&[3, 2, m, m], seed + 2), randn(&[3, 2, m, m], seed + 3));
        let combo = x.scale(a).add(&y.scale(b)).unwrap();
        let (lhs, residue) = spectral_conv_with_residue(&combo, &re, &im).unwrap();
        let rhs = spectral_conv(&x, &re, &im).unwrap().scale(a)
            .add(&spectral_conv(&y, &re, &im).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
        prop_assert!(residue < 1e-10);
    }
}

#[test]
fn spectral_conv_identity_on_band_limited_input() {
    let (n, m, h) = (3, 3, 16);
    let x = Tensor::from_fn(&[n, h, h], |p| {
        let (c, i, j) = (p / (h * h), (p / h) % h, p % h);
        let (x, y) = (i as f64 / h as f64, j as f64 / h as f64);
        (c as f64 + 1.0) * (2.0 * PI * (2.0 * x - y)).cos() + (2.0 * PI * (x + 2.0 * y)).sin() - 0.3 * c as f64
    });
    let re = Tensor::from_fn(&[n, n, m, m], |p| if p / (m * m) % (n + 1) == 0 { 1.0 } else { 0.0 });
    let out = spectral_conv(&x, &re, &Tensor::zeros(&[n, n, m, m])).unwrap();
    assert!(out.max_abs_diff(&x).unwrap() < 1e-10);
}

#[test]
fn spectral_conv_zero_weights() {
    let x = randn(&[2, 8, 8], 1);
    let z = Tensor::zeros(&[2, 2, 4, 4]);
    assert_eq!(spectral_conv(&x, &z, &z).unwrap().max_abs(), 0.0);
}

#[test]
fn spectral_conv_matches_naive_dft_oracle() {
    for (n, m, h) in [(1, 2, 8), (2, 3, 8), (1, 4, 8)] {
        let x = randn(&[n, h, h], 2);
        let (re, im) = (randn(&[n, n, m, m], 3), randn(&[n, n, m, m], 4));
        let d = spectral_conv(&x, &re, &im).unwrap().max_abs_diff(&naive_spectral_conv(&x, &re, &im)).unwrap();
        assert!(d < 1e-10, "n={n} m={m}: {d}");
    }
}

#[test]
fn ifft_of_zero_is_zero() {
    let s = fft2(&Tensor::zeros(&[1, 4, 4])).unwrap();
    assert_eq!(ifft2(&s).unwrap().max_abs(), 0.0);
}
