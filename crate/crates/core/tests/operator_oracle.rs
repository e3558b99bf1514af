//! The operator forward pass against a straight-line re-evaluation built
//! from naive loops, looking every parameter up by name.

mod common;

use common::{gelu, naive_affine, naive_conv, naive_conv_t, naive_spectral_conv, randn, rng};
use rno_core::operator::{Activation, NeuralOperator, OperatorSpec, Variant};
use rno_core::Tensor;

fn randomised(variant: Variant, seed: u64) -> NeuralOperator {
    let spec = OperatorSpec {
        variant,
        layers: 2,
        width: 4,
        activation: Activation::Gelu,
        in_channels: 2,
        out_channels: 1,
    };
    let mut op = NeuralOperator::init(spec, seed).unwrap();
    let mut r = rng(seed + 1);
    for p in op.params_mut() {
        let noise = Tensor::uniform(p.shape(), 0.2, &mut r);
        *p = p.add(&noise).unwrap();
    }
    op
}

fn smooth(op: &NeuralOperator, prefix: &str, steps: usize, f: &Tensor, mut u: Tensor) -> Tensor {
    for s in 0..steps {
        let a = op.param(&format!("{prefix}{s}.A")).unwrap();
        let b = op.param(&format!("{prefix}{s}.B")).unwrap();
        let residual = f.sub(&naive_conv(&u, a, 1)).unwrap();
        u = u.add(&naive_conv(&residual, b, 1)).unwrap();
    }
    u
}

fn vcycle(op: &NeuralOperator, l: usize, g: &Tensor, pattern: &[[usize; 2]]) -> Tensor {
    let j = pattern.len();
    let mut rhs = Vec::new();
    let mut states = Vec::new();
    let mut f = g.clone();
    for (lv, &[pre, post]) in pattern.iter().enumerate() {
        let coarsest = lv + 1 == j;
        let steps = if coarsest { pre + post } else { pre };
        let u = smooth(op, &format!("layer{l}.level{lv}.pre"), steps, &f, Tensor::zeros(f.shape()));
        rhs.push(f.clone());
        states.push(u.clone());
        if !coarsest {
            let a = op.param(&format!("layer{l}.level{lv}.restrict.A")).unwrap();
            let r = op.param(&format!("layer{l}.level{lv}.restrict.R")).unwrap();
            f = naive_conv(&f.sub(&naive_conv(&u, a, 1)).unwrap(), r, 2);
        }
    }
    let mut uc = states.pop().unwrap();
    for lv in (0..j - 1).rev() {
        let p = op.param(&format!("layer{l}.level{lv}.prolong.P")).unwrap();
        let u = states[lv].add(&naive_conv_t(&uc, p, 2)).unwrap();
        uc = smooth(op, &format!("layer{l}.level{lv}.post"), pattern[lv][1], &rhs[lv], u);
    }
    uc
}

fn straight_line(op: &NeuralOperator, input: &Tensor) -> Tensor {
    let p = |name: String| op.param(&name).unwrap().clone();
    let mut g = naive_affine(input, &p("lift.weight".into()), &p("lift.bias".into()));
    for l in 0..op.spec().layers {
        let kg = match &op.spec().variant {
            Variant::Fno { .. } => {
                naive_spectral_conv(&g, &p(format!("layer{l}.spectral.re")), &p(format!("layer{l}.spectral.im")))
            }
            Variant::Mgno { pattern, .. } => vcycle(op, l, &g, pattern),
        };
        // b_i = sum_j alpha_ij g_j + beta_i
        let b = naive_affine(&g, &p(format!("layer{l}.alpha")), &p(format!("layer{l}.beta")));
        g = kg.add(&b).unwrap().map(gelu);
    }
    naive_affine(&g, &p("q.weight".into()), &p("q.bias".into()))
}

#[test]
fn fno_forward_matches_straight_line() {
    let op = randomised(Variant::Fno { modes: 3 }, 21);
    let x = randn(&[2, 8, 8], 22);
    let d = op.forward(&x).unwrap().max_abs_diff(&straight_line(&op, &x)).unwrap();
    assert!(d < 1e-12, "{d}");
}

#[test]
fn mgno_forward_matches_straight_line() {
    for levels in [1, 2, 3] {
        let op = randomised(Variant::mgno(levels), 30 + levels as u64);
        let x = randn(&[2, 8, 8], 40);
        let d = op.forward(&x).unwrap().max_abs_diff(&straight_line(&op, &x)).unwrap();
        assert!(d < 1e-12, "J={levels}: {d}");
    }
}

#[test]
fn mgno_custom_pattern_with_post_smoothing() {
    let variant = Variant::Mgno {
        levels: 3,
        pattern: vec![[1, 2], [2, 1], [1, 1]],
        kernel_size: 3,
    };
    let op = randomised(variant, 50);
    let x = randn(&[2, 8, 8], 51);
    let d = op.forward(&x).unwrap().max_abs_diff(&straight_line(&op, &x)).unwrap();
    assert!(d < 1e-12, "{d}");
}
