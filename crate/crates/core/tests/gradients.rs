//! Reverse-mode gradients against finite differences, per primitive and for
//! whole operators.

mod common;

use common::{randn, rng};
use rno_core::autodiff::{backward, grad_check, grad_check_with, FdOptions, Graph, Var};
use rno_core::operator::{Activation, NeuralOperator, OperatorSpec, Variant};
use rno_core::{Result, Tensor};

const TOL: f64 = 1e-4;

/// `sum(r * y)` with a fixed random weight field, so every output element
/// contributes with a different sensitivity.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(randn(g.value(y).shape(), seed));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn check(name: &str, point: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let d = grad_check(f, point).unwrap();
    assert!(d < TOL, "{name}: {d}");
}

#[test]
fn elementwise_primitives() {
    let x = randn(&[2, 4, 4], 1);
    let other = randn(&[2, 4, 4], 2);
    check("add", &x, |g, x| {
        let c = g.constant(other.clone());
        let y = g.add(x, c)?;
        weighted_sum(g, y, 10)
    });
    check("sub (rhs)", &x, |g, x| {
        let c = g.constant(other.clone());
        let y = g.sub(c, x)?;
        weighted_sum(g, y, 11)
    });
    check("mul", &x, |g, x| {
        let c = g.constant(other.clone());
        let y = g.mul(x, c)?;
        weighted_sum(g, y, 12)
    });
    check("mul (square)", &x, |g, x| {
        let y = g.mul(x, x)?;
        weighted_sum(g, y, 13)
    });
    check("scale", &x, |g, x| {
        let y = g.scale(x, -0.37);
        weighted_sum(g, y, 14)
    });
    check("axpy (both sides)", &x, |g, x| {
        let y = g.axpy(x, 0.25, x)?;
        weighted_sum(g, y, 15)
    });
    check("gelu", &x.scale(2.0), |g, x| {
        let y = g.gelu(x);
        weighted_sum(g, y, 16)
    });
}

#[test]
fn channel_primitives() {
    let x = randn(&[3, 4, 4], 3);
    let wt = randn(&[2, 3], 4);
    let bias = randn(&[3], 5);
    check("channel_mix input", &x, |g, x| {
        let w = g.constant(wt.clone());
        let y = g.channel_mix(x, w)?;
        weighted_sum(g, y, 20)
    });
    check("channel_mix weight", &wt, |g, w| {
        let xv = g.constant(x.clone());
        let y = g.channel_mix(xv, w)?;
        weighted_sum(g, y, 21)
    });
    check("channel_bias input", &x, |g, x| {
        let b = g.constant(bias.clone());
        let y = g.channel_bias(x, b)?;
        weighted_sum(g, y, 22)
    });
    check("channel_bias bias", &bias, |g, b| {
        let xv = g.constant(x.clone());
        let y = g.channel_bias(xv, b)?;
        weighted_sum(g, y, 23)
    });
    check("concat", &x, |g, x| {
        let c = g.constant(randn(&[2, 4, 4], 6));
        let y = g.concat(c, x)?;
        let z = g.concat(y, x)?;
        weighted_sum(g, z, 24)
    });
}

#[test]
fn convolution_primitives() {
    for stride in [1, 2] {
        let x = randn(&[2, 8, 8], 30 + stride as u64);
        let k = randn(&[3, 2, 3, 3], 40 + stride as u64);
        check(&format!("conv input s{stride}"), &x, |g, x| {
            let kv = g.constant(k.clone());
            let y = g.conv2d(x, kv, stride)?;
            weighted_sum(g, y, 50)
        });
        check(&format!("conv kernel s{stride}"), &k, |g, k| {
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, k, stride)?;
            weighted_sum(g, y, 51)
        });
        let y0 = randn(&[3, 8 / stride, 8 / stride], 60 + stride as u64);
        check(&format!("convT input s{stride}"), &y0, |g, y| {
            let kv = g.constant(k.clone());
            let z = g.conv2d_transposed(y, kv, stride)?;
            weighted_sum(g, z, 52)
        });
        check(&format!("convT kernel s{stride}"), &k, |g, k| {
            let yv = g.constant(y0.clone());
            let z = g.conv2d_transposed(yv, k, stride)?;
            weighted_sum(g, z, 53)
        });
    }
}

#[test]
fn spectral_primitive() {
    let x = randn(&[2, 8, 8], 70);
    let re = randn(&[3, 2, 3, 3], 71);
    let im = randn(&[3, 2, 3, 3], 72);
    check("spectral input", &x, |g, x| {
        let (a, b) = (g.constant(re.clone()), g.constant(im.clone()));
        let y = g.spectral_conv(x, a, b)?;
        weighted_sum(g, y, 73)
    });
    check("spectral re", &re, |g, a| {
        let (xv, b) = (g.constant(x.clone()), g.constant(im.clone()));
        let y = g.spectral_conv(xv, a, b)?;
        weighted_sum(g, y, 74)
    });
    check("spectral im", &im, |g, b| {
        let (xv, a) = (g.constant(x.clone()), g.constant(re.clone()));
        let y = g.spectral_conv(xv, a, b)?;
        weighted_sum(g, y, 75)
    });
}

#[test]
fn reductions() {
    let x = randn(&[2, 4, 4], 80);
    check("sum", &x, |g, x| Ok(g.sum(x)));
    check("norm", &x, |g, x| Ok(g.norm(x)));
    let d = grad_check(|g, x| Ok(g.sum(x)), &x).unwrap();
    assert!(d < 1e-10, "{d}");
    let d = grad_check(
        |g, x| {
            let y = g.gelu(x);
            Ok(g.sum(y))
        },
        &x,
    )
    .unwrap();
    assert!(d < 1e-6, "{d}");
}

/// A graph mixing every primitive, with four leaves.
fn composite(g: &mut Graph, x: Var, k: Var, w: Var, re: Var, im: Var) -> Result<Var> {
    let a = g.conv2d(x, k, 1)?;
    let a = g.gelu(a);
    let b = g.conv2d(a, k, 2)?;
    let c = g.conv2d_transposed(b, k, 2)?;
    let d = g.axpy(a, 0.5, c)?;
    let e = g.spectral_conv(d, re, im)?;
    let f = g.mul(e, d)?;
    let cat = g.concat(f, x)?;
    let m = g.channel_mix(cat, w)?;
    let m = g.scale(m, 0.7);
    let n = g.norm(m);
    let s = g.sum(e);
    let s = g.scale(s, 1e-2);
    g.add(n, s)
}

#[test]
fn composite_graph_matches_central_differences() {
    let leaves = [
        randn(&[2, 8, 8], 90),
        randn(&[2, 2, 3, 3], 91).scale(0.4),
        randn(&[3, 4], 92),
        randn(&[2, 2, 3, 3], 93).scale(0.5),
        randn(&[2, 2, 3, 3], 94).scale(0.5),
    ];
    let opts = FdOptions {
        step: 1e-6,
        richardson: false,
    };
    for which in 0..leaves.len() {
        let d = grad_check_with(
            |g, v| {
                let vars: Vec<Var> = (0..leaves.len())
                    .map(|i| if i == which { v } else { g.constant(leaves[i].clone()) })
                    .collect();
                composite(g, vars[0], vars[1], vars[2], vars[3], vars[4])
            },
            &leaves[which],
            opts,
        )
        .unwrap();
        assert!(d < TOL, "leaf {which}: {d}");
    }
}

#[test]
fn reused_leaf_accumulates_per_use_gradients() {
    let xv = randn(&[2, 8, 8], 100);
    let kv = randn(&[2, 2, 3, 3], 101);
    let use_a = |g: &mut Graph, x: Var, k: Var| -> Result<Var> {
        let y = g.conv2d(x, k, 1)?;
        let y = g.gelu(y);
        Ok(g.sum(y))
    };
    let use_b = |g: &mut Graph, x: Var, k: Var| -> Result<Var> {
        let y = g.conv2d(x, k, 2)?;
        Ok(g.norm(y))
    };
    let mut g = Graph::new();
    let x = g.constant(xv.clone());
    let k = g.param(kv.clone());
    let a = use_a(&mut g, x, k).unwrap();
    let b = use_b(&mut g, x, k).unwrap();
    let loss = g.add(a, b).unwrap();
    let both = backward(&g, loss).unwrap().get(k).unwrap().clone();

    let single = |f: &dyn Fn(&mut Graph, Var, Var) -> Result<Var>| {
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let k = g.param(kv.clone());
        let l = f(&mut g, x, k).unwrap();
        backward(&g, l).unwrap().get(k).unwrap().clone()
    };
    let sum = single(&use_a).add(&single(&use_b)).unwrap();
    assert!(both.max_abs_diff(&sum).unwrap() < 1e-12 * sum.max_abs().max(1.0));
}

#[test]
fn every_trainable_leaf_gets_a_same_shaped_gradient() {
    let mut g = Graph::new();
    let x = g.param(randn(&[1, 4, 4], 110));
    let k = g.param(randn(&[1, 1, 3, 3], 111));
    let unused = g.param(randn(&[5], 112));
    let y = g.conv2d(x, k, 1).unwrap();
    let l = g.sum(y);
    let grads = backward(&g, l).unwrap();
    for v in [x, k, unused] {
        assert_eq!(grads.get(v).unwrap().shape(), g.value(v).shape());
    }
}

fn small_spec(variant: Variant) -> OperatorSpec {
    OperatorSpec {
        variant,
        layers: 2,
        width: 4,
        activation: Activation::Gelu,
        in_channels: 2,
        out_channels: 1,
    }
}

/// Relative L2 loss `|G(x) - y| / |y|` with parameter `which` replaced by `v`.
fn operator_loss(op: &NeuralOperator, which: Option<usize>, input: &Tensor, target: &Tensor) -> impl Fn(&mut Graph, Var) -> Result<Var> {
    let op = op.clone();
    let (input, target) = (input.clone(), target.clone());
    move |g, v| {
        let mut params = op.bind_constant(g);
        let x = match which {
            Some(i) => {
                params[i] = v;
                g.constant(input.clone())
            }
            None => v,
        };
        let y = op.forward_graph(g, &params, x)?;
        let t = g.constant(target.clone());
        let diff = g.sub(y, t)?;
        let n = g.norm(diff);
        Ok(g.scale(n, 1.0 / target.norm()))
    }
}

#[test]
fn operator_relative_l2_gradients() {
    for variant in [Variant::Fno { modes: 3 }, Variant::mgno(2)] {
        let mut op = NeuralOperator::init(small_spec(variant.clone()), 5).unwrap();
        // Nonzero biases so their gradients are exercised away from zero.
        let mut r = rng(6);
        for (name, p) in op.names().to_vec().iter().zip(op.params_mut()) {
            if name.ends_with("bias") || name.ends_with("beta") {
                *p = Tensor::uniform(p.shape(), 0.1, &mut r);
            }
        }
        let input = randn(&[2, 8, 8], 7);
        let target = randn(&[1, 8, 8], 8);
        let d = grad_check(operator_loss(&op, None, &input, &target), &input).unwrap();
        assert!(d < TOL, "{variant:?} input: {d}");
        for (i, name) in op.names().iter().enumerate() {
            let d = grad_check(operator_loss(&op, Some(i), &input, &target), &op.params()[i]).unwrap();
            assert!(d < TOL, "{variant:?} {name}: {d}");
        }
    }
}

#[test]
fn gradients_are_bitwise_deterministic() {
    let run = || {
        let op = NeuralOperator::init(small_spec(Variant::mgno(2)), 11).unwrap();
        let mut g = Graph::new();
        let params = op.bind(&mut g);
        let x = g.constant(randn(&[2, 8, 8], 12));
        let y = op.forward_graph(&mut g, &params, x).unwrap();
        let l = g.norm(y);
        let grads = backward(&g, l).unwrap();
        let flat: Vec<u64> = params
            .iter()
            .flat_map(|&p| grads.get(p).unwrap().data().to_vec())
            .map(f64::to_bits)
            .collect();
        (g.value(y).clone(), flat)
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn recorded_and_plain_forward_agree_bitwise() {
    let op = NeuralOperator::init(small_spec(Variant::Fno { modes: 3 }), 13).unwrap();
    let x = randn(&[2, 8, 8], 14);
    let mut g = Graph::new();
    let params = op.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = op.forward_graph(&mut g, &params, xv).unwrap();
    assert_eq!(g.value(y), &op.forward(&x).unwrap());
}
