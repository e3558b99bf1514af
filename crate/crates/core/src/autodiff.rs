//! Tape-based reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! [`backward`] is a single reverse sweep. Recorded values are never mutated.

use crate::conv;
use crate::error::{Error, Result};
use crate::spectral;
use crate::tensor::Tensor;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// `a + alpha * b`
    Axpy(usize, f64, usize),
    /// `[C, H, W] + bias[C]`
    ChannelBias(usize, usize),
    /// Pointwise `[Cout, Cin]` channel map.
    ChannelMix(usize, usize),
    Conv(usize, usize, usize),
    ConvT(usize, usize, usize),
    Gelu(usize),
    SpectralConv(usize, usize, usize),
    Concat(usize, usize),
    Sum(usize),
    Norm(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    trainable: bool,
    /// Local derivative kept from the forward pass (elementwise ops only).
    saved: Option<Tensor>,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> f64 {
    x * (0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)))
}

/// GELU value and derivative sharing one `erf` evaluation.
fn gelu_with_grad(x: f64) -> (f64, f64) {
    // Same expression as `gelu` so recorded and unrecorded passes agree bitwise.
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    (x * cdf, cdf + x * pdf)
}

/// Elementwise GELU, `0.5 x (1 + erf(x / sqrt 2))`.
pub fn gelu_tensor(x: &Tensor) -> Tensor {
    x.map(gelu)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable: false,
            saved: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            trainable,
            saved: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient from [`backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).add(self.val(b))?;
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).sub(self.val(b))?;
        Ok(self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).mul(self.val(b))?;
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.val(a).scale(c);
        self.push(out, Op::Scale(a.0, c), &[a.0])
    }

    /// Affine combination `a + alpha * b`.
    pub fn axpy(&mut self, a: Var, alpha: f64, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), |x, y| x + alpha * y)?;
        Ok(self.push(out, Op::Axpy(a.0, alpha, b.0), &[a.0, b.0]))
    }

    /// Adds a per-channel constant `bias[C]` to a `[C, H, W]` field.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.val(x).dims3()?;
        let b = self.val(bias);
        if b.shape() != [c] {
            return Err(Error::shape(format!(
                "bias {:?} does not match {} channels",
                b.shape(),
                c
            )));
        }
        let mut out = self.val(x).clone();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let bc = b.data()[ch];
            plane.iter_mut().for_each(|v| *v += bc);
        }
        Ok(self.push(out, Op::ChannelBias(x.0, bias.0), &[x.0, bias.0]))
    }

    /// Pointwise channel map with a `[Cout, Cin]` weight.
    pub fn channel_mix(&mut self, x: Var, weight: Var) -> Result<Var> {
        let out = conv::channel_mix(self.val(x), self.val(weight))?;
        Ok(self.push(out, Op::ChannelMix(x.0, weight.0), &[x.0, weight.0]))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let out = conv::conv2d_periodic(self.val(x), self.val(kernel), stride)?;
        Ok(self.push(out, Op::Conv(x.0, kernel.0, stride), &[x.0, kernel.0]))
    }

    pub fn conv2d_transposed(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let out = conv::conv2d_transposed_periodic(self.val(x), self.val(kernel), stride)?;
        Ok(self.push(out, Op::ConvT(x.0, kernel.0, stride), &[x.0, kernel.0]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        if !self.nodes[x.0].needs_grad {
            let out = gelu_tensor(self.val(x));
            return self.push(out, Op::Gelu(x.0), &[x.0]);
        }
        let xv = self.val(x);
        let mut out = Tensor::zeros(xv.shape());
        let mut deriv = Tensor::zeros(xv.shape());
        for ((o, d), &v) in out
            .data_mut()
            .iter_mut()
            .zip(deriv.data_mut().iter_mut())
            .zip(xv.data())
        {
            (*o, *d) = gelu_with_grad(v);
        }
        let var = self.push(out, Op::Gelu(x.0), &[x.0]);
        self.nodes[var.0].saved = Some(deriv);
        var
    }

    pub fn spectral_conv(&mut self, x: Var, w_re: Var, w_im: Var) -> Result<Var> {
        let out = spectral::spectral_conv(self.val(x), self.val(w_re), self.val(w_im))?;
        Ok(self.push(
            out,
            Op::SpectralConv(x.0, w_re.0, w_im.0),
            &[x.0, w_re.0, w_im.0],
        ))
    }

    /// Concatenates two fields along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).concat0(self.val(b))?;
        Ok(self.push(out, Op::Concat(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.val(x).sum());
        self.push(out, Op::Sum(x.0), &[x.0])
    }

    /// Discrete L2 norm over all elements (scalar).
    pub fn norm(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.val(x).norm());
        self.push(out, Op::Norm(x.0), &[x.0])
    }
}

/// Gradients of a scalar loss with respect to the graph's nodes.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient of `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing
            .add_inplace(&g)
            .expect("gradient shape matches its node"),
        slot @ None => *slot = Some(g),
    }
}

/// Reverse sweep from a scalar `loss`.
///
/// Every trainable leaf receives a gradient of its own shape (zero if the
/// loss does not depend on it); uses of the same leaf are summed.
pub fn backward(graph: &Graph, loss: Var) -> Result<Gradients> {
    let root = &graph.nodes[loss.0];
    if root.value.numel() != 1 {
        return Err(Error::contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            root.value.shape()
        )));
    }
    let nodes = &graph.nodes;
    let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
    grads[loss.0] = Some(Tensor::ones(root.value.shape()));

    for idx in (0..=loss.0).rev() {
        let node = &nodes[idx];
        if !node.needs_grad || matches!(node.op, Op::Leaf) {
            continue;
        }
        let Some(gout) = grads[idx].take() else {
            continue;
        };
        let wants = |i: usize| nodes[i].needs_grad;
        let val = |i: usize| &nodes[i].value;
        match node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                if wants(b) {
                    accumulate(&mut grads, b, gout.clone());
                }
                if wants(a) {
                    accumulate(&mut grads, a, gout);
                }
            }
            Op::Sub(a, b) => {
                if wants(b) {
                    accumulate(&mut grads, b, gout.scale(-1.0));
                }
                if wants(a) {
                    accumulate(&mut grads, a, gout);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(&mut grads, a, gout.mul(val(b))?);
                }
                if wants(b) {
                    accumulate(&mut grads, b, gout.mul(val(a))?);
                }
            }
            Op::Scale(a, c) => {
                if wants(a) {
                    accumulate(&mut grads, a, gout.scale(c));
                }
            }
            Op::Axpy(a, alpha, b) => {
                if wants(b) {
                    accumulate(&mut grads, b, gout.scale(alpha));
                }
                if wants(a) {
                    accumulate(&mut grads, a, gout);
                }
            }
            Op::ChannelBias(x, bias) => {
                if wants(bias) {
                    let (c, h, w) = gout.dims3()?;
                    let sums: Vec<f64> = (0..c)
                        .map(|ch| gout.data()[ch * h * w..(ch + 1) * h * w].iter().sum())
                        .collect();
                    accumulate(&mut grads, bias, Tensor::from_vec(&[c], sums)?);
                }
                if wants(x) {
                    accumulate(&mut grads, x, gout);
                }
            }
            Op::ChannelMix(x, weight) => {
                let (c_out, h, w) = gout.dims3()?;
                let xv = val(x);
                let c_in = xv.shape()[0];
                if wants(weight) {
                    let mut dw = vec![0.0; c_out * c_in];
                    conv::gemm(c_out, h * w, c_in, gout.data(), false, xv.data(), true, 0.0, &mut dw);
                    accumulate(&mut grads, weight, Tensor::from_vec(&[c_out, c_in], dw)?);
                }
                if wants(x) {
                    let mut dx = vec![0.0; c_in * h * w];
                    conv::gemm(c_in, c_out, h * w, val(weight).data(), true, gout.data(), false, 0.0, &mut dx);
                    accumulate(&mut grads, x, Tensor::from_vec(&[c_in, h, w], dx)?);
                }
            }
            Op::Conv(x, kernel, stride) => {
                let kv = val(kernel);
                if wants(kernel) {
                    let k = kv.shape()[2];
                    accumulate(&mut grads, kernel, conv::conv2d_kernel_grad(val(x), &gout, k, stride)?);
                }
                if wants(x) {
                    accumulate(&mut grads, x, conv::conv2d_transposed_periodic(&gout, kv, stride)?);
                }
            }
            Op::ConvT(x, kernel, stride) => {
                let kv = val(kernel);
                if wants(kernel) {
                    // <gout, convT(x, K)> = <conv(gout, K), x>, linear in K.
                    let k = kv.shape()[2];
                    accumulate(&mut grads, kernel, conv::conv2d_kernel_grad(&gout, val(x), k, stride)?);
                }
                if wants(x) {
                    accumulate(&mut grads, x, conv::conv2d_periodic(&gout, kv, stride)?);
                }
            }
            Op::Gelu(x) => {
                if wants(x) {
                    let d = node.saved.as_ref().expect("derivative saved in forward");
                    accumulate(&mut grads, x, d.mul(&gout)?);
                }
            }
            Op::SpectralConv(x, w_re, w_im) => {
                let (gx, gre, gim) =
                    spectral::spectral_conv_backward(val(x), val(w_re), val(w_im), &gout)?;
                if wants(x) {
                    accumulate(&mut grads, x, gx);
                }
                if wants(w_re) {
                    accumulate(&mut grads, w_re, gre);
                }
                if wants(w_im) {
                    accumulate(&mut grads, w_im, gim);
                }
            }
            Op::Concat(a, b) => {
                let ca = val(a).numel();
                if wants(a) {
                    let t = Tensor::from_vec(val(a).shape(), gout.data()[..ca].to_vec())?;
                    accumulate(&mut grads, a, t);
                }
                if wants(b) {
                    let t = Tensor::from_vec(val(b).shape(), gout.data()[ca..].to_vec())?;
                    accumulate(&mut grads, b, t);
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    accumulate(&mut grads, x, Tensor::full(val(x).shape(), gout.item()));
                }
            }
            Op::Norm(x) => {
                if wants(x) {
                    let n = node.value.item();
                    // The norm is not differentiable at 0; use the zero subgradient.
                    let c = if n > 0.0 { gout.item() / n } else { 0.0 };
                    accumulate(&mut grads, x, val(x).scale(c));
                }
            }
        }
    }

    for (idx, node) in nodes.iter().enumerate() {
        if node.trainable {
            if idx > loss.0 || grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        } else if !matches!(node.op, Op::Leaf) {
            grads[idx] = None;
        }
    }
    Ok(Gradients { grads })
}

/// Finite-difference scheme used by [`grad_check_with`].
#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// Combine steps `h` and `h/2` to cancel the `O(h^2)` term.
    pub richardson: bool,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-3,
            richardson: true,
        }
    }
}

/// Central-difference estimate of the gradient of `f` at `point`.
pub fn finite_difference<F>(f: &F, point: &Tensor, opts: FdOptions) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };
    let central = |i: usize, h: f64| -> Result<f64> {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        Ok((eval(plus)? - eval(minus)?) / (2.0 * h))
    };
    let mut out = Tensor::zeros(point.shape());
    for i in 0..point.numel() {
        let d = if opts.richardson {
            let coarse = central(i, opts.step)?;
            let fine = central(i, opts.step / 2.0)?;
            (4.0 * fine - coarse) / 3.0
        } else {
            central(i, opts.step)?
        };
        out.data_mut()[i] = d;
    }
    Ok(out)
}

/// Analytic gradient of the scalar function `f` at `point`.
pub fn analytic_gradient<F>(f: &F, point: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let mut grads = backward(&g, y)?;
    Ok(grads.take(x).expect("trainable leaf has a gradient"))
}

/// Largest per-coordinate relative discrepancy between the analytic gradient
/// and a finite-difference estimate:
/// `max_i |a_i - d_i| / (|a_i| + floor)` with
/// `floor = max(1e-12, 1e-6 * max_j |a_j|)`.
///
/// The floor keeps coordinates whose true derivative is zero from comparing
/// rounding noise against 1e-12.
pub fn grad_check_with<F>(f: F, point: &Tensor, opts: FdOptions) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, point)?;
    let numeric = finite_difference(&f, point, opts)?;
    let floor = (1e-6 * analytic.max_abs()).max(1e-12);
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, d)| (a - d).abs() / (a.abs() + floor))
        .fold(0.0, f64::max))
}

/// [`grad_check_with`] using Richardson-extrapolated central differences.
pub fn grad_check<F>(f: F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(f, point, FdOptions::default())
}
