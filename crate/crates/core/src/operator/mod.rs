//! Neural operators `G_theta` on periodic `[C, H, W]` fields.
//!
//! Every layer computes `g <- act(K g + alpha g + beta)`, where `K` is either
//! a truncated spectral convolution (FNO) or a multigrid V-cycle (MgNO) and
//! `alpha g + beta` is a learnable pointwise affine bias. Lifting and the
//! output head `Q` are pointwise affine channel maps.

mod checkpoint;
pub mod mgno;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Amplitude of the uniform noise added to the identity `alpha` mixing.
pub const ALPHA_NOISE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    /// Bypasses the nonlinearity; used by tests to make layers affine.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    Fno {
        modes: usize,
    },
    Mgno {
        levels: usize,
        /// `(pre, post)` smoothing counts per level, finest first.
        pattern: Vec<[usize; 2]>,
        kernel_size: usize,
    },
}

impl Variant {
    /// MgNO with `levels` levels and the default smoothing pattern.
    pub fn mgno(levels: usize) -> Variant {
        Variant::Mgno {
            levels,
            pattern: default_pattern(levels),
            kernel_size: 3,
        }
    }
}

/// `(J-2)` finest levels with one pre-smoothing step, then two steps on each
/// of the two coarsest levels. For `J = 5` this is
/// `[[1,0],[1,0],[1,0],[2,0],[2,0]]`.
pub fn default_pattern(levels: usize) -> Vec<[usize; 2]> {
    match levels {
        0 => vec![],
        1 => vec![[2, 0]],
        j => {
            let mut p = vec![[1, 0]; j - 2];
            p.extend([[2, 0], [2, 0]]);
            p
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub variant: Variant,
    pub layers: usize,
    pub width: usize,
    pub activation: Activation,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl OperatorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(field, reason));
        if self.layers == 0 {
            return bad("layers", "must be at least 1");
        }
        if self.width == 0 {
            return bad("width", "must be at least 1");
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channels", "must be at least 1");
        }
        match &self.variant {
            Variant::Fno { modes } => {
                if *modes == 0 {
                    return bad("modes", "must be at least 1");
                }
            }
            Variant::Mgno {
                levels,
                pattern,
                kernel_size,
            } => {
                if *levels == 0 {
                    return bad("levels", "must be at least 1");
                }
                if pattern.len() != *levels {
                    return bad("pattern", "needs exactly one (pre, post) entry per level");
                }
                if kernel_size % 2 == 0 {
                    return bad("kernel_size", "must be odd");
                }
            }
        }
        Ok(())
    }

    /// Checks that an `H x W` grid is admissible for this operator.
    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        match &self.variant {
            Variant::Fno { modes } => {
                if !h.is_power_of_two() || !w.is_power_of_two() {
                    return Err(Error::UnsupportedSize(format!(
                        "FNO needs power-of-two grids, got {h}x{w}"
                    )));
                }
                if 2 * modes > h || 2 * modes > w {
                    return Err(Error::shape(format!(
                        "{modes} modes do not fit a {h}x{w} grid"
                    )));
                }
            }
            Variant::Mgno { levels, .. } => {
                let d = 1usize << (levels - 1);
                if h % d != 0 || w % d != 0 {
                    return Err(Error::shape(format!(
                        "grid {h}x{w} is not divisible by 2^{} for {levels} levels",
                        levels - 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        parameter_table(self)
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    Uniform { fan_in: usize },
    IdentityPlusNoise,
    Zero,
}

#[derive(Clone, Debug)]
struct ParamDecl {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Parameter indices of one MgNO level.
#[derive(Clone, Debug, Default)]
pub(crate) struct LevelIdx {
    /// `(A, B)` per smoothing step on the way down (or the whole coarse solve).
    pub pre: Vec<(usize, usize)>,
    pub post: Vec<(usize, usize)>,
    /// `(A, R)` used to restrict the residual to the next level.
    pub restrict: Option<(usize, usize)>,
    pub prolong: Option<usize>,
}

#[derive(Clone, Debug)]
enum KernelIdx {
    Fno { re: usize, im: usize },
    Mgno(Vec<LevelIdx>),
}

#[derive(Clone, Debug)]
struct LayerIdx {
    kernel: KernelIdx,
    alpha: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    lift_w: usize,
    lift_b: usize,
    layers: Vec<LayerIdx>,
    q_w: usize,
    q_b: usize,
}

struct Builder {
    decls: Vec<ParamDecl>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.decls.push(ParamDecl {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.decls.len() - 1
    }
}

fn build_layout(spec: &OperatorSpec) -> (Layout, Vec<ParamDecl>) {
    let n = spec.width;
    let mut b = Builder { decls: Vec::new() };
    let lift_w = b.add(
        "lift.weight".into(),
        &[n, spec.in_channels],
        Init::Uniform {
            fan_in: spec.in_channels,
        },
    );
    let lift_b = b.add("lift.bias".into(), &[n], Init::Zero);
    let mut layers = Vec::with_capacity(spec.layers);
    for l in 0..spec.layers {
        let kernel = match &spec.variant {
            Variant::Fno { modes } => {
                let shape = [n, n, *modes, *modes];
                let init = Init::Uniform { fan_in: n };
                let re = b.add(format!("layer{l}.spectral.re"), &shape, init);
                let im = b.add(format!("layer{l}.spectral.im"), &shape, init);
                KernelIdx::Fno { re, im }
            }
            Variant::Mgno {
                levels,
                pattern,
                kernel_size,
            } => {
                let k = *kernel_size;
                let shape = [n, n, k, k];
                let init = Init::Uniform { fan_in: n * k * k };
                let mut idx = Vec::with_capacity(*levels);
                for (lv, &[pre, post]) in pattern.iter().enumerate() {
                    let coarsest = lv + 1 == *levels;
                    let mut level = LevelIdx::default();
                    let pre_steps = if coarsest { pre + post } else { pre };
                    for s in 0..pre_steps {
                        let a = b.add(format!("layer{l}.level{lv}.pre{s}.A"), &shape, init);
                        let bk = b.add(format!("layer{l}.level{lv}.pre{s}.B"), &shape, init);
                        level.pre.push((a, bk));
                    }
                    if !coarsest {
                        let a = b.add(format!("layer{l}.level{lv}.restrict.A"), &shape, init);
                        let r = b.add(format!("layer{l}.level{lv}.restrict.R"), &shape, init);
                        level.restrict = Some((a, r));
                        level.prolong =
                            Some(b.add(format!("layer{l}.level{lv}.prolong.P"), &shape, init));
                        for s in 0..post {
                            let a = b.add(format!("layer{l}.level{lv}.post{s}.A"), &shape, init);
                            let bk = b.add(format!("layer{l}.level{lv}.post{s}.B"), &shape, init);
                            level.post.push((a, bk));
                        }
                    }
                    idx.push(level);
                }
                KernelIdx::Mgno(idx)
            }
        };
        let alpha = b.add(format!("layer{l}.alpha"), &[n, n], Init::IdentityPlusNoise);
        let beta = b.add(format!("layer{l}.beta"), &[n], Init::Zero);
        layers.push(LayerIdx {
            kernel,
            alpha,
            beta,
        });
    }
    let q_w = b.add(
        "q.weight".into(),
        &[spec.out_channels, n],
        Init::Uniform { fan_in: n },
    );
    let q_b = b.add("q.bias".into(), &[spec.out_channels], Init::Zero);
    (
        Layout {
            lift_w,
            lift_b,
            layers,
            q_w,
            q_b,
        },
        b.decls,
    )
}

fn parameter_table(spec: &OperatorSpec) -> Vec<ParamDecl> {
    build_layout(spec).1
}

/// A neural operator: a spec plus its parameters in deterministic order.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralOperator {
    spec: OperatorSpec,
    seed: u64,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl NeuralOperator {
    /// Draws fresh parameters. Kernels and spectral weights are uniform in
    /// `[-s, s]` with `s = 1/sqrt(fan_in)`, `alpha` is the identity plus
    /// uniform noise of amplitude [`ALPHA_NOISE`], biases start at zero.
    pub fn init(spec: OperatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (_, decls) = build_layout(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(decls.len());
        let mut params = Vec::with_capacity(decls.len());
        for d in decls {
            let t = match d.init {
                Init::Uniform { fan_in } => {
                    Tensor::uniform(&d.shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
                }
                Init::IdentityPlusNoise => {
                    let noise = Tensor::uniform(&d.shape, ALPHA_NOISE, &mut rng);
                    Tensor::eye(d.shape[0]).add(&noise)?
                }
                Init::Zero => Tensor::zeros(&d.shape),
            };
            names.push(d.name);
            params.push(t);
        }
        Ok(NeuralOperator {
            spec,
            seed,
            names,
            params,
        })
    }

    /// Rebuilds an operator from stored parameters, checking every shape.
    pub fn from_parameters(spec: OperatorSpec, seed: u64, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let (_, decls) = build_layout(&spec);
        if decls.len() != params.len() {
            return Err(Error::shape(format!(
                "spec expects {} parameter tensors, got {}",
                decls.len(),
                params.len()
            )));
        }
        for (d, p) in decls.iter().zip(&params) {
            if d.shape != p.shape() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    d.name,
                    p.shape(),
                    d.shape
                )));
            }
        }
        Ok(NeuralOperator {
            spec,
            seed,
            names: decls.into_iter().map(|d| d.name).collect(),
            params,
        })
    }

    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_constant(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Records `G_theta(input)` on `g` using parameter handles from
    /// [`bind`](Self::bind) or [`bind_constant`](Self::bind_constant).
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        let (c, h, w) = g.value(input).dims3()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "operator expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::contract("parameter handles do not match the operator"));
        }
        self.spec.check_grid(h, w)?;
        let (layout, _) = build_layout(&self.spec);
        let p = |i: usize| params[i];

        let lifted = g.channel_mix(input, p(layout.lift_w))?;
        let mut x = g.channel_bias(lifted, p(layout.lift_b))?;
        for layer in &layout.layers {
            let kx = match &layer.kernel {
                KernelIdx::Fno { re, im } => g.spectral_conv(x, p(*re), p(*im))?,
                KernelIdx::Mgno(levels) => mgno::vcycle_indexed(g, params, levels, x, None)?,
            };
            let mixed = g.channel_mix(x, p(layer.alpha))?;
            let bias = g.channel_bias(mixed, p(layer.beta))?;
            let pre = g.add(kx, bias)?;
            x = match self.spec.activation {
                Activation::Gelu => g.gelu(pre),
                Activation::Identity => pre,
            };
        }
        let out = g.channel_mix(x, p(layout.q_w))?;
        g.channel_bias(out, p(layout.q_b))
    }

    /// Evaluates `G_theta(input)` without recording gradients.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind_constant(&mut g);
        let x = g.constant(input.clone());
        let y = self.forward_graph(&mut g, &params, x)?;
        Ok(g.value(y).clone())
    }

    /// Internal grid shapes visited by each V-cycle of the first layer, in
    /// visiting order. Empty for FNO.
    pub fn vcycle_trace(&self, input: &Tensor) -> Result<Vec<[usize; 3]>> {
        let (layout, _) = build_layout(&self.spec);
        let KernelIdx::Mgno(levels) = &layout.layers[0].kernel else {
            return Ok(Vec::new());
        };
        let mut g = Graph::new();
        let params = self.bind_constant(&mut g);
        let lifted = g.constant(input.clone());
        let x = g.channel_mix(lifted, params[layout.lift_w])?;
        let mut trace = Vec::new();
        mgno::vcycle_indexed(&mut g, &params, levels, x, Some(&mut trace))?;
        Ok(trace)
    }
}

/// Parameter index tables of the first MgNO layer, exposed to the V-cycle
/// unit tests.
#[cfg(test)]
pub(crate) fn first_layer_levels(spec: &OperatorSpec) -> Vec<LevelIdx> {
    match &build_layout(spec).0.layers[0].kernel {
        KernelIdx::Mgno(l) => l.clone(),
        KernelIdx::Fno { .. } => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fno(l: usize, n: usize, m: usize) -> OperatorSpec {
        OperatorSpec {
            variant: Variant::Fno { modes: m },
            layers: l,
            width: n,
            activation: Activation::Gelu,
            in_channels: 1,
            out_channels: 1,
        }
    }

    #[test]
    fn default_patterns() {
        assert_eq!(
            default_pattern(5),
            vec![[1, 0], [1, 0], [1, 0], [2, 0], [2, 0]]
        );
        assert_eq!(default_pattern(3), vec![[1, 0], [2, 0], [2, 0]]);
        assert_eq!(default_pattern(1), vec![[2, 0]]);
    }

    #[test]
    fn fno_parameter_count_closed_form() {
        let (l, n, m) = (4, 32, 16);
        let per_layer = n * n * m * m * 2 + n * n + n;
        let want = l * per_layer + (n + n) + (n + 1);
        assert_eq!(fno(l, n, m).parameter_count(), want);
        let op = NeuralOperator::init(fno(l, n, m), 3).unwrap();
        assert_eq!(op.parameter_count(), want);
    }

    #[test]
    fn mgno_parameter_count_closed_form() {
        let (l, n, k) = (4, 16, 3);
        let spec = OperatorSpec {
            variant: Variant::mgno(3),
            layers: l,
            width: n,
            activation: Activation::Gelu,
            in_channels: 1,
            out_channels: 1,
        };
        // Pattern [[1,0],[2,0],[2,0]]: levels 0 and 1 have one or two
        // smoothing pairs plus A, R and P; the coarsest level has two pairs.
        let kernels = (2 + 3) + (4 + 3) + 4;
        let per_layer = kernels * n * n * k * k + n * n + n;
        assert_eq!(spec.parameter_count(), l * per_layer + 2 * n + n + 1);
    }

    #[test]
    fn init_is_deterministic() {
        let a = NeuralOperator::init(fno(2, 4, 2), 11).unwrap();
        let b = NeuralOperator::init(fno(2, 4, 2), 11).unwrap();
        let c = NeuralOperator::init(fno(2, 4, 2), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_init_moment() {
        let n = 100;
        let spec = fno(1, n, 4);
        let op = NeuralOperator::init(spec, 5).unwrap();
        let t = op.param("layer0.spectral.re").unwrap();
        assert!(t.numel() >= 100_000);
        let s = 1.0 / (n as f64).sqrt();
        let std = (t.data().iter().map(|x| x * x).sum::<f64>() / t.numel() as f64).sqrt();
        let want = s / 3f64.sqrt();
        assert!((std - want).abs() < 0.1 * want, "{std} vs {want}");
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut op = NeuralOperator::init(fno(2, 4, 2), 1).unwrap();
        for p in op.params_mut() {
            *p = Tensor::zeros(p.shape());
        }
        let x = Tensor::randn(&[1, 8, 8], &mut ChaCha8Rng::seed_from_u64(0));
        let y = op.forward(&x).unwrap();
        assert_eq!(y, Tensor::zeros(&[1, 8, 8]));
    }

    #[test]
    fn affine_pass_through() {
        let mut spec = fno(1, 1, 2);
        spec.activation = Activation::Identity;
        let mut op = NeuralOperator::init(spec, 1).unwrap();
        for (name, p) in op.names.clone().iter().zip(op.params_mut()) {
            *p = match name.as_str() {
                "lift.weight" | "q.weight" | "layer0.alpha" => Tensor::ones(&[1, 1]),
                _ => Tensor::zeros(p.shape()),
            };
        }
        let x = Tensor::randn(&[1, 8, 8], &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(op.forward(&x).unwrap(), x);
    }

    #[test]
    fn grid_checks() {
        let spec = OperatorSpec {
            variant: Variant::mgno(3),
            layers: 1,
            width: 2,
            activation: Activation::Gelu,
            in_channels: 1,
            out_channels: 1,
        };
        assert!(spec.check_grid(8, 8).is_ok());
        assert!(matches!(spec.check_grid(6, 8), Err(Error::Shape(_))));
        let op = NeuralOperator::init(spec, 0).unwrap();
        assert!(op.forward(&Tensor::zeros(&[1, 6, 6])).is_err());
        assert!(op.forward(&Tensor::zeros(&[2, 8, 8])).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = fno(0, 4, 2);
        assert!(matches!(s.validate(), Err(Error::Config { .. })));
        s.layers = 1;
        s.width = 0;
        assert!(s.validate().is_err());
        let s = OperatorSpec {
            variant: Variant::Mgno {
                levels: 2,
                pattern: vec![[1, 0]],
                kernel_size: 3,
            },
            ..fno(1, 2, 2)
        };
        assert!(s.validate().is_err());
    }
}
