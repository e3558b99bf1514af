//! Autoregressive rollout, relative L2 metrics, data-size convergence
//! orders and the linear-versus-exponential error-growth fit.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::operator::NeuralOperator;
use crate::pde::TrajectoryDataset;
use crate::seed::rng_for;
use crate::tensor::Tensor;
use crate::training::{check_compatible, euler_step};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// One step of an autoregressive model.
pub trait Stepper {
    /// `u_{k+1}` from `u_k` and the forcing.
    fn advance(&self, u: &Tensor, forcing: Option<&Tensor>, dt: f64) -> Result<Tensor>;
}

impl Stepper for NeuralOperator {
    /// The Euler update recorded exactly as during recurrent training.
    fn advance(&self, u: &Tensor, forcing: Option<&Tensor>, dt: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind_constant(&mut g);
        let f = forcing.map(|f| g.constant(f.clone()));
        let uv = g.constant(u.clone());
        let next = euler_step(&mut g, self, &params, uv, f, dt)?;
        Ok(g.value(next).clone())
    }
}

/// Euler stepper around an increment function `G(u, f)`.
pub struct EulerFn<F>(pub F);

impl<F> Stepper for EulerFn<F>
where
    F: Fn(&Tensor, Option<&Tensor>) -> Result<Tensor>,
{
    fn advance(&self, u: &Tensor, forcing: Option<&Tensor>, dt: f64) -> Result<Tensor> {
        let incr = (self.0)(u, forcing)?;
        u.zip_map(&incr, |x, y| x + dt * y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    /// `u_0 .. u_k`; shorter than requested after a blow-up.
    pub states: Vec<Tensor>,
    /// Relative L2 error of `u_1, u_2, ..` against the truth, when compared.
    pub errors: Vec<f64>,
    /// First step whose state was not finite.
    pub blow_up: Option<usize>,
}

impl RolloutResult {
    /// Fills `errors` against `truth[k]` for every available step `k >= 1`.
    pub fn compare(&mut self, truth: &[Tensor]) -> Result<()> {
        self.errors = self
            .states
            .iter()
            .zip(truth)
            .skip(1)
            .map(|(p, t)| relative_l2(p, t))
            .collect::<Result<_>>()?;
        Ok(())
    }
}

/// `u_{k+1} = model.advance(u_k)` for `n_steps` steps, without gradients.
pub fn rollout<M: Stepper + ?Sized>(
    model: &M,
    u0: &Tensor,
    forcing: Option<&Tensor>,
    dt: f64,
    n_steps: usize,
) -> Result<RolloutResult> {
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(u0.clone());
    let mut blow_up = None;
    for k in 1..=n_steps {
        let next = model.advance(states.last().expect("non-empty"), forcing, dt)?;
        if !next.all_finite() {
            blow_up = Some(k);
            break;
        }
        states.push(next);
    }
    Ok(RolloutResult {
        states,
        errors: Vec::new(),
        blow_up,
    })
}

/// `|pred - truth| / |truth|` over all elements.
pub fn relative_l2(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    pred.expect_same_shape(truth)?;
    let tn = truth.norm();
    if tn == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(pred.sub(truth)?.norm() / tn)
}

/// Per-sample relative L2 along the leading axis, averaged.
pub fn mean_relative_l2(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    pred.expect_same_shape(truth)?;
    let b = pred.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(Error::contract("empty batch"));
    }
    let mut total = 0.0;
    for i in 0..b {
        total += relative_l2(&pred.index_axis0(i), &truth.index_axis0(i))?;
    }
    Ok(total / b as f64)
}

/// `-log(e_{i+1} / e_i) / log(N_{i+1} / N_i)` for consecutive pairs, so
/// that decreasing errors give positive orders.
pub fn convergence_order(errors: &[f64], sizes: &[f64]) -> Result<Vec<f64>> {
    if errors.len() != sizes.len() || errors.len() < 2 {
        return Err(Error::contract(format!(
            "need matching lists of at least two entries, got {} errors and {} sizes",
            errors.len(),
            sizes.len()
        )));
    }
    if errors.iter().chain(sizes).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::contract("errors and sizes must be positive"));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("sizes must be strictly increasing"));
    }
    Ok(errors
        .windows(2)
        .zip(sizes.windows(2))
        .map(|(e, n)| -(e[1] / e[0]).ln() / (n[1] / n[0]).ln())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthModel {
    Linear,
    Exponential,
}

/// Least-squares fits of `e_k ~ a + b k` and `log e_k ~ log a + c k` over
/// `k = 1..n`, both scored by their residual on the original scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub linear_a: f64,
    pub linear_b: f64,
    pub log_a: f64,
    pub exp_c: f64,
    pub rss_linear: f64,
    pub rss_exponential: f64,
    pub selected: GrowthModel,
    /// `c` for an exponential fit, `b / mean(e)` for a linear one.
    pub growth: f64,
}

/// Residuals within this relative band count as a tie, resolved as linear.
pub const GROWTH_TIE_BAND: f64 = 0.01;

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

pub fn fit_growth(errors: &[f64]) -> Result<GrowthFit> {
    if errors.len() < 4 {
        return Err(Error::contract(format!(
            "a growth fit needs at least 4 errors, got {}",
            errors.len()
        )));
    }
    if errors.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::contract("errors must be positive and finite"));
    }
    let ks: Vec<f64> = (1..=errors.len()).map(|k| k as f64).collect();
    let (a, b) = least_squares(&ks, errors);
    let logs: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (log_a, c) = least_squares(&ks, &logs);
    let rss = |f: &dyn Fn(f64) -> f64| -> f64 {
        ks.iter().zip(errors).map(|(&k, &e)| (e - f(k)).powi(2)).sum()
    };
    let rss_linear = rss(&|k| a + b * k);
    let rss_exponential = rss(&|k| (log_a + c * k).exp());
    let tie = (rss_linear - rss_exponential).abs() <= GROWTH_TIE_BAND * rss_linear.max(rss_exponential);
    let selected = if tie || rss_linear <= rss_exponential {
        GrowthModel::Linear
    } else {
        GrowthModel::Exponential
    };
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let growth = match selected {
        GrowthModel::Linear => b / mean,
        GrowthModel::Exponential => c,
    };
    Ok(GrowthFit {
        linear_a: a,
        linear_b: b,
        log_a,
        exp_c: c,
        rss_linear,
        rss_exponential,
        selected,
        growth,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub step: usize,
    /// Mean over the samples that did not blow up; `None` past the truth.
    pub mean_rel_l2: Option<f64>,
    pub samples: usize,
    pub extrapolated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBlowUp {
    pub sample: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub dt: f64,
    pub checkpoints: Vec<CheckpointRow>,
    /// Mean error at steps `1..=curve.len()` (steps with truth only).
    pub curve: Vec<f64>,
    pub blow_ups: Vec<SampleBlowUp>,
    pub samples: usize,
}

impl SuiteReport {
    pub fn error_at(&self, step: usize) -> Option<f64> {
        self.curve.get(step.checked_sub(1)?).copied()
    }

    /// `step,mean_rel_l2,samples,excluded,extrapolated` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,mean_rel_l2,samples,excluded,extrapolated\n");
        for r in &self.checkpoints {
            let e = r.mean_rel_l2.map(|v| format!("{v:.12e}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.step,
                e,
                r.samples,
                self.blow_ups.len(),
                r.extrapolated
            );
        }
        s
    }

    /// `step,mean_rel_l2` for the full curve.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,mean_rel_l2\n");
        for (k, e) in self.curve.iter().enumerate() {
            let _ = writeln!(s, "{},{e:.12e}", k + 1);
        }
        s
    }
}

/// Rolls every test sample out to the largest checkpoint and averages
/// relative errors at each step. Samples that blow up are excluded from the
/// means and listed in `blow_ups`.
pub fn evaluate_rollout_suite<M: Stepper + ?Sized>(
    model: &M,
    data: &TrajectoryDataset,
    dt: f64,
    checkpoints: &[usize],
) -> Result<SuiteReport> {
    let ratio = dt / data.meta.dt;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio {
        return Err(Error::config(
            "dt",
            format!("{dt} is not a whole multiple of the dataset spacing {}", data.meta.dt),
        ));
    }
    let stride = stride as usize;
    let n_max = checkpoints.iter().copied().max().unwrap_or(0);
    let truth_steps = ((data.frames() - 1) / stride).min(n_max);
    let forcing = data.forcing.as_ref();
    let mut sums = vec![0.0; truth_steps];
    let mut blow_ups = Vec::new();
    for s in 0..data.samples() {
        let truth: Vec<Tensor> = (0..=truth_steps).map(|k| data.frame(s, k * stride)).collect();
        let mut r = rollout(model, &truth[0], forcing, dt, n_max)?;
        if let Some(step) = r.blow_up {
            blow_ups.push(SampleBlowUp { sample: s, step });
            continue;
        }
        r.compare(&truth)?;
        for (acc, e) in sums.iter_mut().zip(&r.errors) {
            *acc += e;
        }
    }
    let used = data.samples() - blow_ups.len();
    let curve: Vec<f64> = if used == 0 {
        Vec::new()
    } else {
        sums.iter().map(|s| s / used as f64).collect()
    };
    let checkpoints = checkpoints
        .iter()
        .map(|&step| {
            let extrapolated = step > truth_steps;
            CheckpointRow {
                step,
                mean_rel_l2: if extrapolated || step == 0 {
                    None
                } else {
                    curve.get(step - 1).copied()
                },
                samples: used,
                extrapolated,
            }
        })
        .collect();
    Ok(SuiteReport {
        dt,
        checkpoints,
        curve,
        blow_ups,
        samples: data.samples(),
    })
}

/// [`evaluate_rollout_suite`] for an operator, after checking it fits the
/// dataset.
pub fn evaluate_operator(
    op: &NeuralOperator,
    data: &TrajectoryDataset,
    dt: f64,
    checkpoints: &[usize],
) -> Result<SuiteReport> {
    check_compatible(op, data)?;
    evaluate_rollout_suite(op, data, dt, checkpoints)
}

/// Largest `|G(u + eps v) - G(u)| / |eps v|` over random unit directions
/// `v`: an empirical local Lipschitz constant of the increment operator.
pub fn lipschitz_probe(
    op: &NeuralOperator,
    u: &Tensor,
    forcing: Option<&Tensor>,
    directions: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let input = |x: &Tensor| -> Result<Tensor> {
        match forcing {
            Some(f) => x.concat0(f),
            None => Ok(x.clone()),
        }
    };
    let base = op.forward(&input(u)?)?;
    let mut worst = 0.0f64;
    for d in 0..directions {
        let v = Tensor::randn(u.shape(), &mut rng_for(seed, "lipschitz", d as u64));
        let v = v.scale(eps / v.norm());
        let moved = op.forward(&input(&u.add(&v)?)?)?;
        worst = worst.max(moved.sub(&base)?.norm() / eps);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_relative_errors() {
        // Sample 0: truth (1, 2, 2, 0) has norm 3, error (1, 0, 0, 0).
        // Sample 1: truth (0, 3, 4, 0) has norm 5, error (0, 0, 0, -2).
        let truth = Tensor::from_vec(&[2, 1, 2, 2], vec![1.0, 2.0, 2.0, 0.0, 0.0, 3.0, 4.0, 0.0]).unwrap();
        let pred = Tensor::from_vec(&[2, 1, 2, 2], vec![2.0, 2.0, 2.0, 0.0, 0.0, 3.0, 4.0, -2.0]).unwrap();
        let want = (1.0 / 3.0 + 2.0 / 5.0) / 2.0;
        assert!((mean_relative_l2(&pred, &truth).unwrap() - want).abs() < 1e-14);
        assert_eq!(mean_relative_l2(&truth, &truth).unwrap(), 0.0);
        assert_eq!(mean_relative_l2(&truth.scale(2.0), &truth).unwrap(), 1.0);
        let zero = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(mean_relative_l2(&zero, &zero), Err(Error::ZeroReference)));
    }

    #[test]
    fn orders() {
        let o = convergence_order(&[8.2e-3, 3.5e-3], &[250.0, 500.0]).unwrap();
        // ln(8.2 / 3.5) / ln 2; published as 1.228.
        assert!((o[0] - 1.228_268_987_673).abs() < 1e-10, "{}", o[0]);
        assert!((o[0] - 1.228).abs() < 0.01);
        assert_eq!(convergence_order(&[0.1, 0.1], &[1.0, 2.0]).unwrap(), vec![0.0]);
        assert_eq!(convergence_order(&[0.4, 0.2, 0.1], &[1.0, 2.0, 4.0]).unwrap(), vec![1.0, 1.0]);
        assert!(convergence_order(&[0.1, -0.1], &[1.0, 2.0]).is_err());
        assert!(convergence_order(&[0.1, 0.1], &[2.0, 1.0]).is_err());
        assert!(convergence_order(&[0.1], &[1.0]).is_err());
    }

    #[test]
    fn exact_linear_and_geometric_series() {
        let lin: Vec<f64> = (1..=20).map(|k| 0.1 * k as f64).collect();
        let f = fit_growth(&lin).unwrap();
        assert_eq!(f.selected, GrowthModel::Linear);
        assert!((f.linear_b - 0.1).abs() < 1e-10);
        assert!(f.linear_a.abs() < 1e-10);
        let geo: Vec<f64> = (1..=20).map(|k| 0.01 * 1.2f64.powi(k)).collect();
        let f = fit_growth(&geo).unwrap();
        assert_eq!(f.selected, GrowthModel::Exponential);
        assert!((f.exp_c - 1.2f64.ln()).abs() < 1e-10);
        assert!((f.log_a - 0.01f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn constant_series_is_linear_with_zero_slope() {
        let f = fit_growth(&[0.3; 8]).unwrap();
        assert_eq!(f.selected, GrowthModel::Linear);
        assert_eq!(f.linear_b, 0.0);
        assert_eq!(f.growth, 0.0);
        assert!(fit_growth(&[0.1, 0.2, 0.3]).is_err());
        assert!(fit_growth(&[0.1, 0.2, 0.0, 0.3]).is_err());
    }
}
