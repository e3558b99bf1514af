//! AdamW with decoupled weight decay, the one-cycle schedule and global-norm
//! gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update: `p <- p (1 - lr wd)`, then the bias-corrected Adam step.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.expect_same_shape(g)?;
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Step at which the one-cycle schedule peaks.
pub fn onecycle_peak_step(total_steps: usize) -> usize {
    ((0.3 * total_steps as f64).floor() as usize).min(total_steps.saturating_sub(1))
}

/// One-cycle learning rate: cosine warm-up from `peak/25` to `peak` over
/// the first 30% of steps, then cosine annealing to `peak/1e4` at the last
/// step.
pub fn onecycle_lr(step: usize, total_steps: usize, peak_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::contract(format!(
            "step {step} outside a schedule of {total_steps} steps"
        )));
    }
    let start = peak_lr / 25.0;
    let end = peak_lr / 1e4;
    let peak = onecycle_peak_step(total_steps);
    let cos_ramp = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (PI * frac).cos());
    Ok(if step < peak {
        cos_ramp(start, peak_lr, step as f64 / peak as f64)
    } else if step == peak {
        peak_lr
    } else {
        let span = (total_steps - 1 - peak) as f64;
        cos_ramp(peak_lr, end, (step - peak) as f64 / span)
    })
}

/// Euclidean norm of all gradient entries together.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![rnd(&[3, 4], 1)];
        let before = p.clone();
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        adamw_step(&mut p, &[Tensor::zeros(&[3, 4])], &mut s, 1e-3, 0.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn decay_only_scales_exactly() {
        let mut p = vec![rnd(&[5], 2)];
        let before = p[0].clone();
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        let (lr, wd) = (1e-2, 0.5);
        adamw_step(&mut p, &[Tensor::zeros(&[5])], &mut s, lr, wd).unwrap();
        for (a, b) in p[0].data().iter().zip(before.data()) {
            assert_eq!(*a, b * (1.0 - lr * wd));
        }
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g and v_hat = g^2 after one step, so the update is
        // -lr g / (|g| + eps).
        let mut p = vec![rnd(&[6], 3)];
        let before = p[0].clone();
        let g = rnd(&[6], 4).scale(1e-3);
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        let lr = 1e-3;
        adamw_step(&mut p, std::slice::from_ref(&g), &mut s, lr, 0.0).unwrap();
        for i in 0..6 {
            let gi = g.data()[i];
            let want = before.data()[i] - lr * gi / (gi.abs() + 1e-8);
            assert!((p[0].data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_shape() {
        let (total, peak) = (1000, 1e-3);
        assert_eq!(onecycle_lr(300, total, peak).unwrap(), peak);
        assert!((onecycle_lr(0, total, peak).unwrap() - peak / 25.0).abs() < 1e-18);
        assert!(onecycle_lr(total - 1, total, peak).unwrap() <= peak / 1e3);
        let lrs: Vec<f64> = (0..total).map(|s| onecycle_lr(s, total, peak).unwrap()).collect();
        assert!(lrs[..=300].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[300..].windows(2).all(|w| w[1] < w[0]));
        assert!(onecycle_lr(total, total, peak).is_err());
    }

    #[test]
    fn tiny_schedules() {
        assert_eq!(onecycle_lr(0, 1, 0.1).unwrap(), 0.1);
        assert_eq!(onecycle_lr(0, 2, 0.1).unwrap(), 0.1);
        assert!((onecycle_lr(1, 2, 0.1).unwrap() - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![rnd(&[4, 4], 5).scale(10.0), rnd(&[7], 6)];
        let before = global_norm(&g);
        assert_eq!(clip_global_norm(&mut g, 1.0), before);
        assert!(global_norm(&g) <= 1.0 + 1e-12);
        let mut small = vec![Tensor::full(&[2], 0.1)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0], Tensor::full(&[2], 0.1));
    }
}
