//! Teacher-forcing and recurrent rollout training of the Euler update
//! `u_{n+1} = u_n + dt * G(u_n, f)`.
//!
//! Both strategies share [`euler_step`] and [`window_loss`]; they differ
//! only in what is fed into step `n`: the true frame (teacher forcing) or
//! the previous prediction (recurrent). Inference uses the same
//! [`euler_step`], so training-time and rollout dynamics are one code path.
//!
//! The batching unit is a whole trajectory. Each sample gets its own graph;
//! gradients are summed over the batch in sample order and scaled by
//! `1 / batch`.

pub mod optim;

pub use optim::{
    adamw_step, clip_global_norm, global_norm, onecycle_lr, onecycle_peak_step, AdamConfig,
    OptimizerState,
};

use crate::autodiff::{backward, Graph, Var};
use crate::error::{Error, Result};
use crate::operator::NeuralOperator;
use crate::pde::TrajectoryDataset;
use crate::seed::rng_for;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Gradient norms above this are reported as exploding.
pub const EXPLODING_GRAD_NORM: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TeacherForcing,
    Recurrent,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::TeacherForcing => "teacher_forcing",
            Strategy::Recurrent => "recurrent",
        }
    }

    /// Gradient clipping used when a config does not choose one.
    pub fn default_clip(self) -> Option<f64> {
        match self {
            Strategy::TeacherForcing => None,
            Strategy::Recurrent => Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Model time step; a whole multiple of the dataset frame spacing.
    pub dt: f64,
    /// Steps per training window.
    pub window: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(strategy: Strategy) -> Self {
        TrainConfig {
            strategy,
            dt: 0.2,
            window: 10,
            epochs: 100,
            batch_size: 10,
            peak_lr: 1e-3,
            weight_decay: 1e-5,
            clip_norm: strategy.default_clip(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config("window", "must be at least 1"));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("dt", format!("must be positive, got {}", self.dt)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::config("peak_lr", "must be non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// One epoch of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean window loss over the epoch's samples, before each update.
    pub train_loss: f64,
    pub wall_ms: u64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.train_loss)
    }
}

/// `sum_n |pred_n - truth_n| / |truth_n|` over the leading axis.
pub fn loss_rollout(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    pred.expect_same_shape(truth)?;
    let n = pred.shape().first().copied().unwrap_or(0);
    let mut total = 0.0;
    for k in 0..n {
        let t = truth.index_axis0(k);
        let tn = t.norm();
        if tn == 0.0 {
            return Err(Error::ZeroReference);
        }
        total += pred.index_axis0(k).sub(&t)?.norm() / tn;
    }
    Ok(total)
}

/// Records `|pred - truth| / |truth|`.
pub fn relative_l2_term(g: &mut Graph, pred: Var, truth: &Tensor) -> Result<Var> {
    let tn = truth.norm();
    if tn == 0.0 {
        return Err(Error::ZeroReference);
    }
    let t = g.constant(truth.clone());
    let diff = g.sub(pred, t)?;
    let n = g.norm(diff);
    Ok(g.scale(n, 1.0 / tn))
}

/// Records `u + dt * G(u, f)`, with `f` appended as extra input channels.
pub fn euler_step(
    g: &mut Graph,
    op: &NeuralOperator,
    params: &[Var],
    u: Var,
    forcing: Option<Var>,
    dt: f64,
) -> Result<Var> {
    let input = match forcing {
        Some(f) => g.concat(u, f)?,
        None => u,
    };
    let incr = op.forward_graph(g, params, input)?;
    g.axpy(u, dt, incr)
}

/// Recurrent unroll from `u0`; returns `u_1 .. u_n`.
pub fn unroll(
    g: &mut Graph,
    op: &NeuralOperator,
    params: &[Var],
    u0: Var,
    forcing: Option<Var>,
    dt: f64,
    n: usize,
) -> Result<Vec<Var>> {
    let mut states = Vec::with_capacity(n);
    let mut u = u0;
    for _ in 0..n {
        u = euler_step(g, op, params, u, forcing, dt)?;
        states.push(u);
    }
    Ok(states)
}

/// Records the window loss for one trajectory. `frames` holds
/// `u_0 .. u_N` spaced by `dt`.
pub fn window_loss(
    g: &mut Graph,
    op: &NeuralOperator,
    params: &[Var],
    frames: &[Tensor],
    forcing: Option<&Tensor>,
    dt: f64,
    strategy: Strategy,
) -> Result<Var> {
    if frames.len() < 2 {
        return Err(Error::contract("a training window needs at least two frames"));
    }
    let n = frames.len() - 1;
    let f = forcing.map(|f| g.constant(f.clone()));
    let u0 = g.constant(frames[0].clone());
    let preds = match strategy {
        Strategy::Recurrent => unroll(g, op, params, u0, f, dt, n)?,
        Strategy::TeacherForcing => {
            let mut preds = Vec::with_capacity(n);
            let mut input = u0;
            for k in 0..n {
                preds.push(euler_step(g, op, params, input, f, dt)?);
                if k + 1 < n {
                    input = g.constant(frames[k + 1].clone());
                }
            }
            preds
        }
    };
    let mut loss: Option<Var> = None;
    for (pred, truth) in preds.into_iter().zip(&frames[1..]) {
        let term = relative_l2_term(g, pred, truth)?;
        loss = Some(match loss {
            Some(l) => g.add(l, term)?,
            None => term,
        });
    }
    Ok(loss.expect("window is non-empty"))
}

/// Window loss and parameter gradients for one trajectory.
pub fn sample_gradient(
    op: &NeuralOperator,
    frames: &[Tensor],
    forcing: Option<&Tensor>,
    dt: f64,
    strategy: Strategy,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let params = op.bind(&mut g);
    let loss = window_loss(&mut g, op, &params, frames, forcing, dt, strategy)?;
    let value = g.value(loss).item();
    let mut grads = backward(&g, loss)?;
    let out = params
        .iter()
        .map(|&p| grads.take(p).expect("parameters are trainable"))
        .collect();
    Ok((value, out))
}

/// Window loss without recording gradients.
pub fn sample_loss(
    op: &NeuralOperator,
    frames: &[Tensor],
    forcing: Option<&Tensor>,
    dt: f64,
    strategy: Strategy,
) -> Result<f64> {
    let mut g = Graph::new();
    let params = op.bind_constant(&mut g);
    let loss = window_loss(&mut g, op, &params, frames, forcing, dt, strategy)?;
    Ok(g.value(loss).item())
}

/// Mean loss and mean gradient over the given trajectories.
pub fn batch_gradient(
    op: &NeuralOperator,
    batch: &[Vec<Tensor>],
    forcing: Option<&Tensor>,
    dt: f64,
    strategy: Strategy,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut total: Option<(f64, Vec<Tensor>)> = None;
    for frames in batch {
        let (l, g) = sample_gradient(op, frames, forcing, dt, strategy)?;
        total = Some(match total {
            None => (l, g),
            Some((acc_l, mut acc_g)) => {
                for (a, b) in acc_g.iter_mut().zip(&g) {
                    a.add_inplace(b)?;
                }
                (acc_l + l, acc_g)
            }
        });
    }
    let (l, mut g) = total.expect("batch is non-empty");
    let inv = 1.0 / batch.len() as f64;
    for t in g.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    Ok((l * inv, g))
}

/// Frame stride turning the dataset spacing into the model step `dt`.
pub fn frame_stride(data: &TrajectoryDataset, dt: f64, window: usize) -> Result<usize> {
    let ratio = dt / data.meta.dt;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio {
        return Err(Error::config(
            "dt",
            format!("{dt} is not a whole multiple of the dataset spacing {}", data.meta.dt),
        ));
    }
    let stride = stride as usize;
    if window * stride > data.frames() - 1 {
        return Err(Error::config(
            "window",
            format!(
                "{window} steps of dt {dt} need {} frames, the dataset has {}",
                window * stride + 1,
                data.frames()
            ),
        ));
    }
    Ok(stride)
}

/// Frames `u_0, u_dt, .., u_{steps dt}` of sample `s`.
pub fn sample_frames(data: &TrajectoryDataset, s: usize, stride: usize, steps: usize) -> Vec<Tensor> {
    (0..=steps).map(|k| data.frame(s, k * stride)).collect()
}

/// Checks that `op` maps `(u, f)` channels to `u` channels for `data`.
pub fn check_compatible(op: &NeuralOperator, data: &TrajectoryDataset) -> Result<()> {
    let c = data.meta.channels;
    let fc = data.forcing.as_ref().map_or(0, |f| f.shape()[0]);
    let spec = op.spec();
    if spec.in_channels != c + fc || spec.out_channels != c {
        return Err(Error::config(
            "operator",
            format!(
                "operator maps {} -> {} channels; the dataset needs {} -> {c}",
                spec.in_channels,
                spec.out_channels,
                c + fc
            ),
        ));
    }
    let [h, w] = data.meta.grid;
    spec.check_grid(h, w)
}

/// Trains `op` in place with `cfg.strategy`.
pub fn train(op: &mut NeuralOperator, data: &TrajectoryDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_callback(op, data, cfg, |_| {})
}

pub fn train_teacher_forcing(op: &mut NeuralOperator, data: &TrajectoryDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let cfg = TrainConfig {
        strategy: Strategy::TeacherForcing,
        ..cfg.clone()
    };
    train(op, data, &cfg)
}

pub fn train_recurrent(op: &mut NeuralOperator, data: &TrajectoryDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let cfg = TrainConfig {
        strategy: Strategy::Recurrent,
        ..cfg.clone()
    };
    train(op, data, &cfg)
}

/// [`train`] calling `on_epoch` after every epoch.
pub fn train_with_callback(
    op: &mut NeuralOperator,
    data: &TrajectoryDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(op, data)?;
    let stride = frame_stride(data, cfg.dt, cfg.window)?;
    let samples = data.samples();
    if samples == 0 {
        return Err(Error::config("samples", "the training set is empty"));
    }
    let windows: Vec<Vec<Tensor>> = (0..samples)
        .map(|s| sample_frames(data, s, stride, cfg.window))
        .collect();
    let forcing = data.forcing.as_ref();
    let batches_per_epoch = samples.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut state = OptimizerState::new(op.params(), AdamConfig::default());
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..samples).collect();
        order.shuffle(&mut rng_for(cfg.seed, "shuffle", epoch as u64));
        let (mut loss_sum, mut norm_sum, mut lr) = (0.0, 0.0, 0.0);
        let mut worst_norm = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            lr = onecycle_lr(step, total_steps, cfg.peak_lr)?;
            let batch: Vec<Vec<Tensor>> = chunk.iter().map(|&s| windows[s].clone()).collect();
            let (loss, mut grads) = batch_gradient(op, &batch, forcing, cfg.dt, cfg.strategy)?;
            let norm = global_norm(&grads);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::TrainingDiverged { epoch: epoch + 1 });
            }
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adamw_step(op.params_mut(), &grads, &mut state, lr, cfg.weight_decay)?;
            loss_sum += loss * chunk.len() as f64;
            norm_sum += norm;
            worst_norm = worst_norm.max(norm);
            step += 1;
        }
        let warning = (worst_norm > EXPLODING_GRAD_NORM)
            .then(|| format!("exploding gradient: global norm {worst_norm:.3e}"));
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / samples as f64,
            wall_ms: started.elapsed().as_millis() as u64,
            grad_norm: norm_sum / batches_per_epoch as f64,
            warning,
        };
        on_epoch(&record);
        report.history.push(record);
    }
    Ok(report)
}
