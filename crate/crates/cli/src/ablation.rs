//! Sweeps over the training window, the model step or the training-set
//! size, run for each strategy.
//!
//! Every point is an ordinary run: its config is the base config with the
//! axis value applied and the training horizon cut to what the window
//! needs, and its seeds derive from the same master seed. A point therefore
//! reproduces the standalone run with that config, which is also what the
//! optional run cache is keyed on.

use crate::config::{AblationAxis, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::pipeline::{
    data_base, ensure_dir, evaluate_model, generate_split, train_into, write_dataset, write_eval_report,
    write_file, write_json, EvalReport, Split,
};
use crate::svg::{line_chart, Series};
use rno_core::evaluation::convergence_order;
use rno_core::pde::TrajectoryDataset;
use rno_core::training::Strategy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub value: f64,
    pub strategy: Strategy,
    /// `"ok"` or the error that stopped this point.
    pub status: String,
    /// Error at the largest checkpoint (the extrapolation step).
    pub target_error: Option<f64>,
    /// Largest per-step error over the evaluated horizon.
    pub max_error: Option<f64>,
    pub blow_ups: usize,
    pub checkpoints: Vec<(usize, Option<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyOrders {
    pub strategy: Strategy,
    pub sizes: Vec<f64>,
    pub orders: Vec<f64>,
    pub mean_order: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub values: Vec<f64>,
    pub points: Vec<AblationPoint>,
    /// Data-size sweeps only.
    pub orders: Vec<StrategyOrders>,
    pub warnings: Vec<String>,
}

impl AblationReport {
    pub fn point(&self, value: f64, strategy: Strategy) -> Option<&AblationPoint> {
        self.points.iter().find(|p| p.value == value && p.strategy == strategy)
    }

    pub fn orders_for(&self, strategy: Strategy) -> Option<&StrategyOrders> {
        self.orders.iter().find(|o| o.strategy == strategy)
    }
}

fn as_count(axis: &str, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(CliError::config(format!("{axis} values must be positive integers, got {v}")))
    }
}

/// The run config of one sweep point.
pub fn point_config(base: &ExperimentConfig, value: f64, strategy: Strategy) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    c.ablation = Default::default();
    c.train.strategy = strategy;
    match base.ablation.axis {
        AblationAxis::None => {}
        AblationAxis::Window => c.train.window = as_count("window", value)?,
        AblationAxis::DataSize => c.dataset.train_samples = as_count("data_size", value)?,
        AblationAxis::Timestep => {
            if !(value > 0.0) {
                return Err(CliError::config(format!("timestep values must be positive, got {value}")));
            }
            c.train.dt = value;
            c.evaluation.dt = None;
            c.train.window = (base.ablation.train_horizon / value).round().max(1.0) as usize;
            let steps = (base.ablation.eval_horizon / value).round().max(1.0) as usize;
            c.evaluation.checkpoints = vec![steps];
            c.dataset.test_horizon = c.dataset.test_horizon.max(base.ablation.eval_horizon);
        }
    }
    c.dataset.train_horizon = c.train.window as f64 * c.train.dt;
    c.validate()?;
    Ok(c)
}

/// Cache key: the point config without its output directory.
pub fn run_key(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.out = PathBuf::new();
    c.name.clear();
    hex::encode(Sha256::digest(c.to_json().as_bytes()))
}

/// Trains and evaluates `cfg` on the given data, writing into `dir`. With a
/// cache directory, a finished run with the same key is reused instead.
pub fn run_point(
    cfg: &ExperimentConfig,
    train: &TrajectoryDataset,
    test: &TrajectoryDataset,
    dir: &Path,
    cache: Option<&Path>,
) -> Result<EvalReport> {
    let label = cfg.train.strategy.name();
    let cached = cache.map(|c| c.join(run_key(cfg)).join("report.json"));
    if let Some(path) = &cached {
        if let Ok(text) = std::fs::read_to_string(path) {
            if let Ok(report) = serde_json::from_str::<EvalReport>(&text) {
                write_eval_report(&report, &dir.join("eval"))?;
                return Ok(report);
            }
        }
    }
    ensure_dir(dir)?;
    write_file(&dir.join("config.json"), cfg.to_json())?;
    let (op, _) = train_into(cfg, train, dir)?;
    let report = evaluate_model(cfg, &op, test, label)?;
    write_eval_report(&report, &dir.join("eval"))?;
    if let Some(path) = cached {
        write_json(&path, &report)?;
        write_file(&path.with_file_name("config.json"), cfg.to_json())?;
    }
    Ok(report)
}

fn fmt_value(v: f64) -> String {
    let s = format!("{v}");
    s.replace('.', "p")
}

pub fn run_ablation(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<AblationReport> {
    let ab = &cfg.ablation;
    if ab.axis == AblationAxis::None {
        return Err(CliError::config("ablation.axis is none"));
    }
    let mut point_cfgs = Vec::new();
    for &v in &ab.values {
        for &s in &ab.strategies {
            point_cfgs.push((v, s, point_config(cfg, v, s)?));
        }
    }
    let max_samples = point_cfgs.iter().map(|p| p.2.dataset.train_samples).max().unwrap_or(0);
    let train_horizon = point_cfgs.iter().map(|p| p.2.dataset.train_horizon).fold(0.0, f64::max);
    let test_horizon = point_cfgs.iter().map(|p| p.2.dataset.test_horizon).fold(0.0, f64::max);
    crate::pipeline::write_effective_config(cfg)?;
    let train = generate_split(cfg, Split::Train, max_samples, train_horizon)?;
    write_dataset(&train, &data_base(&cfg.out, Split::Train))?;
    let test = generate_split(cfg, Split::Test, cfg.dataset.test_samples, test_horizon)?;
    write_dataset(&test, &data_base(&cfg.out, Split::Test))?;

    let mut points = Vec::new();
    let mut warnings = Vec::new();
    let axis_name = serde_json::to_value(ab.axis).expect("axis serialises");
    let axis_name = axis_name.as_str().unwrap_or("axis");
    for (value, strategy, pc) in point_cfgs {
        let dir = cfg
            .out
            .join("ablation")
            .join(format!("{axis_name}-{}", fmt_value(value)))
            .join(strategy.name());
        let outcome = train
            .take(pc.dataset.train_samples)
            .map_err(CliError::from)
            .and_then(|t| run_point(&pc, &t, &test, &dir, cache));
        let point = match outcome {
            Ok(r) => {
                let target_step = pc.evaluation.checkpoints.iter().copied().max().unwrap_or(0);
                AblationPoint {
                    value,
                    strategy,
                    status: "ok".into(),
                    target_error: r.error_at(target_step),
                    max_error: r.suite.curve.iter().copied().reduce(f64::max),
                    blow_ups: r.suite.blow_ups.len(),
                    checkpoints: r.suite.checkpoints.iter().map(|c| (c.step, c.mean_rel_l2)).collect(),
                }
            }
            Err(e) => {
                warnings.push(format!("{axis_name}={value} {}: {e}", strategy.name()));
                AblationPoint {
                    value,
                    strategy,
                    status: format!("failed: {e}"),
                    target_error: None,
                    max_error: None,
                    blow_ups: 0,
                    checkpoints: Vec::new(),
                }
            }
        };
        points.push(point);
    }

    let mut orders = Vec::new();
    if ab.axis == AblationAxis::DataSize {
        for &s in &ab.strategies {
            let mut pairs: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| p.strategy == s)
                .filter_map(|p| p.target_error.filter(|e| *e > 0.0).map(|e| (p.value, e)))
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            pairs.dedup_by(|a, b| a.0 == b.0);
            if pairs.len() < 2 {
                warnings.push(format!(
                    "{}: fewer than two data sizes with errors; no convergence order",
                    s.name()
                ));
                continue;
            }
            let sizes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let errs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let o = convergence_order(&errs, &sizes)?;
            let mean = o.iter().sum::<f64>() / o.len() as f64;
            orders.push(StrategyOrders {
                strategy: s,
                sizes,
                orders: o,
                mean_order: Some(mean),
            });
        }
    }
    let report = AblationReport {
        axis: ab.axis,
        values: ab.values.clone(),
        points,
        orders,
        warnings,
    };
    write_ablation(&report, &cfg.out)?;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

pub fn write_ablation(report: &AblationReport, root: &Path) -> Result<()> {
    write_json(&root.join("ablation.json"), report)?;
    let mut csv = String::from("axis,value,strategy,status,target_error,max_error,blow_ups\n");
    let axis = serde_json::to_value(report.axis).expect("axis serialises");
    for p in &report.points {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            axis.as_str().unwrap_or(""),
            p.value,
            p.strategy.name(),
            p.status.replace(',', ";"),
            opt(p.target_error),
            opt(p.max_error),
            p.blow_ups
        );
    }
    for o in &report.orders {
        for (i, ord) in o.orders.iter().enumerate() {
            let _ = writeln!(
                csv,
                "order,{}-{},{},ok,{ord:.12e},,",
                o.sizes[i],
                o.sizes[i + 1],
                o.strategy.name()
            );
        }
    }
    write_file(&root.join("ablation.csv"), csv)?;
    let timestep = report.axis == AblationAxis::Timestep;
    let mut strategies: Vec<Strategy> = report.points.iter().map(|p| p.strategy).collect();
    strategies.dedup();
    let series: Vec<Series> = strategies
        .iter()
        .map(|&s| Series {
            name: s.name().into(),
            points: report
                .points
                .iter()
                .filter(|p| p.strategy == s)
                .filter_map(|p| {
                    let e = if timestep { p.max_error } else { p.target_error };
                    e.map(|e| (p.value, e))
                })
                .collect(),
        })
        .collect();
    let y = if timestep { "max relative L2 error" } else { "relative L2 error at the last checkpoint" };
    let svg = line_chart(&format!("ablation: {}", axis.as_str().unwrap_or("")), axis.as_str().unwrap_or(""), y, &series, true);
    write_file(&root.join("ablation.svg"), svg)
}
