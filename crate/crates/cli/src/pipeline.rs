//! The generate, train, evaluate and rollout steps of one run directory.
//!
//! Layout under `cfg.out`:
//!
//! ```text
//! config.json                  effective config
//! data/{train,test}.{json,bin} datasets
//! <strategy>/model.ckpt        trained parameters
//! <strategy>/train_log.jsonl   one record per epoch
//! <strategy>/eval/             report.json, errors.csv, curve.csv,
//!                              growth.json, errors.svg
//! index.json                   manifest of every file
//! ```

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::svg::{line_chart, Series};
use rno_core::evaluation::{
    evaluate_operator, fit_growth, lipschitz_probe, rollout, GrowthFit, SuiteReport,
};
use rno_core::operator::{load_checkpoint, save_checkpoint, NeuralOperator};
use rno_core::pde::{generate_dataset, TrajectoryDataset};
use rno_core::training::{train_with_callback, Strategy, TrainReport};
use rno_core::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub fn data_base(root: &Path, split: Split) -> PathBuf {
    root.join("data").join(split.name())
}

pub fn model_dir(root: &Path, strategy: Strategy) -> PathBuf {
    root.join(strategy.name())
}

pub fn checkpoint_path(root: &Path, strategy: Strategy) -> PathBuf {
    model_dir(root, strategy).join("model.ckpt")
}

pub fn eval_dir(root: &Path, strategy: Strategy) -> PathBuf {
    model_dir(root, strategy).join("eval")
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::config(e.to_string()))?;
    text.push('\n');
    write_file(path, text)
}

pub fn write_effective_config(cfg: &ExperimentConfig) -> Result<()> {
    write_file(&cfg.out.join("config.json"), cfg.to_json())
}

/// Simulates one split covering `horizon` with `samples` trajectories.
pub fn generate_split(cfg: &ExperimentConfig, split: Split, samples: usize, horizon: f64) -> Result<TrajectoryDataset> {
    let seeds = cfg.seeds();
    let seed = match split {
        Split::Train => seeds.train_data,
        Split::Test => seeds.test_data,
    };
    let d = &cfg.dataset;
    Ok(generate_dataset(
        &cfg.pde_problem(horizon),
        samples,
        d.store_stride,
        d.grid,
        d.gp,
        seed,
    )?)
}

pub fn write_dataset(data: &TrajectoryDataset, base: &Path) -> Result<()> {
    if let Some(parent) = base.parent() {
        ensure_dir(parent)?;
    }
    Ok(data.write(base)?)
}

pub fn read_dataset(base: &Path) -> Result<TrajectoryDataset> {
    let json = base.with_extension("json");
    if !json.exists() {
        return Err(CliError::io(
            &json,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found"),
        ));
    }
    Ok(TrajectoryDataset::read(base)?)
}

/// Writes the training and test datasets.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<[PathBuf; 2]> {
    write_effective_config(cfg)?;
    let d = &cfg.dataset;
    let train = generate_split(cfg, Split::Train, d.train_samples, d.train_horizon)?;
    let train_base = data_base(&cfg.out, Split::Train);
    write_dataset(&train, &train_base)?;
    let test = generate_split(cfg, Split::Test, d.test_samples, d.test_horizon)?;
    let test_base = data_base(&cfg.out, Split::Test);
    write_dataset(&test, &test_base)?;
    Ok([train_base, test_base])
}

/// Rejects datasets produced for a different problem or grid.
pub fn check_dataset(cfg: &ExperimentConfig, data: &TrajectoryDataset) -> Result<()> {
    let want = cfg.pde_problem(data.meta.problem.horizon);
    if data.meta.problem != want {
        return Err(CliError::config(format!(
            "dataset problem {:?} does not match the config {:?}",
            data.meta.problem, want
        )));
    }
    if data.meta.grid != cfg.dataset.grid {
        return Err(CliError::config(format!(
            "dataset grid {:?} does not match dataset.grid {:?}",
            data.meta.grid, cfg.dataset.grid
        )));
    }
    Ok(())
}

pub fn initial_operator(cfg: &ExperimentConfig) -> Result<NeuralOperator> {
    Ok(NeuralOperator::init(cfg.operator_spec(), cfg.seeds().init)?)
}

/// Trains a fresh operator on `data` and writes the checkpoint and log
/// into `dir`.
pub fn train_into(cfg: &ExperimentConfig, data: &TrajectoryDataset, dir: &Path) -> Result<(NeuralOperator, TrainReport)> {
    ensure_dir(dir)?;
    let mut op = initial_operator(cfg)?;
    let log_path = dir.join("train_log.jsonl");
    let file = std::fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let mut io_err = None;
    let report = train_with_callback(&mut op, data, &cfg.train_config(), |rec| {
        let line = serde_json::to_string(rec).expect("record serialises");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(CliError::io(&log_path, e));
    }
    let report = report?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&op, &ckpt)?;
    Ok((op, report))
}

pub fn cmd_train(cfg: &ExperimentConfig, data: &Path) -> Result<PathBuf> {
    write_effective_config(cfg)?;
    let data = read_dataset(data)?;
    check_dataset(cfg, &data)?;
    let dir = model_dir(&cfg.out, cfg.train.strategy);
    train_into(cfg, &data, &dir)?;
    Ok(dir.join("model.ckpt"))
}

/// Everything `evaluate` writes about one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub suite: SuiteReport,
    pub growth: Option<GrowthFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth_warning: Option<String>,
    /// Largest local Lipschitz ratio of the increment at the first test
    /// state; a diagnostic only.
    pub lipschitz: Option<f64>,
}

impl EvalReport {
    pub fn error_at(&self, step: usize) -> Option<f64> {
        self.suite.error_at(step)
    }
}

pub fn evaluate_model(
    cfg: &ExperimentConfig,
    op: &NeuralOperator,
    test: &TrajectoryDataset,
    label: &str,
) -> Result<EvalReport> {
    let suite = evaluate_operator(op, test, cfg.eval_dt(), &cfg.evaluation.checkpoints)?;
    let (growth, growth_warning) = match fit_growth(&suite.curve) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(format!("no growth fit: {e}"))),
    };
    let lipschitz = if test.samples() > 0 {
        let p = lipschitz_probe(op, &test.frame(0, 0), test.forcing.as_ref(), 8, 1e-4, cfg.seed)?;
        p.is_finite().then_some(p)
    } else {
        None
    };
    Ok(EvalReport {
        label: label.to_string(),
        suite,
        growth,
        growth_warning,
        lipschitz,
    })
}

pub fn write_eval_report(report: &EvalReport, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_json(&dir.join("report.json"), report)?;
    write_file(&dir.join("errors.csv"), report.suite.to_csv())?;
    write_file(&dir.join("curve.csv"), report.suite.curve_csv())?;
    write_json(&dir.join("growth.json"), &report.growth)?;
    let points = report
        .suite
        .curve
        .iter()
        .enumerate()
        .map(|(k, &e)| ((k + 1) as f64, e))
        .collect();
    let svg = line_chart(
        &format!("{}: mean relative L2 error", report.label),
        "rollout step",
        "relative L2 error",
        &[Series {
            name: report.label.clone(),
            points,
        }],
        true,
    );
    write_file(&dir.join("errors.svg"), svg)
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, test: &Path, label: &str, dir: &Path) -> Result<EvalReport> {
    let op = load_checkpoint(checkpoint)?;
    let test = read_dataset(test)?;
    check_dataset(cfg, &test)?;
    let report = evaluate_model(cfg, &op, &test, label)?;
    write_eval_report(&report, dir)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutMeta {
    pub sample: usize,
    pub dt: f64,
    /// `[steps + 1, C, H, W]` little-endian `f64` in the `.bin` file.
    pub shape: Vec<usize>,
    pub blow_up: Option<usize>,
    /// Relative L2 error per step where truth exists.
    pub errors: Vec<f64>,
}

/// Rolls out one test sample and stores the predicted trajectory.
pub fn cmd_rollout(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    test: &Path,
    sample: usize,
    steps: usize,
    dir: &Path,
) -> Result<RolloutMeta> {
    let op = load_checkpoint(checkpoint)?;
    let data = read_dataset(test)?;
    check_dataset(cfg, &data)?;
    if sample >= data.samples() {
        return Err(CliError::config(format!(
            "sample {sample} is out of range for {} test samples",
            data.samples()
        )));
    }
    let dt = cfg.eval_dt();
    let stride = (dt / data.meta.dt).round() as usize;
    if stride == 0 || ((stride as f64) * data.meta.dt - dt).abs() > 1e-9 * dt {
        return Err(CliError::config(format!(
            "rollout dt {dt} is not a multiple of the dataset spacing {}",
            data.meta.dt
        )));
    }
    let mut r = rollout(&op, &data.frame(sample, 0), data.forcing.as_ref(), dt, steps)?;
    let truth: Vec<Tensor> = (0..r.states.len())
        .take_while(|k| k * stride < data.frames())
        .map(|k| data.frame(sample, k * stride))
        .collect();
    r.compare(&truth)?;
    let traj = Tensor::stack(&r.states)?;
    let mut bytes = Vec::with_capacity(8 * traj.numel());
    for v in traj.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let stem = format!("sample-{sample}");
    write_file(&dir.join(format!("{stem}.bin")), bytes)?;
    let meta = RolloutMeta {
        sample,
        dt,
        shape: traj.shape().to_vec(),
        blow_up: r.blow_up,
        errors: r.errors,
    };
    write_json(&dir.join(format!("{stem}.json")), &meta)?;
    Ok(meta)
}
