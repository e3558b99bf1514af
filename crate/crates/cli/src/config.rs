//! Declarative experiment configs: JSON files with dotted `KEY=VALUE`
//! overrides applied before parsing.

use crate::error::{CliError, Result};
use rno_core::operator::{Activation, OperatorSpec, Variant};
use rno_core::pde::{ForcingSpec, GpParams, PdeKind, PdeProblem};
use rno_core::seed::derive_seed;
use rno_core::training::{Strategy, TrainConfig};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub pde: PdeKind,
    /// Defaults to the equation's usual forcing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forcing: Option<ForcingSpec>,
    /// Solver grid `[H, W]`.
    pub solver_grid: [usize; 2],
    pub fine_dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    /// Stored grid; must divide the solver grid.
    pub grid: [usize; 2],
    /// Fine steps between stored frames.
    pub store_stride: usize,
    pub train_horizon: f64,
    pub test_horizon: f64,
    #[serde(default)]
    pub gp: GpParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub variant: Variant,
    pub layers: usize,
    pub width: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Gelu
}

/// Absent stays `None` (use the strategy default); `null` is `Some(None)`.
fn explicit_null<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Option<f64>>, D::Error> {
    Option::<f64>::deserialize(d).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub strategy: Strategy,
    pub dt: f64,
    pub window: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// A number, `null` for no clipping, or absent for the strategy default.
    #[serde(default, deserialize_with = "explicit_null", skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Rollout steps at which errors are tabulated.
    pub checkpoints: Vec<usize>,
    /// Rollout step; defaults to the training step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    #[default]
    None,
    /// Training window length `N`.
    Window,
    /// Model step `dt`, trained on a fixed horizon.
    Timestep,
    /// Number of training samples.
    DataSize,
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::TeacherForcing, Strategy::Recurrent]
}

fn default_train_horizon() -> f64 {
    2.0
}

fn default_eval_horizon() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub axis: AblationAxis,
    #[serde(default)]
    pub values: Vec<f64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    /// Timestep axis: training covers `[0, train_horizon]`, so the window
    /// is `train_horizon / dt`.
    #[serde(default = "default_train_horizon")]
    pub train_horizon: f64,
    /// Timestep axis: the maximum error is taken over `[0, eval_horizon]`.
    #[serde(default = "default_eval_horizon")]
    pub eval_horizon: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            axis: AblationAxis::None,
            values: Vec::new(),
            strategies: default_strategies(),
            train_horizon: default_train_horizon(),
            eval_horizon: default_eval_horizon(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub out: PathBuf,
    pub problem: ProblemConfig,
    pub dataset: DatasetConfig,
    pub operator: OperatorConfig,
    pub train: TrainSection,
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

/// Derived seeds of one run; each is a pure function of the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub train_data: u64,
    pub test_data: u64,
    pub init: u64,
    pub shuffle: u64,
}

impl RunSeeds {
    pub fn from_master(master: u64) -> Self {
        RunSeeds {
            train_data: derive_seed(master, "train_data", 0),
            test_data: derive_seed(master, "test_data", 0),
            init: derive_seed(master, "init", 0),
            shuffle: derive_seed(master, "shuffle", 0),
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::config(format!("override key `{key}` has an empty segment")));
        }
        let map = cur
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("override `{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// Applies `KEY=VALUE`; the value is parsed as JSON and taken as a string
/// when that fails.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{spec}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(root, key.trim(), value)
}

impl ExperimentConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_value(v).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies the overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self).map_err(|e| CliError::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn seeds(&self) -> RunSeeds {
        RunSeeds::from_master(self.seed)
    }

    /// Solver problem covering `horizon`.
    pub fn pde_problem(&self, horizon: f64) -> PdeProblem {
        let p = &self.problem;
        let mut problem = PdeProblem::new(p.pde.clone(), p.solver_grid, p.fine_dt, horizon);
        if let Some(f) = &p.forcing {
            problem.forcing = f.clone();
        }
        problem
    }

    pub fn operator_spec(&self) -> OperatorSpec {
        let forced = self.pde_problem(0.0).has_forcing();
        OperatorSpec {
            variant: self.operator.variant.clone(),
            layers: self.operator.layers,
            width: self.operator.width,
            activation: self.operator.activation,
            in_channels: 1 + usize::from(forced),
            out_channels: 1,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            strategy: t.strategy,
            dt: t.dt,
            window: t.window,
            epochs: t.epochs,
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm.unwrap_or_else(|| t.strategy.default_clip()),
            seed: self.seeds().shuffle,
        }
    }

    pub fn eval_dt(&self) -> f64 {
        self.evaluation.dt.unwrap_or(self.train.dt)
    }

    pub fn validate(&self) -> Result<()> {
        self.pde_problem(self.dataset.train_horizon).validate()?;
        self.pde_problem(self.dataset.test_horizon).fine_steps()?;
        self.pde_problem(self.dataset.train_horizon).fine_steps()?;
        let spec = self.operator_spec();
        spec.validate()?;
        spec.check_grid(self.dataset.grid[0], self.dataset.grid[1])?;
        self.train_config().validate()?;
        if self.dataset.store_stride == 0 {
            return Err(CliError::config("dataset.store_stride must be at least 1"));
        }
        let [sh, sw] = self.problem.solver_grid;
        let [h, w] = self.dataset.grid;
        if h == 0 || w == 0 || sh % h != 0 || sw % w != 0 {
            return Err(CliError::config(format!(
                "dataset.grid {h}x{w} must divide problem.solver_grid {sh}x{sw}"
            )));
        }
        if self.evaluation.checkpoints.is_empty() {
            return Err(CliError::config("evaluation.checkpoints must not be empty"));
        }
        if self.ablation.axis != AblationAxis::None {
            if self.ablation.values.is_empty() {
                return Err(CliError::config("ablation.values must not be empty"));
            }
            if self.ablation.strategies.is_empty() {
                return Err(CliError::config("ablation.strategies must not be empty"));
            }
        }
        Ok(())
    }

    /// A small Allen–Cahn MgNO experiment used as the built-in default.
    pub fn example() -> Self {
        ExperimentConfig {
            name: "allen_cahn_mgno".into(),
            seed: 0,
            out: PathBuf::from("runs/allen_cahn"),
            problem: ProblemConfig {
                pde: PdeKind::allen_cahn(),
                forcing: None,
                solver_grid: [32, 32],
                fine_dt: 0.01,
            },
            dataset: DatasetConfig {
                train_samples: 200,
                test_samples: 50,
                grid: [32, 32],
                store_stride: 20,
                train_horizon: 2.0,
                test_horizon: 10.0,
                gp: GpParams::default(),
            },
            operator: OperatorConfig {
                variant: Variant::mgno(3),
                layers: 4,
                width: 16,
                activation: Activation::Gelu,
            },
            train: TrainSection {
                strategy: Strategy::Recurrent,
                dt: 0.2,
                window: 10,
                epochs: 100,
                batch_size: 10,
                peak_lr: 1e-3,
                weight_decay: 1e-5,
                clip_norm: None,
            },
            evaluation: EvaluationConfig {
                checkpoints: vec![5, 10, 50],
                dt: None,
            },
            ablation: AblationConfig::default(),
        }
    }
}
