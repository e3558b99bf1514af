use clap::{Args, Parser, Subcommand, ValueEnum};
use rno_cli::ablation::run_ablation;
use rno_cli::manifest::write_index;
use rno_cli::pipeline::{self, checkpoint_path, data_base, eval_dir, Split};
use rno_cli::report::{summarise, write_summary};
use rno_cli::{CliError, ExperimentConfig, Result};
use rno_core::training::Strategy;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Teacher-forcing versus recurrent training of neural operators.
#[derive(Parser)]
#[command(name = "rno", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); the built-in Allen–Cahn example otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Runs once per seed into `<out>/seed-<s>` and summarises the runs.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted `KEY=VALUE` override; the value is parsed as JSON if possible.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    TeacherForcing,
    Recurrent,
    Both,
}

impl StrategyArg {
    fn resolve(arg: Option<Self>, cfg: &ExperimentConfig) -> Vec<Strategy> {
        match arg {
            None => vec![cfg.train.strategy],
            Some(StrategyArg::TeacherForcing) => vec![Strategy::TeacherForcing],
            Some(StrategyArg::Recurrent) => vec![Strategy::Recurrent],
            Some(StrategyArg::Both) => vec![Strategy::TeacherForcing, Strategy::Recurrent],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the training and test datasets.
    Generate,
    /// Train an operator on the training dataset.
    Train {
        /// Training dataset base path; defaults to `<out>/data/train`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to the config's strategy.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Roll trained models out on the test set and tabulate errors.
    Evaluate {
        /// A specific checkpoint; otherwise every trained strategy in `--out`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test dataset base path; defaults to `<out>/data/test`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which trained strategies to evaluate.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Store the predicted trajectory of one test sample.
    Rollout {
        /// Defaults to the config strategy's checkpoint in `--out`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test dataset base path; defaults to `<out>/data/test`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Index of the test sample.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Defaults to the largest evaluation checkpoint.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the configured ablation sweep.
    Ablate {
        /// Reuse finished runs with identical configs from this directory.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Summarise every evaluation report under `--out`.
    Report,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &common.out {
        overrides.push(format!("out={}", serde_json::Value::String(o.to_string_lossy().into_owned())));
    }
    match &common.config {
        Some(p) => ExperimentConfig::load(p, &overrides),
        None => ExperimentConfig::example().with_overrides(&overrides),
    }
}

fn for_strategy(cfg: &ExperimentConfig, s: Strategy) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.train.strategy = s;
    c
}

fn run_one(command: &Command, cfg: &ExperimentConfig) -> Result<()> {
    let out = &cfg.out;
    match command {
        Command::Generate => {
            let [train, test] = pipeline::cmd_generate(cfg)?;
            eprintln!("wrote {} and {}", train.display(), test.display());
        }
        Command::Train { data, strategy } => {
            let data = data.clone().unwrap_or_else(|| data_base(out, Split::Train));
            for s in StrategyArg::resolve(*strategy, cfg) {
                let ckpt = pipeline::cmd_train(&for_strategy(cfg, s), &data)?;
                eprintln!("wrote {}", ckpt.display());
            }
        }
        Command::Evaluate { checkpoint, data, strategy } => {
            let data = data.clone().unwrap_or_else(|| data_base(out, Split::Test));
            let jobs: Vec<(PathBuf, String, PathBuf)> = match checkpoint {
                Some(c) => {
                    let label = c
                        .parent()
                        .and_then(Path::file_name)
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "model".into());
                    vec![(c.clone(), label.clone(), out.join(&label).join("eval"))]
                }
                None => {
                    let wanted = match strategy {
                        Some(_) => StrategyArg::resolve(*strategy, cfg),
                        None => vec![Strategy::TeacherForcing, Strategy::Recurrent],
                    };
                    wanted
                        .into_iter()
                        .map(|s| (checkpoint_path(out, s), s.name().to_string(), eval_dir(out, s)))
                        .filter(|(c, ..)| strategy.is_some() || c.exists())
                        .collect()
                }
            };
            if jobs.is_empty() {
                return Err(CliError::io(
                    out,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no trained checkpoints found"),
                ));
            }
            pipeline::write_effective_config(cfg)?;
            for (ckpt, label, dir) in jobs {
                let r = pipeline::cmd_evaluate(cfg, &ckpt, &data, &label, &dir)?;
                for row in &r.suite.checkpoints {
                    let e = row.mean_rel_l2.map(|e| format!("{e:.3e}")).unwrap_or_else(|| "extrapolation only".into());
                    println!("{label} n={}: {e}", row.step);
                }
                if !r.suite.blow_ups.is_empty() {
                    println!("{label}: {} sample(s) blew up", r.suite.blow_ups.len());
                }
            }
        }
        Command::Rollout { checkpoint, data, sample, steps } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| checkpoint_path(out, cfg.train.strategy));
            let data = data.clone().unwrap_or_else(|| data_base(out, Split::Test));
            let steps = steps.unwrap_or_else(|| cfg.evaluation.checkpoints.iter().copied().max().unwrap_or(1));
            let meta = pipeline::cmd_rollout(cfg, &ckpt, &data, *sample, steps, &out.join("rollout"))?;
            if let Some(k) = meta.blow_up {
                println!("blow-up at step {k}");
            }
            if let Some(e) = meta.errors.last() {
                println!("relative L2 error at step {}: {e:.3e}", meta.errors.len());
            }
        }
        Command::Ablate { cache } => {
            let r = run_ablation(cfg, cache.as_deref())?;
            for p in &r.points {
                let e = p.target_error.map(|e| format!("{e:.3e}")).unwrap_or_else(|| p.status.clone());
                println!("{} {}: {e}", p.value, p.strategy.name());
            }
            for o in &r.orders {
                println!("{} orders {:?}", o.strategy.name(), o.orders);
            }
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Report => {
            let s = summarise(out)?;
            write_summary(&s, out)?;
            print!("{}", std::fs::read_to_string(out.join("summary.md")).unwrap_or_default());
        }
    }
    write_index(out)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    if cli.common.seeds.is_empty() {
        return run_one(&cli.command, &cfg);
    }
    for &s in &cli.common.seeds {
        let mut c = cfg.clone();
        c.seed = s;
        c.out = cfg.out.join(format!("seed-{s}"));
        run_one(&cli.command, &c)?;
    }
    if matches!(cli.command, Command::Evaluate { .. } | Command::Report) {
        let s = summarise(&cfg.out)?;
        write_summary(&s, &cfg.out)?;
    }
    write_index(&cfg.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
