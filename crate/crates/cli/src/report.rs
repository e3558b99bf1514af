//! Aggregates evaluation reports found under a directory, e.g. the
//! `seed-*` runs of a multi-seed experiment.

use crate::error::{CliError, Result};
use crate::pipeline::{write_file, write_json, EvalReport};
use rno_core::evaluation::GrowthModel;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStats {
    pub step: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub label: String,
    pub runs: usize,
    pub checkpoints: Vec<CheckpointStats>,
    pub exponential_fits: usize,
    pub linear_fits: usize,
    pub blow_ups: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub sources: Vec<String>,
    pub labels: Vec<LabelSummary>,
}

fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "report.json")
            && p.parent().and_then(Path::file_name).is_some_and(|n| n == "eval")
        {
            out.push(p);
        }
    }
    Ok(())
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (Some(m), Some(var.sqrt()))
}

/// Groups reports by label; errors are averaged per checkpoint over the
/// runs that produced one.
pub fn summarise(root: &Path) -> Result<Summary> {
    let mut paths = Vec::new();
    find_reports(root, &mut paths)?;
    let mut groups: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
    let mut sources = Vec::new();
    for p in &paths {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        let r: EvalReport = serde_json::from_str(&text)
            .map_err(|e| CliError::io(p, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
        let rel = p.strip_prefix(root).unwrap_or(p);
        sources.push(rel.to_string_lossy().replace('\\', "/"));
        groups.entry(r.label.clone()).or_default().push(r);
    }
    let labels = groups
        .into_iter()
        .map(|(label, reports)| {
            let mut steps: Vec<usize> = reports
                .iter()
                .flat_map(|r| r.suite.checkpoints.iter().map(|c| c.step))
                .collect();
            steps.sort_unstable();
            steps.dedup();
            let checkpoints = steps
                .into_iter()
                .map(|step| {
                    let xs: Vec<f64> = reports
                        .iter()
                        .filter_map(|r| r.suite.checkpoints.iter().find(|c| c.step == step)?.mean_rel_l2)
                        .collect();
                    let (mean, std) = mean_std(&xs);
                    CheckpointStats { step, mean, std, runs: xs.len() }
                })
                .collect();
            let fits = |m: GrowthModel| reports.iter().filter(|r| r.growth.as_ref().is_some_and(|g| g.selected == m)).count();
            LabelSummary {
                runs: reports.len(),
                checkpoints,
                exponential_fits: fits(GrowthModel::Exponential),
                linear_fits: fits(GrowthModel::Linear),
                blow_ups: reports.iter().map(|r| r.suite.blow_ups.len()).sum(),
                label,
            }
        })
        .collect();
    Ok(Summary { sources, labels })
}

fn sci(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2e}")).unwrap_or_else(|| "-".into())
}

/// Writes `summary.json`, `summary.csv` and a Markdown table with one row
/// per label and one column per checkpoint.
pub fn write_summary(summary: &Summary, root: &Path) -> Result<()> {
    write_json(&root.join("summary.json"), summary)?;
    let mut csv = String::from("label,step,mean,std,runs\n");
    for l in &summary.labels {
        for c in &l.checkpoints {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
            let _ = writeln!(csv, "{},{},{},{},{}", l.label, c.step, f(c.mean), f(c.std), c.runs);
        }
    }
    write_file(&root.join("summary.csv"), csv)?;
    let mut steps: Vec<usize> = summary
        .labels
        .iter()
        .flat_map(|l| l.checkpoints.iter().map(|c| c.step))
        .collect();
    steps.sort_unstable();
    steps.dedup();
    let mut md = String::from("| model | runs |");
    for s in &steps {
        let _ = write!(md, " n={s} |");
    }
    md.push_str(" growth (lin/exp) | blow-ups |\n|---|---|");
    for _ in &steps {
        md.push_str("---|");
    }
    md.push_str("---|---|\n");
    for l in &summary.labels {
        let _ = write!(md, "| {} | {} |", l.label, l.runs);
        for s in &steps {
            match l.checkpoints.iter().find(|c| c.step == *s) {
                Some(c) => {
                    let _ = write!(md, " {} (± {}) |", sci(c.mean), sci(c.std));
                }
                None => md.push_str(" - |"),
            }
        }
        let _ = writeln!(md, " {}/{} | {} |", l.linear_fits, l.exponential_fits, l.blow_ups);
    }
    write_file(&root.join("summary.md"), md)
}
