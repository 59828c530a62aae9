//! Plot-ready CSV reports over one or more training logs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::{TrainMetrics, METRICS_HEADER};

/// Steps averaged for the "final" training reward.
pub const FINAL_WINDOW: usize = 100;

/// A labelled metrics log.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub label: String,
    pub metrics: Vec<TrainMetrics>,
}

/// Mean reward under clean and perturbed evaluation images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRewards {
    pub clean: f64,
    pub removing: f64,
    pub preserving: f64,
}

impl EvalRewards {
    pub fn removing_drop(&self) -> f64 {
        self.clean - self.removing
    }

    pub fn preserving_drop(&self) -> f64 {
        self.clean - self.preserving
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub steps: usize,
    /// Mean training reward over the last [`FINAL_WINDOW`] steps.
    pub final_mean_reward: f64,
    /// Mean training reward over all steps (area under the curve per step).
    pub reward_auc: f64,
    pub mean_delta_h_selected: f64,
    pub mean_delta_h_unselected: f64,
    pub eval: Option<EvalRewards>,
}

fn nan_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.filter(|x| x.is_finite()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn final_mean_reward(metrics: &[TrainMetrics]) -> f64 {
    let tail = &metrics[metrics.len().saturating_sub(FINAL_WINDOW)..];
    nan_mean(tail.iter().map(|m| m.mean_reward))
}

pub fn summarize(log: &RunLog, eval: Option<EvalRewards>) -> Result<RunSummary> {
    if log.metrics.is_empty() {
        return Err(Error::Report(format!("run `{}` has an empty metrics log", log.label)));
    }
    Ok(RunSummary {
        label: log.label.clone(),
        steps: log.metrics.len(),
        final_mean_reward: final_mean_reward(&log.metrics),
        reward_auc: nan_mean(log.metrics.iter().map(|m| m.mean_reward)),
        mean_delta_h_selected: nan_mean(log.metrics.iter().map(|m| m.mean_delta_h_selected)),
        mean_delta_h_unselected: nan_mean(log.metrics.iter().map(|m| m.mean_delta_h_unselected)),
        eval,
    })
}

/// Reads a metrics CSV, checking its header against the fixed schema.
pub fn read_metrics(path: &Path) -> Result<Vec<TrainMetrics>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Report(format!("{}: empty metrics file", path.display())))?;
    if header.trim() != METRICS_HEADER {
        return Err(Error::Report(format!("{}: unexpected metrics header `{}`", path.display(), header.trim())));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(TrainMetrics::parse_csv_row(&line)?);
        }
    }
    Ok(rows)
}

fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

/// Writes `curves.csv` (mean reward per step, one column per run, aligned by
/// step) and `summary.csv` into `out_dir`.
pub fn emit_report(runs: &[(RunLog, Option<EvalRewards>)], out_dir: &Path) -> Result<Vec<RunSummary>> {
    if runs.is_empty() {
        return Err(Error::Report("no runs to report".into()));
    }
    let summaries: Vec<RunSummary> = runs.iter().map(|(log, eval)| summarize(log, *eval)).collect::<Result<_>>()?;
    fs::create_dir_all(out_dir)?;

    let mut by_step: BTreeMap<u64, Vec<Option<f64>>> = BTreeMap::new();
    for (i, (log, _)) in runs.iter().enumerate() {
        for m in &log.metrics {
            by_step.entry(m.step).or_insert_with(|| vec![None; runs.len()])[i] = Some(m.mean_reward);
        }
    }
    let mut curves = String::from("step");
    for (log, _) in runs {
        curves.push_str(&format!(",{}", log.label));
    }
    curves.push('\n');
    for (step, values) in &by_step {
        curves.push_str(&step.to_string());
        for v in values {
            curves.push(',');
            if let Some(v) = v {
                curves.push_str(&v.to_string());
            }
        }
        curves.push('\n');
    }
    fs::write(out_dir.join("curves.csv"), curves)?;

    let mut summary = String::from(
        "run,steps,final_mean_reward,reward_auc,mean_delta_h_selected,mean_delta_h_unselected,eval_clean,eval_removing,eval_preserving\n",
    );
    for s in &summaries {
        let (c, r, p) = s.eval.map_or((f64::NAN, f64::NAN, f64::NAN), |e| (e.clean, e.removing, e.preserving));
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.label,
            s.steps,
            fmt(s.final_mean_reward),
            fmt(s.reward_auc),
            fmt(s.mean_delta_h_selected),
            fmt(s.mean_delta_h_unselected),
            fmt(c),
            fmt(r),
            fmt(p)
        ));
    }
    fs::write(out_dir.join("summary.csv"), summary)?;
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(label: &str, steps: u64, reward: f64) -> RunLog {
        RunLog {
            label: label.into(),
            metrics: (1..=steps)
                .map(|step| TrainMetrics {
                    step,
                    mean_reward: reward * step as f64,
                    mean_advantage_abs: 0.0,
                    grpo_term: 0.0,
                    cpl_term: 0.0,
                    mean_delta_h_selected: f64::NAN,
                    mean_delta_h_unselected: 0.0,
                    fraction_gated_rollouts: 0.0,
                    wall_time: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn single_run_one_summary_row() {
        let dir = tempfile::tempdir().unwrap();
        let s = emit_report(&[(log("a", 3, 0.1), None)], dir.path()).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].final_mean_reward - 0.2).abs() < 1e-12);
        let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn pair_aligned_by_step() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&[(log("grpo", 3, 0.1), None), (log("cppo", 2, 0.2), None)], dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,grpo,cppo");
        assert_eq!(lines[2], "2,0.2,0.4");
        assert_eq!(lines[3], "3,0.30000000000000004,");
    }

    #[test]
    fn empty_log_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&[(log("a", 0, 0.1), None)], dir.path()).is_err());
        assert!(emit_report(&[], dir.path()).is_err());
    }

    #[test]
    fn schema_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "step,reward\n1,0.5\n").unwrap();
        assert!(read_metrics(&p).is_err());
        fs::write(&p, format!("{METRICS_HEADER}\n1,0.5,0,0,0,,0,0\n")).unwrap();
        assert!(read_metrics(&p).is_err());
    }
}
