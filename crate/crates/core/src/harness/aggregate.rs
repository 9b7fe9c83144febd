//! Summary statistics over run logs.

use std::collections::BTreeMap;
use std::io::Write;

use crate::harness::{EvalMode, RunLog};
use crate::Result;

/// Trials averaged for the "last trials" statistics.
pub const LAST_TRIALS: usize = 5;

/// Mean and population standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn last_mean(values: impl DoubleEndedIterator<Item = f64> + ExactSizeIterator) -> f64 {
    let v: Vec<f64> = values.rev().take(LAST_TRIALS).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ModeSummary {
    pub mode: EvalMode,
    pub runs: usize,
    pub final_reward_mean: f64,
    pub final_reward_std: f64,
    pub last5_reward_mean: f64,
    pub last5_reward_std: f64,
    /// Percentage of runs with at least one crash.
    pub crash_pct: f64,
    /// Benchmarks: per-run mean of the best-so-far value over the last trials.
    pub last5_value_mean: f64,
    pub last5_value_std: f64,
    /// Benchmarks with a known optimum: the same for `best − optimum`.
    pub last5_gap_mean: f64,
    pub last5_gap_std: f64,
}

pub fn summarize(logs: &[RunLog]) -> Vec<ModeSummary> {
    let mut by_mode: BTreeMap<EvalMode, Vec<&RunLog>> = BTreeMap::new();
    for l in logs {
        by_mode.entry(l.info.mode).or_default().push(l);
    }
    by_mode
        .into_iter()
        .map(|(mode, runs)| {
            let finals: Vec<f64> = runs.iter().map(|l| l.final_reward()).collect();
            let last_rewards: Vec<f64> = runs.iter().map(|l| last_mean(l.trials.iter().map(|t| t.reward))).collect();
            let values: Vec<f64> = runs
                .iter()
                .map(|l| last_mean(l.trials.iter().map(|t| t.best_value)))
                .filter(|v| v.is_finite())
                .collect();
            let gaps: Vec<f64> = runs
                .iter()
                .filter_map(|l| l.info.optimum.map(|opt| last_mean(l.trials.iter().map(|t| t.best_value - opt))))
                .filter(|v| v.is_finite())
                .collect();
            let (fm, fs) = mean_std(&finals);
            let (lm, ls) = mean_std(&last_rewards);
            let (vm, vs) = mean_std(&values);
            let (gm, gs) = mean_std(&gaps);
            let crashes = runs.iter().filter(|l| l.any_crash()).count();
            ModeSummary {
                mode,
                runs: runs.len(),
                final_reward_mean: fm,
                final_reward_std: fs,
                last5_reward_mean: lm,
                last5_reward_std: ls,
                crash_pct: 100.0 * crashes as f64 / runs.len() as f64,
                last5_value_mean: vm,
                last5_value_std: vs,
                last5_gap_mean: gm,
                last5_gap_std: gs,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CurvePoint {
    pub mode: EvalMode,
    pub trial: usize,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Per-trial reward minus the nominal run's reward for the same
/// `(θ, task, seed)`. Without nominal runs the raw reward is used.
pub fn normalized_curves(logs: &[RunLog]) -> Vec<CurvePoint> {
    let nominal: BTreeMap<(usize, usize, u64), &RunLog> = logs
        .iter()
        .filter(|l| l.info.mode == EvalMode::Nominal)
        .map(|l| ((l.info.theta_index, l.info.task, l.info.seed), l))
        .collect();
    let mut acc: BTreeMap<(EvalMode, usize), Vec<f64>> = BTreeMap::new();
    for l in logs {
        let base = nominal.get(&(l.info.theta_index, l.info.task, l.info.seed));
        for t in &l.trials {
            let offset = base.and_then(|b| b.trials.get(t.trial)).map_or(0.0, |b| b.reward);
            acc.entry((l.info.mode, t.trial)).or_default().push(t.reward - offset);
        }
    }
    acc.into_iter()
        .map(|((mode, trial), v)| {
            let (mean, std) = mean_std(&v);
            CurvePoint { mode, trial, mean, std, runs: v.len() }
        })
        .collect()
}

pub fn write_summary<W: Write>(rows: &[ModeSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curves<W: Write>(rows: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
