//! Dataset generation, online evaluation sessions, aggregation, and the file
//! layout the command-line tool uses.
//!
//! Output directory layout:
//!
//! ```text
//! <output_dir>/dataset.bin             training data
//! <output_dir>/dataset_summary.csv     θ and mean metrics per batch
//! <output_dir>/pretrained.ckpt         phase-1 checkpoint
//! <output_dir>/meta.ckpt               phase-2 checkpoint
//! <output_dir>/train_log_*.csv         epoch, phase, batch, loss
//! <output_dir>/eval/runs/*.csv         one file per online session
//! <output_dir>/eval/beliefs.csv        belief mean after every trial
//! <output_dir>/eval/traces/*.csv       per-step traces when enabled
//! <output_dir>/eval/summary.csv        per-mode statistics
//! <output_dir>/eval/curves.csv         nominal-relative reward per trial
//! ```

mod aggregate;
mod config;
mod data;
mod online;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::adapt::AdaptOptions;
use crate::envs::{sample_out_of_distribution, EnvKind, Environment};
use crate::gainopt::RewardSpec;
use crate::perfmodel::Checkpoint;
use crate::{Error, Result};

pub use aggregate::{mean_std, normalized_curves, summarize, write_curves, write_summary, CurvePoint, ModeSummary, LAST_TRIALS};
pub use config::{apply_override, DataConfig, EvalConfig, EvalMode, ExperimentConfig, ModelOverrides};
pub use data::{gen_dataset, write_dataset_summary};
pub use online::{run_online, write_belief_snapshots, write_trace, OnlineConfig, RunInfo, RunLog, TrialRecord};

/// `n` system parameters from the test box minus the training box.
pub fn ood_thetas(env: &dyn Environment, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = crate::rng::stream(seed, &[0x6f6f64]);
    (0..n).map(|_| sample_out_of_distribution(&env.train_box(), &env.test_box(), &mut rng)).collect()
}

pub fn online_config(cfg: &ExperimentConfig, env: &dyn Environment, mode: EvalMode) -> OnlineConfig {
    OnlineConfig {
        mode,
        trials: cfg.eval.trials,
        reward: RewardSpec {
            weights: cfg.eval.reward_weights.clone().unwrap_or_else(|| env.default_reward_weights()),
            beta: cfg.eval.beta,
        },
        search: cfg.eval.search.clone(),
        adapt: AdaptOptions { residual_clamp: cfg.eval.residual_clamp },
        psd_directions: cfg.eval.psd_directions,
        keep_scores: cfg.eval.keep_scores,
        trace: cfg.eval.trace,
        benchmark: env.kind() != EnvKind::RaceCar,
    }
}

/// Every `(mode, θ, task, seed)` session of an evaluation, in a fixed order.
/// `full` serves the `full` and `context-only` modes (and supplies the metric
/// normalization for `nominal`); `pretrained` serves `no-meta`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    env: &dyn Environment,
    full: Option<&Checkpoint>,
    pretrained: Option<&Checkpoint>,
) -> Result<Vec<RunLog>> {
    let thetas = ood_thetas(env, cfg.eval.thetas, cfg.seed)?;
    let optima: Vec<Option<f64>> = thetas
        .par_iter()
        .enumerate()
        .map(|(i, th)| {
            let mut rng = crate::rng::stream(cfg.seed, &[0x6f7074, i as u64]);
            env.reference_optimum(th, cfg.eval.optimum_starts, &mut rng)
        })
        .collect();
    let tasks = cfg.eval.tasks.min(env.test_tasks());
    let mut jobs = Vec::new();
    for &mode in &cfg.eval.modes {
        let ckpt = match mode {
            EvalMode::Full | EvalMode::ContextOnly | EvalMode::Nominal => full,
            EvalMode::NoMeta => pretrained,
        };
        let ckpt = ckpt.ok_or_else(|| Error::Config(format!("mode {} needs a checkpoint that was not provided", mode.name())))?;
        for (ti, theta) in thetas.iter().enumerate() {
            for task in 0..tasks {
                for s in 0..cfg.eval.seeds {
                    let info = RunInfo {
                        mode,
                        theta_index: ti,
                        theta: theta.clone(),
                        task,
                        seed: cfg.seed.wrapping_add(s as u64),
                        optimum: optima[ti],
                    };
                    jobs.push((ckpt, info));
                }
            }
        }
    }
    jobs.into_par_iter()
        .map(|(ckpt, info)| {
            let oc = online_config(cfg, env, info.mode);
            run_online(Some(ckpt), env, info, &oc)
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes run logs, belief snapshots, traces, summary and curves under `dir`.
/// Replaces `dir/runs` and `dir/traces` wholesale so `aggregate` never mixes
/// in logs from an earlier evaluation.
pub fn write_eval_outputs(dir: &Path, logs: &[RunLog]) -> Result<()> {
    for sub in ["runs", "traces"] {
        let p = dir.join(sub);
        if p.exists() {
            std::fs::remove_dir_all(&p)?;
        }
    }
    for l in logs {
        let mut w = create(&dir.join("runs").join(format!("{}.csv", l.file_stem())))?;
        l.write_csv(&mut w)?;
        w.flush()?;
        if !l.trace.is_empty() {
            let mut w = create(&dir.join("traces").join(format!("{}.csv", l.file_stem())))?;
            write_trace(l, &mut w)?;
            w.flush()?;
        }
    }
    let mut w = create(&dir.join("beliefs.csv"))?;
    write_belief_snapshots(logs, &mut w)?;
    w.flush()?;
    write_aggregates(dir, logs)
}

pub fn write_aggregates(dir: &Path, logs: &[RunLog]) -> Result<()> {
    let mut w = create(&dir.join("summary.csv"))?;
    write_summary(&summarize(logs), &mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("curves.csv"))?;
    write_curves(&normalized_curves(logs), &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads every run CSV under `dir/runs`, sorted by file name.
pub fn read_eval_logs(dir: &Path) -> Result<Vec<RunLog>> {
    let runs = dir.join("runs");
    let mut paths: Vec<_> = std::fs::read_dir(&runs)
        .map_err(|e| Error::Config(format!("cannot list {}: {e}", runs.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no run logs in {}", runs.display())));
    }
    paths.iter().map(|p| RunLog::read_csv(File::open(p)?)).collect()
}

/// Human-readable dump: `block, layer, kind, row, col, value`.
pub fn export_weights<W: Write>(ckpt: &Checkpoint, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["block", "layer", "kind", "row", "col", "value"])?;
    let mut dump = |block: &str, layer: usize, kind: &str, m: &crate::numkernel::Matrix| -> Result<()> {
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                w.write_record([block, &layer.to_string(), kind, &r.to_string(), &c.to_string(), &format!("{}", m.get(r, c))])?;
            }
        }
        Ok(())
    };
    let net = &ckpt.network;
    if let Some(enc) = &net.encoder {
        for (i, l) in enc.layers.iter().enumerate() {
            dump("encoder", i, "weight", &l.weight)?;
            dump("encoder", i, "bias", &l.bias)?;
        }
    }
    for (i, l) in net.trunk.layers.iter().enumerate() {
        dump("trunk", i, "weight", &l.weight)?;
        dump("trunk", i, "bias", &l.bias)?;
    }
    let p = &ckpt.prior;
    dump("prior", 0, "w0", &p.w0)?;
    dump("prior", 0, "sigma0", &p.sigma0())?;
    dump("prior", 0, "q", &p.process_noise())?;
    dump("prior", 0, "r", &p.measurement_noise())?;
    w.flush()?;
    Ok(())
}
