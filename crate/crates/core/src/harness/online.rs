//! The online optimize / evaluate / adapt loop and its per-run log.

use std::io::{Read, Write};

use crate::adapt::{kf_update, AdaptOptions};
use crate::envs::{Environment, TraceRow};
use crate::gainopt::{RewardSpec, SearchConfig, SearchState};
use crate::harness::EvalMode;
use crate::numkernel::KernelError;
use crate::perfmodel::{Checkpoint, WeightBelief};
use crate::{Error, Result};

/// Identifies one online session.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInfo {
    pub mode: EvalMode,
    pub theta_index: usize,
    pub theta: Vec<f64>,
    pub task: usize,
    pub seed: u64,
    /// Reference optimum of a benchmark function, when known.
    pub optimum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    /// `NaN` when the trial was not run because of an earlier crash.
    pub gains: Vec<f64>,
    pub metrics: Vec<f64>,
    /// [`RewardSpec::scaled_reward`] of the metrics; zero on and after a crash.
    pub reward: f64,
    /// Running minimum of the first metric (benchmarks); `NaN` otherwise.
    pub best_value: f64,
    pub crashed: bool,
    pub simulated: bool,
    /// Predicted reward on the same scale as `reward`, and its std.
    pub mean_j: f64,
    pub std_j: f64,
    pub score: f64,
    pub candidates: usize,
    /// Smallest `xᵀ Σ x` over random unit directions after this trial.
    pub min_quad_form: f64,
    /// Belief mean after this trial.
    pub mu: Vec<f64>,
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub info: RunInfo,
    pub trials: Vec<TrialRecord>,
    pub kf_updates: usize,
    pub singularities: usize,
    pub trace: Vec<(usize, TraceRow)>,
}

/// Everything `run_online` needs besides the model and environment.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineConfig {
    pub mode: EvalMode,
    pub trials: usize,
    pub reward: RewardSpec,
    pub search: SearchConfig,
    pub adapt: AdaptOptions,
    pub psd_directions: usize,
    pub keep_scores: bool,
    pub trace: bool,
    pub benchmark: bool,
}

fn nan_vec(n: usize) -> Vec<f64> {
    vec![f64::NAN; n]
}

fn update_best(best: f64, value: f64, benchmark: bool) -> f64 {
    if benchmark {
        best.min(value)
    } else {
        f64::NAN
    }
}

/// Runs one session. `ckpt` may be `None` only in [`EvalMode::Nominal`].
pub fn run_online(
    ckpt: Option<&Checkpoint>,
    env: &dyn Environment,
    info: RunInfo,
    cfg: &OnlineConfig,
) -> Result<RunLog> {
    if cfg.mode == EvalMode::Nominal {
        return run_nominal(ckpt, env, info, cfg);
    }
    let ckpt = ckpt.ok_or_else(|| Error::Config("model-based evaluation needs a checkpoint".into()))?;
    let net = &ckpt.network;
    cfg.reward.validate(net.config.metric_dim)?;
    let (low, high) = env.gain_bounds();
    let mut search = SearchState::new(cfg.search.clone(), low, high, crate::rng::derive_seed(info.seed, &[1]))?;
    let mut psd_rng = crate::rng::stream(info.seed, &[2]);
    let mut session = env.session(&info.theta, info.task, info.seed)?;
    session.set_tracing(cfg.trace);

    let mut belief: WeightBelief = ckpt.prior.belief();
    let mut log = RunLog { info, trials: Vec::with_capacity(cfg.trials), kf_updates: 0, singularities: 0, trace: Vec::new() };
    let mut crashed = false;
    let mut best = f64::INFINITY;
    let offset = cfg.reward.scaled_offset(&net.normalizer.metric);
    let gdim = net.config.gain_dim;
    let ydim = net.config.metric_dim;
    for trial in 0..cfg.trials {
        if crashed {
            log.trials.push(TrialRecord {
                trial,
                gains: nan_vec(gdim),
                metrics: nan_vec(ydim),
                reward: 0.0,
                best_value: update_best(best, f64::INFINITY, cfg.benchmark),
                crashed: true,
                simulated: false,
                mean_j: f64::NAN,
                std_j: f64::NAN,
                score: f64::NAN,
                candidates: 0,
                min_quad_form: belief.min_quadratic_form(cfg.psd_directions, &mut psd_rng),
                mu: belief.mean.as_slice().to_vec(),
                scores: None,
            });
            continue;
        }
        let context = session.context();
        let proposal = search.propose(net, &belief, &context, &cfg.reward, cfg.keep_scores)?;
        let outcome = session.run_trial(&proposal.gains)?;
        log.trace.extend(outcome.trace.iter().map(|r| (trial, *r)));
        crashed = outcome.crashed;
        let y_norm = net.normalizer.metric.normalize(&outcome.metrics);
        let reward = if crashed { 0.0 } else { cfg.reward.scaled_reward(&outcome.metrics, &net.normalizer.metric) };
        best = update_best(best, outcome.metrics[0], cfg.benchmark);

        if cfg.mode != EvalMode::ContextOnly && !crashed {
            let phi = net.basis(&proposal.gains, &context.task, &context.z_hist, &context.u_hist)?;
            match kf_update(&belief, &phi, &y_norm, &cfg.adapt) {
                Ok((next, _)) => {
                    belief = next;
                    log.kf_updates += 1;
                }
                Err(Error::Kernel(KernelError::NotPositiveDefinite { .. })) => {
                    log.singularities += 1;
                    log::warn!("kf_update hit a non-SPD innovation covariance; belief kept");
                }
                Err(e) => return Err(e),
            }
        }
        log.trials.push(TrialRecord {
            trial,
            gains: proposal.gains,
            metrics: outcome.metrics,
            reward,
            best_value: best,
            crashed,
            simulated: true,
            mean_j: proposal.acquisition.mean + offset,
            std_j: proposal.acquisition.std,
            score: proposal.acquisition.score + offset,
            candidates: proposal.candidates,
            min_quad_form: belief.min_quadratic_form(cfg.psd_directions, &mut psd_rng),
            mu: belief.mean.as_slice().to_vec(),
            scores: proposal.scores,
        });
    }
    Ok(log)
}

fn run_nominal(ckpt: Option<&Checkpoint>, env: &dyn Environment, info: RunInfo, cfg: &OnlineConfig) -> Result<RunLog> {
    let gains = env
        .nominal_gains()
        .ok_or_else(|| Error::Config(format!("{} has no nominal gains", env.kind().name())))?;
    let metric = match ckpt {
        Some(c) => c.network.normalizer.metric.clone(),
        None => return Err(Error::Config("nominal rewards need the training normalization (a checkpoint)".into())),
    };
    let mut session = env.session(&info.theta, info.task, info.seed)?;
    session.set_tracing(cfg.trace);
    let mut log = RunLog { info, trials: Vec::with_capacity(cfg.trials), kf_updates: 0, singularities: 0, trace: Vec::new() };
    let mut crashed = false;
    let mut best = f64::INFINITY;
    for trial in 0..cfg.trials {
        let (metrics, reward, simulated) = if crashed {
            (nan_vec(metric.dim()), 0.0, false)
        } else {
            let out = session.run_trial(&gains)?;
            log.trace.extend(out.trace.iter().map(|r| (trial, *r)));
            crashed = out.crashed;
            best = update_best(best, out.metrics[0], cfg.benchmark);
            let r = if crashed { 0.0 } else { cfg.reward.scaled_reward(&out.metrics, &metric) };
            (out.metrics, r, true)
        };
        log.trials.push(TrialRecord {
            trial,
            gains: if simulated { gains.clone() } else { nan_vec(gains.len()) },
            metrics,
            reward,
            best_value: update_best(best, f64::INFINITY, cfg.benchmark),
            crashed,
            simulated,
            mean_j: f64::NAN,
            std_j: f64::NAN,
            score: f64::NAN,
            candidates: 0,
            min_quad_form: f64::NAN,
            mu: Vec::new(),
            scores: None,
        });
    }
    Ok(log)
}

fn fmt(v: f64) -> String {
    // `{}` on f64 is the shortest round-trip representation.
    format!("{v}")
}

impl RunLog {
    pub fn file_stem(&self) -> String {
        format!("{}_theta{:03}_task{}_seed{}", self.info.mode.name(), self.info.theta_index, self.info.task, self.info.seed)
    }

    pub fn final_reward(&self) -> f64 {
        self.trials.last().map_or(f64::NAN, |t| t.reward)
    }

    pub fn any_crash(&self) -> bool {
        self.trials.iter().any(|t| t.crashed)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let g = self.trials.first().map_or(0, |t| t.gains.len());
        let y = self.trials.first().map_or(0, |t| t.metrics.len());
        let mut header: Vec<String> =
            ["mode", "theta_index", "task", "seed"].iter().map(|s| s.to_string()).collect();
        header.extend((0..self.info.theta.len()).map(|k| format!("theta_{k}")));
        header.extend(["optimum", "trial"].iter().map(|s| s.to_string()));
        header.extend((0..g).map(|k| format!("g_{k}")));
        header.extend((0..y).map(|k| format!("y_{k}")));
        header.extend(
            ["reward", "best_value", "crashed", "simulated", "mean_j", "std_j", "score", "candidates", "min_quad_form"]
                .iter()
                .map(|s| s.to_string()),
        );
        w.write_record(&header)?;
        for t in &self.trials {
            let mut row = vec![
                self.info.mode.name().to_string(),
                self.info.theta_index.to_string(),
                self.info.task.to_string(),
                self.info.seed.to_string(),
            ];
            row.extend(self.info.theta.iter().map(|v| fmt(*v)));
            row.push(self.info.optimum.map_or_else(String::new, fmt));
            row.push(t.trial.to_string());
            row.extend(t.gains.iter().map(|v| fmt(*v)));
            row.extend(t.metrics.iter().map(|v| fmt(*v)));
            row.extend([
                fmt(t.reward),
                fmt(t.best_value),
                u8::from(t.crashed).to_string(),
                u8::from(t.simulated).to_string(),
                fmt(t.mean_j),
                fmt(t.std_j),
                fmt(t.score),
                t.candidates.to_string(),
                fmt(t.min_quad_form),
            ]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses what [`RunLog::write_csv`] wrote. Belief means and candidate
    /// scores are not part of that file and come back empty.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let header = rd.headers()?.clone();
        let col = |name: &str| {
            header.iter().position(|h| h == name).ok_or_else(|| Error::Format(format!("run log lacks column {name}")))
        };
        let prefixed = |p: &str| -> Vec<usize> {
            header.iter().enumerate().filter(|(_, h)| h.starts_with(p) && h[p.len()..].parse::<usize>().is_ok()).map(|(i, _)| i).collect()
        };
        let (c_mode, c_ti, c_task, c_seed, c_opt, c_trial) =
            (col("mode")?, col("theta_index")?, col("task")?, col("seed")?, col("optimum")?, col("trial")?);
        let (c_rew, c_best, c_crash, c_sim) = (col("reward")?, col("best_value")?, col("crashed")?, col("simulated")?);
        let (c_mj, c_sj, c_sc, c_cand, c_q) =
            (col("mean_j")?, col("std_j")?, col("score")?, col("candidates")?, col("min_quad_form")?);
        let (c_theta, c_g, c_y) = (prefixed("theta_"), prefixed("g_"), prefixed("y_"));

        let parse_f = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}"))) };
        let parse_u = |s: &str| -> Result<u64> { s.parse::<u64>().map_err(|e| Error::Format(format!("{s:?}: {e}"))) };
        let mut info: Option<RunInfo> = None;
        let mut trials = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if info.is_none() {
                info = Some(RunInfo {
                    mode: rec[c_mode].parse()?,
                    theta_index: parse_u(&rec[c_ti])? as usize,
                    theta: c_theta.iter().map(|&i| parse_f(&rec[i])).collect::<Result<_>>()?,
                    task: parse_u(&rec[c_task])? as usize,
                    seed: parse_u(&rec[c_seed])?,
                    optimum: if rec[c_opt].is_empty() { None } else { Some(parse_f(&rec[c_opt])?) },
                });
            }
            trials.push(TrialRecord {
                trial: parse_u(&rec[c_trial])? as usize,
                gains: c_g.iter().map(|&i| parse_f(&rec[i])).collect::<Result<_>>()?,
                metrics: c_y.iter().map(|&i| parse_f(&rec[i])).collect::<Result<_>>()?,
                reward: parse_f(&rec[c_rew])?,
                best_value: parse_f(&rec[c_best])?,
                crashed: &rec[c_crash] == "1",
                simulated: &rec[c_sim] == "1",
                mean_j: parse_f(&rec[c_mj])?,
                std_j: parse_f(&rec[c_sj])?,
                score: parse_f(&rec[c_sc])?,
                candidates: parse_u(&rec[c_cand])? as usize,
                min_quad_form: parse_f(&rec[c_q])?,
                mu: Vec::new(),
                scores: None,
            });
        }
        let info = info.ok_or_else(|| Error::Format("run log has no rows".into()))?;
        Ok(RunLog { info, trials, kf_updates: 0, singularities: 0, trace: Vec::new() })
    }
}

/// Belief means of many runs: `mode, theta_index, task, seed, trial, mu_0..`.
pub fn write_belief_snapshots<W: Write>(logs: &[RunLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let nb = logs.iter().flat_map(|l| l.trials.iter()).map(|t| t.mu.len()).max().unwrap_or(0);
    let mut header: Vec<String> = ["mode", "theta_index", "task", "seed", "trial"].iter().map(|s| s.to_string()).collect();
    header.extend((0..nb).map(|k| format!("mu_{k}")));
    w.write_record(&header)?;
    for l in logs {
        for t in l.trials.iter().filter(|t| t.mu.len() == nb) {
            let mut row = vec![
                l.info.mode.name().to_string(),
                l.info.theta_index.to_string(),
                l.info.task.to_string(),
                l.info.seed.to_string(),
                t.trial.to_string(),
            ];
            row.extend(t.mu.iter().map(|v| fmt(*v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace<W: Write>(log: &RunLog, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trial", "t", "x", "y", "v", "omega", "e_lat", "u_s", "u_g", "u_b", "slip"])?;
    for (trial, r) in &log.trace {
        w.write_record([
            trial.to_string(),
            fmt(r.t),
            fmt(r.x),
            fmt(r.y),
            fmt(r.v),
            fmt(r.omega),
            fmt(r.e_lat),
            fmt(r.u_s),
            fmt(r.u_g),
            fmt(r.u_b),
            r.slip.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
