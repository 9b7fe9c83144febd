//! Two-phase training.
//!
//! Phase 1 fits the basis network as an average model with a fixed last
//! layer `w_pre`. Phase 2 samples a small support set from each parameter
//! batch, runs the Kalman filter from `(w0, Σ0)` on the tape, scores the
//! adapted mean on the batch and takes one gradient step on the network and
//! on the filter prior `(w0, Σ0, Q, R)`.

mod dataset;
mod optim;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_sequence, kf_update_tracked, AdaptOptions, TrackedBelief};
use crate::numkernel::{KernelError, Matrix, Tape, Var};
use crate::perfmodel::{
    BasisNetwork, BatchInputs, Checkpoint, EpisodeRecord, KfPrior, ModelConfig, Normalizer, TrainingStage,
    MEASUREMENT_NOISE_FLOOR,
};
use crate::{Error, Result};

pub use dataset::{Dataset, ParamBatch};
pub use optim::{clip_global_norm, Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub meta_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_optimizer: OptimizerKind,
    /// Meta-training step size for every parameter group.
    pub lr: f64,
    /// Overrides `lr` for the filter prior `(w0, Σ0, Q, R)`.
    pub prior_lr: Option<f64>,
    pub support_min: usize,
    pub support_max: usize,
    /// Score the adapted model only on records outside the support set.
    pub exclude_support: bool,
    /// Joint gradient-norm cap, off by default.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 50,
            meta_epochs: 45,
            pretrain_lr: 1e-3,
            pretrain_optimizer: OptimizerKind::Sgd,
            lr: 1e-3,
            prior_lr: None,
            support_min: 1,
            support_max: 16,
            exclude_support: false,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, batch_len: usize) -> Result<()> {
        if !(self.pretrain_lr >= 0.0 && self.lr >= 0.0 && self.prior_lr.is_none_or(|a| a >= 0.0)) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.support_min > self.support_max {
            return Err(Error::Config("support_min > support_max".into()));
        }
        if self.support_max > batch_len {
            return Err(Error::Config(format!(
                "support_max {} exceeds the smallest batch ({batch_len} records)",
                self.support_max
            )));
        }
        if self.exclude_support && self.support_max >= batch_len {
            return Err(Error::Config("exclude_support needs support_max < batch size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Meta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: Phase,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Meta-steps dropped because the filter hit a non-SPD matrix.
    pub skipped: usize,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Mean loss per epoch of the given phase.
    pub fn epoch_means(&self, phase: Phase) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.phase == phase) {
            if sums.len() <= r.epoch {
                sums.resize(r.epoch + 1, (0.0, 0));
            }
            sums[r.epoch].0 += r.loss;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

/// Fixed last layer for pretraining: `1 / sqrt(N_b)` in every entry.
pub fn w_pre(basis_dim: usize) -> Matrix {
    Matrix::filled(basis_dim, 1, 1.0 / (basis_dim as f64).sqrt())
}

fn mse<'t>(pred: Var<'t>, targets: &Matrix) -> Result<Var<'t>, KernelError> {
    let t = pred.tape().constant(targets.clone());
    pred.sub(&t)?.square()?.mean()
}

/// `Φ` of every record stacked: `(B * N_y) x N_b`.
fn stacked_basis<'t>(net: &BasisNetwork, tape: &'t Tape, params: &[Var<'t>], inputs: &BatchInputs) -> Result<Var<'t>> {
    let out = net.forward_tracked(tape, params, inputs)?;
    let c = &net.config;
    Ok(out.reshape(inputs.len() * c.metric_dim, c.basis_dim)?)
}

/// Mean squared error of `Φ w` against normalized targets, without a tape.
pub fn plain_loss(net: &BasisNetwork, records: &[&EpisodeRecord], w: &Matrix) -> Result<f64> {
    let (inputs, targets) = net.prepare(records)?;
    let c = &net.config;
    let phi = net.forward_plain(&inputs)?.reshape(inputs.len() * c.metric_dim, c.basis_dim)?;
    let pred = phi.matmul(w)?;
    Ok(pred.sub(&targets)?.as_slice().iter().map(|v| v * v).sum::<f64>() / pred.len() as f64)
}

/// Gradients of one loss evaluation, in the same order as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    /// Ordered as [`BasisNetwork::params`].
    pub network: Vec<Matrix>,
    /// Filter prior gradients, stored in the prior's own shape.
    pub prior: KfPrior,
}

fn grad_or_zero(grads: &crate::numkernel::Gradients, v: Var<'_>) -> Matrix {
    grads.wrt(v).cloned().unwrap_or_else(|| {
        let (r, c) = v.shape();
        Matrix::zeros(r, c)
    })
}

/// Pretraining loss `mean((Φ w_pre − y)²)` and its network gradient.
pub fn pretrain_loss_and_grad(net: &BasisNetwork, records: &[&EpisodeRecord], w_pre: &Matrix) -> Result<(f64, Vec<Matrix>)> {
    let (inputs, targets) = net.prepare(records)?;
    let tape = Tape::new();
    let params = net.register(&tape, true);
    let phi = stacked_basis(net, &tape, &params, &inputs)?;
    let w = tape.constant(w_pre.clone());
    let loss = mse(phi.matmul(&w)?, &targets)?;
    let grads = tape.backward(loss)?;
    Ok((loss.scalar(), params.iter().map(|p| grad_or_zero(&grads, *p)).collect()))
}

/// Meta-loss for one parameter batch: the filter runs from the prior over
/// `records[support]` in the given order, then the adapted mean is scored on
/// all records (or only the others with `exclude_support`).
pub fn meta_loss_and_grad(
    net: &BasisNetwork,
    prior: &KfPrior,
    records: &[&EpisodeRecord],
    support: &[usize],
    exclude_support: bool,
) -> Result<(f64, Gradient)> {
    let c = &net.config;
    if support.iter().any(|&i| i >= records.len()) {
        return Err(Error::InvalidInput("support index out of range".into()));
    }
    let (inputs, targets) = net.prepare(records)?;
    let tape = Tape::new();
    let params = net.register(&tape, true);
    let w0 = tape.param(prior.w0.clone());
    let l0 = tape.param(prior.sigma0_factor.clone());
    let lq = tape.param(prior.q_factor.clone());
    let lr = tape.param(prior.r_factor.clone());

    let phi = stacked_basis(net, &tape, &params, &inputs)?;
    let floor = tape.constant(Matrix::identity(c.metric_dim).scale(MEASUREMENT_NOISE_FLOOR));
    let q = lq.psd_from_factor()?;
    let r = lr.psd_from_factor()?.add(&floor)?;
    let mut belief = TrackedBelief { mean: w0, cov: l0.psd_from_factor()? };
    for &i in support {
        let phi_i = phi.rows_slice(i * c.metric_dim, c.metric_dim)?;
        let y_i = tape.constant(targets.block(i * c.metric_dim, 0, c.metric_dim, 1)?);
        belief = kf_update_tracked(belief, q, r, phi_i, y_i)?;
    }
    let pred = phi.matmul(&belief.mean)?;
    let loss = if exclude_support {
        let mut mask = Matrix::filled(targets.rows(), 1, 1.0);
        for &i in support {
            for k in 0..c.metric_dim {
                mask.set(i * c.metric_dim + k, 0, 0.0);
            }
        }
        let kept = mask.sum();
        if kept == 0.0 {
            return Err(Error::InvalidInput("exclude_support left no records to score".into()));
        }
        let m = tape.constant(mask);
        let t = tape.constant(targets);
        pred.sub(&t)?.mul(&m)?.square()?.sum()?.scale(1.0 / kept)?
    } else {
        mse(pred, &targets)?
    };
    let grads = tape.backward(loss)?;
    let gradient = Gradient {
        network: params.iter().map(|p| grad_or_zero(&grads, *p)).collect(),
        prior: KfPrior {
            w0: grad_or_zero(&grads, w0),
            sigma0_factor: grad_or_zero(&grads, l0),
            q_factor: grad_or_zero(&grads, lq),
            r_factor: grad_or_zero(&grads, lr),
        },
    };
    Ok((loss.scalar(), gradient))
}

fn sample_support(n_records: usize, cfg: &TrainConfig, rng: &mut crate::rng::Rng) -> Vec<usize> {
    let n = rng.random_range(cfg.support_min..=cfg.support_max);
    let mut idx: Vec<usize> = (0..n_records).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx
}

fn apply_grad_clip(cfg: &TrainConfig, grads: &mut [Matrix]) {
    if let Some(max) = cfg.grad_clip {
        clip_global_norm(grads, max);
    }
}

/// Phase 1. Only the network moves; `w_pre` stays fixed.
pub fn pretrain(net: &mut BasisNetwork, w_pre: &Matrix, dataset: &Dataset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<()> {
    let shapes: Vec<_> = net.params().iter().map(|p| p.shape()).collect();
    let mut opt = Optimizer::new(cfg.pretrain_optimizer, &shapes);
    let lrs = vec![cfg.pretrain_lr; shapes.len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.pretrain_epochs {
        let mut rng = crate::rng::stream(cfg.seed, &[1, epoch as u64]);
        order.shuffle(&mut rng);
        for &b in &order {
            let records: Vec<&EpisodeRecord> = dataset.batches[b].records.iter().collect();
            let (loss, mut grads) = pretrain_loss_and_grad(net, &records, w_pre)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("pretraining diverged at epoch {epoch}, batch {b}")));
            }
            apply_grad_clip(cfg, &mut grads);
            opt.step(&mut net.params_mut(), &grads, &lrs);
            log.rows.push(LogRow { epoch, phase: Phase::Pretrain, batch: b, loss });
        }
        log::debug!("pretrain epoch {epoch}: {:.5}", log.epoch_means(Phase::Pretrain)[epoch]);
    }
    Ok(())
}

/// Result of one meta-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { loss: f64 },
    /// The filter hit a non-SPD matrix; parameters were left untouched.
    Skipped,
}

/// Phase 2 step on one parameter batch with an explicit support set.
pub fn meta_step(
    net: &mut BasisNetwork,
    prior: &mut KfPrior,
    records: &[&EpisodeRecord],
    support: &[usize],
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let (loss, grad) = match meta_loss_and_grad(net, prior, records, support, cfg.exclude_support) {
        Ok(v) => v,
        Err(Error::Kernel(KernelError::NotPositiveDefinite { op, pivot, value })) => {
            log::warn!("meta-step skipped: {op} pivot {pivot} = {value:e}");
            return Ok(StepOutcome::Skipped);
        }
        Err(e) => return Err(e),
    };
    if !loss.is_finite() {
        return Err(Error::Numerical("meta-loss is not finite".into()));
    }
    let n_net = grad.network.len();
    let mut grads = grad.network;
    grads.extend([grad.prior.w0, grad.prior.sigma0_factor, grad.prior.q_factor, grad.prior.r_factor]);
    apply_grad_clip(cfg, &mut grads);
    let prior_lr = cfg.prior_lr.unwrap_or(cfg.lr);
    let mut lrs = vec![cfg.lr; n_net];
    lrs.extend([prior_lr; 4]);
    let mut params = net.params_mut();
    params.extend([&mut prior.w0, &mut prior.sigma0_factor, &mut prior.q_factor, &mut prior.r_factor]);
    Optimizer::Sgd.step(&mut params, &grads, &lrs);
    Ok(StepOutcome::Applied { loss })
}

/// Phase 2 over the whole dataset.
pub fn meta_train(net: &mut BasisNetwork, prior: &mut KfPrior, dataset: &Dataset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<()> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.meta_epochs {
        let mut rng = crate::rng::stream(cfg.seed, &[2, epoch as u64]);
        order.shuffle(&mut rng);
        for &b in &order {
            let records: Vec<&EpisodeRecord> = dataset.batches[b].records.iter().collect();
            let support = sample_support(records.len(), cfg, &mut rng);
            match meta_step(net, prior, &records, &support, cfg)? {
                StepOutcome::Applied { loss } => log.rows.push(LogRow { epoch, phase: Phase::Meta, batch: b, loss }),
                StepOutcome::Skipped => log.skipped += 1,
            }
        }
        log::debug!("meta epoch {epoch}: {:.5}", log.epoch_means(Phase::Meta).get(epoch).copied().unwrap_or(f64::NAN));
    }
    Ok(())
}

/// Fits normalization, initializes a fresh network and runs phase 1.
/// The returned checkpoint carries the identity prior around `w_pre`.
pub fn pretrain_from_scratch(config: ModelConfig, dataset: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    dataset.validate()?;
    cfg.validate(dataset.min_batch_len())?;
    let normalizer = Normalizer::fit(dataset.records())?;
    let mut net = BasisNetwork::new(config, normalizer, cfg.seed)?;
    let w = w_pre(net.config.basis_dim);
    let mut log = TrainLog::default();
    pretrain(&mut net, &w, dataset, cfg, &mut log)?;
    let prior = KfPrior::identity(w, net.config.metric_dim);
    Ok((Checkpoint { stage: TrainingStage::Pretrained, network: net, prior }, log))
}

/// Phase 2 starting from a pretrained checkpoint.
pub fn meta_train_checkpoint(ckpt: &Checkpoint, dataset: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    dataset.validate()?;
    cfg.validate(dataset.min_batch_len())?;
    let mut net = ckpt.network.clone();
    let mut prior = ckpt.prior.clone();
    let mut log = TrainLog::default();
    meta_train(&mut net, &mut prior, dataset, cfg, &mut log)?;
    Ok((Checkpoint { stage: TrainingStage::MetaTrained, network: net, prior }, log))
}

/// Both phases. With `meta = false` only phase 1 runs (the `no-meta` ablation).
pub fn train_full(config: ModelConfig, dataset: &Dataset, cfg: &TrainConfig, meta: bool) -> Result<(Checkpoint, TrainLog)> {
    let (pre, mut log) = pretrain_from_scratch(config, dataset, cfg)?;
    if !meta {
        return Ok((pre, log));
    }
    let (ckpt, meta_log) = meta_train_checkpoint(&pre, dataset, cfg)?;
    log.rows.extend(meta_log.rows);
    log.skipped += meta_log.skipped;
    Ok((ckpt, log))
}

/// Normalized-space MSE on one batch before and after filtering over the
/// first `n_support` records. Both are scored on the remaining records.
pub fn heldout_mse(ckpt: &Checkpoint, records: &[&EpisodeRecord], n_support: usize) -> Result<(f64, f64)> {
    if n_support >= records.len() {
        return Err(Error::InvalidInput("need records beyond the support set".into()));
    }
    let net = &ckpt.network;
    let (inputs, targets) = net.prepare(records)?;
    let c = &net.config;
    let phi = net.forward_plain(&inputs)?.reshape(inputs.len() * c.metric_dim, c.basis_dim)?;
    let phi_i = |i: usize| phi.block(i * c.metric_dim, 0, c.metric_dim, c.basis_dim);
    let steps: Vec<(Matrix, Vec<f64>)> = (0..n_support)
        .map(|i| Ok((phi_i(i)?, targets.as_slice()[i * c.metric_dim..(i + 1) * c.metric_dim].to_vec())))
        .collect::<Result<_>>()?;
    let prior_belief = ckpt.prior.belief();
    let adapted = if steps.is_empty() {
        prior_belief.clone()
    } else {
        adapt_sequence(&prior_belief, &steps, &AdaptOptions::default())?.belief
    };
    let score = |w: &Matrix| -> Result<f64> {
        let pred = phi.matmul(w)?;
        let rows = n_support * c.metric_dim..pred.rows();
        let n = rows.len() as f64;
        Ok(rows.map(|k| (pred.get(k, 0) - targets.get(k, 0)).powi(2)).sum::<f64>() / n)
    };
    Ok((score(&prior_belief.mean)?, score(&adapted.mean)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::Normalizer;

    fn toy_dataset(n_batches: usize, per: usize, seed: u64) -> Dataset {
        let mut rng = crate::rng::stream(seed, &[]);
        let batches = (0..n_batches)
            .map(|_| {
                let theta = vec![rng.random_range(0.5..1.5), rng.random_range(-1.0..1.0)];
                let records = (0..per)
                    .map(|_| {
                        let x: f64 = rng.random_range(-1.0..1.0);
                        let y = theta[0] * x + theta[1];
                        EpisodeRecord::without_history(vec![x], vec![y], theta.clone())
                    })
                    .collect();
                ParamBatch { theta, records }
            })
            .collect();
        Dataset { env: "toy".into(), batches }
    }

    fn toy_config() -> ModelConfig {
        ModelConfig { gain_dim: 1, trunk_layers: vec![8], basis_dim: 3, ..ModelConfig::branin() }
    }

    #[test]
    fn empty_support_equals_plain_loss() {
        let ds = toy_dataset(1, 10, 0);
        let normalizer = Normalizer::fit(ds.records()).unwrap();
        let net = BasisNetwork::new(toy_config(), normalizer, 0).unwrap();
        let prior = KfPrior::identity(w_pre(3), 1);
        let records: Vec<_> = ds.batches[0].records.iter().collect();
        let (loss, _) = meta_loss_and_grad(&net, &prior, &records, &[], false).unwrap();
        let plain = plain_loss(&net, &records, &prior.w0).unwrap();
        assert!((loss - plain).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let ds = toy_dataset(3, 8, 1);
        let cfg = TrainConfig { pretrain_epochs: 2, meta_epochs: 2, pretrain_lr: 0.0, lr: 0.0, support_max: 4, ..TrainConfig::default() };
        let normalizer = Normalizer::fit(ds.records()).unwrap();
        let fresh = BasisNetwork::new(toy_config(), normalizer, cfg.seed).unwrap();
        let (ckpt, log) = train_full(toy_config(), &ds, &cfg, true).unwrap();
        assert_eq!(ckpt.network, fresh);
        assert_eq!(ckpt.prior, KfPrior::identity(w_pre(3), 1));
        assert_eq!(log.rows.len(), 12);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy_dataset(4, 8, 2);
        let cfg = TrainConfig { pretrain_epochs: 2, meta_epochs: 2, lr: 1e-2, pretrain_lr: 1e-2, support_max: 4, ..TrainConfig::default() };
        let (a, la) = train_full(toy_config(), &ds, &cfg, true).unwrap();
        let (b, lb) = train_full(toy_config(), &ds, &cfg, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn support_larger_than_batch_is_a_config_error() {
        let ds = toy_dataset(2, 4, 0);
        let cfg = TrainConfig { support_max: 16, ..TrainConfig::default() };
        assert!(matches!(train_full(toy_config(), &ds, &cfg, true), Err(Error::Config(_))));
    }

    #[test]
    fn no_meta_keeps_identity_prior() {
        let ds = toy_dataset(2, 8, 3);
        let cfg = TrainConfig { pretrain_epochs: 1, support_max: 4, ..TrainConfig::default() };
        let (ckpt, _) = train_full(toy_config(), &ds, &cfg, false).unwrap();
        assert_eq!(ckpt.stage, TrainingStage::Pretrained);
        assert_eq!(ckpt.prior, KfPrior::identity(w_pre(3), 1));
    }

    #[test]
    fn log_csv_has_header() {
        let log = TrainLog { rows: vec![LogRow { epoch: 0, phase: Phase::Meta, batch: 3, loss: 0.5 }], skipped: 0 };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,phase,batch,loss\n0,meta,3,0.5\n");
    }
}
