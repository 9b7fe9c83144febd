//! Gain selection by particle random search on an optimistic reward.
//!
//! With a linear reward `J(y) = rᵀ y` and `ŷ ~ N(Φ μ, Φ Σ Φᵀ)`, `J(ŷ)` is
//! Gaussian with mean `rᵀ Φ μ` and variance `rᵀ Φ Σ Φᵀ r`. Each candidate is
//! scored by `mean + β std`. Candidates are uniform samples plus Gaussian
//! jitter around the gains chosen in the last few trials.

use std::collections::VecDeque;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envs::Context;
use crate::numkernel::Matrix;
use crate::perfmodel::{BasisNetwork, Standardizer, WeightBelief};
use crate::{Error, Result};

/// Linear reward on normalized metrics plus the confidence coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub weights: Vec<f64>,
    pub beta: f64,
}

impl RewardSpec {
    pub fn validate(&self, metric_dim: usize) -> Result<()> {
        if self.weights.len() != metric_dim {
            return Err(Error::Config(format!("{} reward weights for {metric_dim} metrics", self.weights.len())));
        }
        if self.weights.iter().any(|w| !w.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("reward weights must be finite and beta >= 0".into()));
        }
        Ok(())
    }

    /// `rᵀ y` for already normalized metrics.
    pub fn reward(&self, y_normalized: &[f64]) -> f64 {
        self.weights.iter().zip(y_normalized).map(|(r, y)| r * y).sum()
    }

    /// `Σ r_k y_k / σ_k` on raw metrics: scaled by the training spread but
    /// not centered, so non-negative metrics and weights give a reward
    /// `>= 0` and a zeroed crash reward is the floor.
    pub fn scaled_reward(&self, y_raw: &[f64], metric: &Standardizer) -> f64 {
        self.weights.iter().zip(y_raw).zip(&metric.std).map(|((r, y), s)| r * y / s).sum()
    }

    /// `scaled_reward(y) − reward(normalize(y))`, the same for every `y`.
    pub fn scaled_offset(&self, metric: &Standardizer) -> f64 {
        self.weights.iter().zip(metric.mean.iter().zip(&metric.std)).map(|(r, (m, s))| r * m / s).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Acquisition {
    pub mean: f64,
    pub std: f64,
    pub score: f64,
}

fn acquisition_from_direction(a: &[f64], belief: &WeightBelief, beta: f64, noise_var: f64) -> Acquisition {
    let mean: f64 = a.iter().zip(belief.mean.as_slice()).map(|(x, m)| x * m).sum();
    let var = (belief.cov.quadratic_form(a) + noise_var).max(0.0);
    let std = var.sqrt();
    Acquisition { mean, std, score: mean + beta * std }
}

/// Score of one basis matrix `Φ` (`N_y x N_b`).
pub fn acquisition(phi: &Matrix, belief: &WeightBelief, spec: &RewardSpec) -> Result<Acquisition> {
    if phi.rows() != spec.weights.len() || phi.cols() != belief.basis_dim() {
        return Err(crate::numkernel::KernelError::Shape { op: "acquisition", lhs: phi.shape(), rhs: (spec.weights.len(), belief.basis_dim()) }.into());
    }
    // a = Φᵀ r
    let a = phi.t_matmul(&Matrix::column(&spec.weights))?.into_vec();
    Ok(acquisition_from_direction(&a, belief, spec.beta, 0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub n_random: usize,
    /// Perturbations drawn around each elite.
    pub n_perturb: usize,
    /// How many past trials contribute an elite.
    pub elite_trials: usize,
    /// Perturbation std as a fraction of each gain's range.
    pub sigma_fraction: f64,
    /// Score with `rᵀ(ΦΣΦᵀ + R)r` instead of `rᵀΦΣΦᵀr`.
    pub include_noise: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { n_random: 256, n_perturb: 32, elite_trials: 3, sigma_fraction: 0.05, include_noise: false }
    }
}

/// Chosen gains with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub gains: Vec<f64>,
    pub acquisition: Acquisition,
    pub candidates: usize,
    /// Every candidate's score, when requested.
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SearchState {
    pub config: SearchConfig,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    elites: VecDeque<Vec<f64>>,
    rng: crate::rng::Rng,
}

impl SearchState {
    pub fn new(config: SearchConfig, low: Vec<f64>, high: Vec<f64>, seed: u64) -> Result<Self> {
        if low.len() != high.len() || low.is_empty() || low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("gain bounds need low < high in every dimension".into()));
        }
        if config.n_random == 0 && config.n_perturb * config.elite_trials == 0 {
            return Err(Error::Config("search has no candidates".into()));
        }
        if !(config.sigma_fraction >= 0.0) {
            return Err(Error::Config("sigma_fraction must be >= 0".into()));
        }
        Ok(Self { config, low, high, elites: VecDeque::new(), rng: crate::rng::stream(seed, &[0x6761_696e]) })
    }

    pub fn elites(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.elites.iter()
    }

    /// Remembers `gains` as the newest elite, dropping the oldest beyond `elite_trials`.
    pub fn push_elite(&mut self, gains: Vec<f64>) {
        self.elites.push_back(gains);
        while self.elites.len() > self.config.elite_trials {
            self.elites.pop_front();
        }
    }

    /// `G_r ∪ G_e` in a fixed order: uniform samples first, then perturbations
    /// of each elite from oldest to newest.
    pub fn candidates(&mut self) -> Vec<Vec<f64>> {
        let dim = self.low.len();
        let mut out = Vec::with_capacity(self.config.n_random + self.elites.len() * self.config.n_perturb);
        for _ in 0..self.config.n_random {
            out.push((0..dim).map(|d| self.rng.random_range(self.low[d]..=self.high[d])).collect());
        }
        let std: Vec<f64> = (0..dim).map(|d| self.config.sigma_fraction * (self.high[d] - self.low[d])).collect();
        for e in &self.elites {
            for _ in 0..self.config.n_perturb {
                out.push(
                    (0..dim)
                        .map(|d| {
                            let jitter = if std[d] > 0.0 {
                                Normal::new(0.0, std[d]).expect("finite std").sample(&mut self.rng)
                            } else {
                                0.0
                            };
                            (e[d] + jitter).clamp(self.low[d], self.high[d])
                        })
                        .collect(),
                );
            }
        }
        out
    }

    /// Scores all candidates in one batch, returns the best (lowest index on
    /// ties) and records it as an elite.
    pub fn propose(
        &mut self,
        network: &BasisNetwork,
        belief: &WeightBelief,
        context: &Context,
        spec: &RewardSpec,
        keep_scores: bool,
    ) -> Result<Proposal> {
        spec.validate(network.config.metric_dim)?;
        let cands = self.candidates();
        let phis = network.basis_batch(&cands, &context.task, &context.z_hist, &context.u_hist)?;
        let r = Matrix::column(&spec.weights);
        let noise_var = if self.config.include_noise { belief.measurement_noise.quadratic_form(&spec.weights) } else { 0.0 };
        let mut best: Option<(usize, Acquisition)> = None;
        let mut scores = keep_scores.then(|| Vec::with_capacity(cands.len()));
        for (i, phi) in phis.iter().enumerate() {
            let a = phi.t_matmul(&r)?.into_vec();
            let acq = acquisition_from_direction(&a, belief, spec.beta, noise_var);
            if let Some(s) = scores.as_mut() {
                s.push(acq.score);
            }
            if !acq.score.is_finite() {
                return Err(Error::Numerical(format!("non-finite acquisition score for candidate {i}")));
            }
            if best.is_none_or(|(_, b)| acq.score > b.score) {
                best = Some((i, acq));
            }
        }
        let (i, acquisition) = best.expect("at least one candidate");
        let gains = cands[i].clone();
        self.push_elite(gains.clone());
        Ok(Proposal { gains, acquisition, candidates: cands.len(), scores })
    }
}
