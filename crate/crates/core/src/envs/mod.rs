//! Evaluation systems: randomized Branin and Hartmann functions and a 2D race
//! car with a nonlinear PD/threshold controller on procedural tracks.

pub mod branin;
pub mod car;
pub mod hartmann;
pub mod track;

use rand::Rng as _;

use crate::numkernel::Matrix;
use crate::perfmodel::{EpisodeRecord, ModelConfig};
use crate::rng::Rng;
use crate::{Error, Result};

pub use branin::{Branin, BraninParams};
pub use car::{CarGains, CarModel, CarParams, RaceCar, RaceCarConfig, TraceRow};
pub use hartmann::{Hartmann, HartmannParams};
pub use track::{gen_track, Track, TrackConfig};

/// Axis-aligned box of system parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBox {
    pub names: Vec<&'static str>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ParamBox {
    pub fn new(names: &[&'static str], low: &[f64], high: &[f64]) -> Self {
        assert!(names.len() == low.len() && low.len() == high.len());
        Self { names: names.to_vec(), low: low.to_vec(), high: high.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.iter().zip(self.low.iter().zip(&self.high)).all(|(t, (lo, hi))| *t >= *lo && *t <= *hi)
    }

    /// `true` when every side of `self` lies inside `outer`.
    pub fn is_within(&self, outer: &ParamBox) -> bool {
        self.low.iter().zip(&outer.low).all(|(a, b)| a >= b) && self.high.iter().zip(&outer.high).all(|(a, b)| a <= b)
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| if h > l { rng.random_range(*l..*h) } else { *l })
            .collect()
    }
}

/// Draws from `test \ train` by rejection.
pub fn sample_out_of_distribution(train: &ParamBox, test: &ParamBox, rng: &mut Rng) -> Result<Vec<f64>> {
    if !train.is_within(test) {
        return Err(Error::Config("test ranges must contain the training ranges".into()));
    }
    for _ in 0..100_000 {
        let theta = test.sample(rng);
        if !train.contains(&theta) {
            return Ok(theta);
        }
    }
    Err(Error::Config("test range minus training range is (numerically) empty".into()))
}

/// Task encoding and recent history at the moment gains are chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub task: Vec<f64>,
    pub z_hist: Matrix,
    pub u_hist: Matrix,
}

impl Context {
    pub fn empty() -> Self {
        Self { task: Vec::new(), z_hist: Matrix::zeros(0, 0), u_hist: Matrix::zeros(0, 0) }
    }
}

/// What one online trial produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    /// Metric vector `y` in the environment's own (inverted) convention.
    pub metrics: Vec<f64>,
    pub crashed: bool,
    /// Per-step trace, filled only when tracing is on.
    pub trace: Vec<car::TraceRow>,
}

/// A stateful online evaluation on one fixed system.
pub trait Session {
    fn context(&self) -> Context;
    fn run_trial(&mut self, gains: &[f64]) -> Result<TrialOutcome>;
    /// Record per-step traces in subsequent trials, where supported.
    fn set_tracing(&mut self, _on: bool) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Branin,
    Hartmann,
    RaceCar,
}

impl EnvKind {
    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::Branin => "branin",
            EnvKind::Hartmann => "hartmann",
            EnvKind::RaceCar => "race-car",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branin" => Ok(EnvKind::Branin),
            "hartmann" => Ok(EnvKind::Hartmann),
            "race-car" | "race_car" | "racecar" => Ok(EnvKind::RaceCar),
            other => Err(Error::Config(format!("unknown environment {other:?}"))),
        }
    }
}

/// A system OCCAM can tune. Implementations are pure given their inputs:
/// every random choice comes from the supplied generator or seed.
pub trait Environment: Sync {
    fn kind(&self) -> EnvKind;
    fn model_config(&self) -> ModelConfig;
    fn gain_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn train_box(&self) -> ParamBox;
    fn test_box(&self) -> ParamBox;
    /// Reward weights `r` on metrics scaled by their training spread.
    fn default_reward_weights(&self) -> Vec<f64>;
    /// Hand-tuned fixed gains, when the system has them.
    fn nominal_gains(&self) -> Option<Vec<f64>> {
        None
    }
    /// One training datapoint under system parameters `theta`.
    fn sample_record(&self, theta: &[f64], rng: &mut Rng) -> Result<EpisodeRecord>;
    /// Starts an online session. `task_id` selects the task variant (track);
    /// `seed` drives any randomness of the session itself.
    fn session(&self, theta: &[f64], task_id: usize, seed: u64) -> Result<Box<dyn Session + '_>>;
    /// Number of distinct test tasks available to [`Environment::session`].
    fn test_tasks(&self) -> usize {
        1
    }
    /// Best achievable value of the first metric under `theta`, for systems
    /// where that is a well-posed minimization (benchmark functions).
    fn reference_optimum(&self, _theta: &[f64], _starts: usize, _rng: &mut Rng) -> Option<f64> {
        None
    }
}

/// Projected gradient descent with central-difference gradients and
/// backtracking, from `starts` uniform points. Returns the best `(x, f(x))`.
pub fn multistart_minimize(
    f: impl Fn(&[f64]) -> f64,
    low: &[f64],
    high: &[f64],
    starts: usize,
    rng: &mut Rng,
) -> (Vec<f64>, f64) {
    let dim = low.len();
    let mut best = (low.to_vec(), f64::INFINITY);
    for _ in 0..starts.max(1) {
        let mut x = uniform_in(low, high, rng);
        let mut fx = f(&x);
        let mut step = 1e-2;
        for _ in 0..5000 {
            let g: Vec<f64> = (0..dim)
                .map(|d| {
                    let h = 1e-6 * (high[d] - low[d]);
                    let (mut a, mut b) = (x.clone(), x.clone());
                    a[d] = (a[d] + h).min(high[d]);
                    b[d] = (b[d] - h).max(low[d]);
                    (f(&a) - f(&b)) / (a[d] - b[d])
                })
                .collect();
            let mut moved = false;
            while step > 1e-14 {
                let cand: Vec<f64> = (0..dim).map(|d| (x[d] - step * g[d]).clamp(low[d], high[d])).collect();
                let fc = f(&cand);
                if fc < fx {
                    moved = fx - fc > 1e-14;
                    x = cand;
                    fx = fc;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if fx < best.1 {
            best = (x, fx);
        }
    }
    best
}

pub fn make_env(kind: EnvKind) -> Result<Box<dyn Environment>> {
    Ok(match kind {
        EnvKind::Branin => Box::new(Branin),
        EnvKind::Hartmann => Box::new(Hartmann),
        EnvKind::RaceCar => Box::new(RaceCar::new(Default::default())?),
    })
}

pub(crate) fn uniform_in(low: &[f64], high: &[f64], rng: &mut Rng) -> Vec<f64> {
    low.iter().zip(high).map(|(l, h)| rng.random_range(*l..=*h)).collect()
}

pub(crate) fn check_domain(name: &str, x: &[f64], low: &[f64], high: &[f64]) -> Result<()> {
    if x.len() != low.len() {
        return Err(Error::InvalidInput(format!("{name}: expected {} inputs, got {}", low.len(), x.len())));
    }
    for (i, (v, (l, h))) in x.iter().zip(low.iter().zip(high)).enumerate() {
        if !(v >= l && v <= h) {
            return Err(Error::InvalidInput(format!("{name}: x[{i}] = {v} outside [{l}, {h}]")));
        }
    }
    Ok(())
}

/// Stateless session over a benchmark function.
pub(crate) struct FunctionSession<F: Fn(&[f64]) -> Result<f64>> {
    pub f: F,
}

impl<F: Fn(&[f64]) -> Result<f64>> Session for FunctionSession<F> {
    fn context(&self) -> Context {
        Context::empty()
    }

    fn run_trial(&mut self, gains: &[f64]) -> Result<TrialOutcome> {
        Ok(TrialOutcome { metrics: vec![(self.f)(gains)?], crashed: false, trace: Vec::new() })
    }
}
