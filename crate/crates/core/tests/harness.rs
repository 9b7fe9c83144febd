//! Online loop protocol, aggregation fixtures and log round trips.

use occam::envs::{make_env, Context, EnvKind, Environment, ParamBox, Session, TrialOutcome};
use occam::gainopt::{RewardSpec, SearchConfig};
use occam::harness::{
    mean_std, normalized_curves, run_online, summarize, EvalMode, OnlineConfig, RunInfo, RunLog, TrialRecord,
};
use occam::numkernel::Matrix;
use occam::perfmodel::{BasisNetwork, Checkpoint, EpisodeRecord, KfPrior, ModelConfig, Normalizer, TrainingStage};
use occam::rng::Rng;
use occam::Result;

fn trial(i: usize, reward: f64, best: f64, crashed: bool) -> TrialRecord {
    TrialRecord {
        trial: i,
        gains: vec![0.0],
        metrics: vec![best],
        reward,
        best_value: best,
        crashed,
        simulated: true,
        mean_j: 0.0,
        std_j: 0.0,
        score: 0.0,
        candidates: 1,
        min_quad_form: 1.0,
        mu: vec![0.0],
        scores: None,
    }
}

fn log(mode: EvalMode, theta_index: usize, seed: u64, optimum: Option<f64>, trials: Vec<TrialRecord>) -> RunLog {
    RunLog {
        info: RunInfo { mode, theta_index, theta: vec![1.0], task: 0, seed, optimum },
        trials,
        kf_updates: 0,
        singularities: 0,
        trace: Vec::new(),
    }
}

fn ramp(mode: EvalMode, theta_index: usize, seed: u64, rewards: &[f64]) -> RunLog {
    let trials = rewards.iter().enumerate().map(|(i, &r)| trial(i, r, -r, false)).collect();
    log(mode, theta_index, seed, Some(-10.0), trials)
}

#[test]
fn single_log_has_zero_spread() {
    let s = summarize(&[ramp(EvalMode::Full, 0, 0, &[1.0, 2.0, 3.0])]);
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].final_reward_mean, 3.0);
    assert_eq!(s[0].final_reward_std, 0.0);
    assert_eq!(s[0].runs, 1);
}

#[test]
fn hand_computed_summary() {
    // Seven trials each; the last five are trials 2..=6.
    let a = ramp(EvalMode::Full, 0, 0, &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    let b = ramp(EvalMode::Full, 1, 0, &[0.0, 0.0, 3.0, 3.0, 3.0, 3.0, 3.0]);
    let s = &summarize(&[a, b])[0];
    // finals 5 and 3
    assert_eq!(s.final_reward_mean, 4.0);
    assert_eq!(s.final_reward_std, 1.0);
    // last-5 rewards 3 and 3
    assert_eq!(s.last5_reward_mean, 3.0);
    assert_eq!(s.last5_reward_std, 0.0);
    // best values are −reward, so last-5 values −3 and −3; gaps to −10 are 7
    assert_eq!(s.last5_value_mean, -3.0);
    assert_eq!(s.last5_gap_mean, 7.0);
    assert_eq!(s.crash_pct, 0.0);
}

#[test]
fn all_crash_ensemble() {
    let crashed = |seed| {
        let mut t: Vec<TrialRecord> = (0..4).map(|i| trial(i, 0.0, f64::NAN, true)).collect();
        t[0].crashed = true;
        log(EvalMode::Full, 0, seed, None, t)
    };
    let s = &summarize(&[crashed(0), crashed(1), crashed(2)])[0];
    assert_eq!(s.final_reward_mean, 0.0);
    assert_eq!(s.crash_pct, 100.0);
}

#[test]
fn curves_subtract_the_matching_nominal_run_and_ignore_order() {
    let logs = vec![
        ramp(EvalMode::Nominal, 0, 0, &[1.0, 1.0]),
        ramp(EvalMode::Nominal, 0, 1, &[2.0, 2.0]),
        ramp(EvalMode::Full, 0, 0, &[1.5, 3.0]),
        ramp(EvalMode::Full, 0, 1, &[2.5, 4.0]),
    ];
    let c = normalized_curves(&logs);
    let full: Vec<_> = c.iter().filter(|p| p.mode == EvalMode::Full).collect();
    assert_eq!(full[0].mean, 0.5);
    assert_eq!(full[1].mean, 2.0);
    assert_eq!(full[1].std, 0.0);
    let mut rev = logs.clone();
    rev.reverse();
    assert_eq!(normalized_curves(&rev), c);
}

#[test]
fn population_std() {
    assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    assert!(mean_std(&[]).0.is_nan());
}

// --- a synthetic family whose true metric is exactly Φ*(g) w(θ) -----------

struct Linear {
    truth: BasisNetwork,
}

impl Linear {
    fn new() -> Self {
        let truth = BasisNetwork::new(ModelConfig::branin(), Normalizer::identity(2, 0, 0, 0, 1), 42).unwrap();
        Self { truth }
    }

    fn value(&self, theta: &[f64], g: &[f64]) -> Result<f64> {
        let phi = self.truth.basis(g, &[], &Matrix::zeros(0, 0), &Matrix::zeros(0, 0))?;
        Ok(phi.matmul(&Matrix::column(theta))?.get(0, 0))
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut prior = KfPrior::identity(Matrix::filled(5, 1, 1.0), 1);
        prior.sigma0_factor = Matrix::identity(5).scale(0.5);
        prior.q_factor = Matrix::zeros(5, 5);
        prior.r_factor = Matrix::identity(1).scale(0.01);
        Checkpoint { stage: TrainingStage::MetaTrained, network: self.truth.clone(), prior }
    }
}

struct LinearSession<'a> {
    env: &'a Linear,
    theta: Vec<f64>,
}

impl Session for LinearSession<'_> {
    fn context(&self) -> Context {
        Context::empty()
    }

    fn run_trial(&mut self, gains: &[f64]) -> Result<TrialOutcome> {
        Ok(TrialOutcome { metrics: vec![self.env.value(&self.theta, gains)?], crashed: false, trace: Vec::new() })
    }
}

impl Environment for Linear {
    fn kind(&self) -> EnvKind {
        EnvKind::Branin
    }
    fn model_config(&self) -> ModelConfig {
        ModelConfig::branin()
    }
    fn gain_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; 2], vec![1.0; 2])
    }
    fn train_box(&self) -> ParamBox {
        ParamBox::new(&["w0", "w1", "w2", "w3", "w4"], &[0.5; 5], &[1.5; 5])
    }
    fn test_box(&self) -> ParamBox {
        ParamBox::new(&["w0", "w1", "w2", "w3", "w4"], &[0.0; 5], &[2.0; 5])
    }
    fn default_reward_weights(&self) -> Vec<f64> {
        vec![1.0]
    }
    fn sample_record(&self, theta: &[f64], rng: &mut Rng) -> Result<EpisodeRecord> {
        use rand::Rng as _;
        let g = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let y = self.value(theta, &g)?;
        Ok(EpisodeRecord::without_history(g, vec![y], theta.to_vec()))
    }
    fn session(&self, theta: &[f64], _task: usize, _seed: u64) -> Result<Box<dyn Session + '_>> {
        Ok(Box::new(LinearSession { env: self, theta: theta.to_vec() }))
    }
}

fn online(mode: EvalMode, trials: usize) -> OnlineConfig {
    OnlineConfig {
        mode,
        trials,
        reward: RewardSpec { weights: vec![1.0], beta: 0.5 },
        search: SearchConfig::default(),
        adapt: Default::default(),
        psd_directions: 10,
        keep_scores: false,
        trace: false,
        benchmark: true,
    }
}

fn run(env: &Linear, ckpt: &Checkpoint, mode: EvalMode, seed: u64, trials: usize) -> RunLog {
    let theta = occam::harness::ood_thetas(env, 1, seed).unwrap().remove(0);
    let info = RunInfo { mode, theta_index: 0, theta, task: 0, seed, optimum: None };
    run_online(Some(ckpt), env, info, &online(mode, trials)).unwrap()
}

#[test]
fn prediction_error_shrinks_over_first_trials_on_linear_family() {
    let env = Linear::new();
    let ckpt = env.checkpoint();
    let runs = 40;
    let improved = (0..runs)
        .filter(|&seed| {
            let l = run(&env, &ckpt, EvalMode::Full, seed, 5);
            let err = |t: &TrialRecord| (t.mean_j - t.reward).abs();
            err(&l.trials[4]) < err(&l.trials[0])
        })
        .count();
    assert!(improved as f64 >= 0.7 * runs as f64, "{improved}/{runs}");
}

#[test]
fn context_only_never_moves_the_belief() {
    let env = Linear::new();
    let ckpt = env.checkpoint();
    let l = run(&env, &ckpt, EvalMode::ContextOnly, 3, 8);
    assert_eq!(l.kf_updates, 0);
    for t in &l.trials {
        assert_eq!(t.mu, ckpt.prior.w0.as_slice());
    }
    let full = run(&env, &ckpt, EvalMode::Full, 3, 8);
    assert_eq!(full.kf_updates, 8);
    assert_ne!(full.trials[7].mu, ckpt.prior.w0.as_slice());
}

#[test]
fn best_so_far_is_non_increasing_and_trials_are_contiguous() {
    let env = make_env(EnvKind::Branin).unwrap();
    let net = BasisNetwork::new(ModelConfig::branin(), Normalizer::identity(2, 0, 0, 0, 1), 1).unwrap();
    let ckpt = Checkpoint {
        stage: TrainingStage::Pretrained,
        network: net,
        prior: KfPrior::identity(occam::metatrain::w_pre(5), 1),
    };
    let info = RunInfo { mode: EvalMode::Full, theta_index: 0, theta: vec![1.0, 0.13, 1.6, 6.0, 10.0, 0.04], task: 0, seed: 0, optimum: None };
    let cfg = OnlineConfig { reward: RewardSpec { weights: vec![-1.0], beta: 0.5 }, ..online(EvalMode::Full, 10) };
    let l = run_online(Some(&ckpt), env.as_ref(), info, &cfg).unwrap();
    for (i, w) in l.trials.windows(2).enumerate() {
        assert!(w[1].best_value <= w[0].best_value);
        assert_eq!(w[0].trial, i);
    }
}

#[test]
fn run_log_replays_and_round_trips() {
    let env = Linear::new();
    let ckpt = env.checkpoint();
    let a = run(&env, &ckpt, EvalMode::Full, 9, 6);
    let b = run(&env, &ckpt, EvalMode::Full, 9, 6);
    assert_eq!(a, b);
    let mut buf = Vec::new();
    a.write_csv(&mut buf).unwrap();
    let back = RunLog::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.info, a.info);
    for (x, y) in back.trials.iter().zip(&a.trials) {
        assert_eq!(x.gains, y.gains);
        assert_eq!(x.reward, y.reward);
        assert_eq!(x.best_value, y.best_value);
        assert_eq!(x.score, y.score);
    }
}

// --- crash protocol on the race car -----------------------------------------

#[test]
fn rewards_stay_zero_after_a_crash() {
    use occam::envs::{RaceCar, RaceCarConfig};
    let env = RaceCar::new(RaceCarConfig { train_tracks: 1, test_tracks: 1, ..RaceCarConfig::default() }).unwrap();
    let net = BasisNetwork::new(env.model_config(), Normalizer::identity(6, 10, 3, 3, 3), 0).unwrap();
    // A prior that loves the first gain column drives the search to extreme
    // gains; whatever happens, the zero-out must hold.
    let ckpt = Checkpoint { stage: TrainingStage::Pretrained, network: net, prior: KfPrior::identity(occam::metatrain::w_pre(5), 3) };
    let cfg = OnlineConfig {
        reward: RewardSpec { weights: vec![0.6, 0.2, 0.2], beta: 0.5 },
        benchmark: false,
        ..online(EvalMode::Full, 12)
    };
    for seed in 0..4 {
        let theta = vec![0.04, 5e4, 200.0];
        let info = RunInfo { mode: EvalMode::Full, theta_index: 0, theta, task: 0, seed, optimum: None };
        let l = run_online(Some(&ckpt), &env, info, &cfg).unwrap();
        if let Some(first) = l.trials.iter().position(|t| t.crashed) {
            assert!(l.trials[first..].iter().all(|t| t.reward == 0.0 && t.crashed));
            assert!(l.trials[first + 1..].iter().all(|t| !t.simulated));
        }
        assert!(l.trials.iter().all(|t| t.reward >= 0.0));
    }
}
