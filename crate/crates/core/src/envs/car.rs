//! 2D race car: rear-wheel-drive bicycle model with a friction-circle traction
//! limit, driven by a PD steering law and threshold gas/brake laws.
//!
//! Controller, with `c` the largest `|κ|` in a short lookahead window:
//!
//! ```text
//! u_s = clamp(k_ps e_lat + k_ds ė_lat, −1, 1)
//! u_g = k_pg   if v ≤ v_max else 0
//! u_b = k_pb   if c ≥ c_thresh else 0
//! ```
//!
//! Any step whose combined force demand exceeds the traction limit counts as
//! a slip step; forces (and yaw rate) are then scaled back onto the limit,
//! which makes the car understeer.
//!
//! Rollout metrics over the steps of one segment, all increasing in quality:
//! `y = [1/(1 + mean|e_lat|), 1/(1 + slip fraction), mean v]`.

use std::collections::VecDeque;

use rand::Rng as _;

use crate::envs::track::{gen_track, Track, TrackConfig};
use crate::envs::{uniform_in, Context, EnvKind, Environment, ParamBox, Session, TrialOutcome};
use crate::numkernel::Matrix;
use crate::perfmodel::{EpisodeRecord, ModelConfig};
use crate::rng::Rng;
use crate::{Error, Result};

/// Physical constants shared by all cars.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarModel {
    pub dt: f64,
    pub wheelbase: f64,
    pub max_steer: f64,
    pub max_brake_force: f64,
    pub rolling_resistance: f64,
    pub drag: f64,
    /// Drive force is `u_g P / max(v, this)`.
    pub min_power_speed: f64,
    pub base_mass: f64,
    pub mass_per_size: f64,
    pub power_scale: f64,
    pub traction_scale: f64,
    /// `|e_lat|` beyond this ends the rollout as a crash.
    pub crash_limit: f64,
    pub lookahead: f64,
    /// Wall-clock cap for one segment.
    pub max_segment_time: f64,
    /// Nominal speed used to convert unfinished distance into penalty steps.
    pub penalty_speed: f64,
}

impl Default for CarModel {
    fn default() -> Self {
        Self {
            dt: 0.02,
            wheelbase: 2.6,
            max_steer: 0.5,
            max_brake_force: 15_000.0,
            rolling_resistance: 0.015,
            drag: 0.45,
            min_power_speed: 2.0,
            base_mass: 600.0,
            mass_per_size: 20_000.0,
            power_scale: 4.0,
            traction_scale: 25.0,
            crash_limit: 8.0,
            lookahead: 20.0,
            max_segment_time: 90.0,
            penalty_speed: 10.0,
        }
    }
}

const GRAVITY: f64 = 9.81;

/// `θ = [size, power, friction]` in simulator units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarParams {
    pub size: f64,
    pub power: f64,
    pub friction: f64,
}

impl CarParams {
    pub fn from_slice(theta: &[f64]) -> Self {
        Self { size: theta[0], power: theta[1], friction: theta[2] }
    }

    pub fn mass(&self, m: &CarModel) -> f64 {
        m.base_mass + m.mass_per_size * self.size
    }

    pub fn max_power(&self, m: &CarModel) -> f64 {
        m.power_scale * self.power
    }

    pub fn traction_limit(&self, m: &CarModel) -> f64 {
        m.traction_scale * self.friction
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarGains {
    pub k_ps: f64,
    pub k_ds: f64,
    pub k_pg: f64,
    pub k_pb: f64,
    pub v_max: f64,
    pub c_thresh: f64,
}

impl CarGains {
    pub fn from_slice(g: &[f64]) -> Self {
        Self { k_ps: g[0], k_ds: g[1], k_pg: g[2], k_pb: g[3], v_max: g[4], c_thresh: g[5] }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.k_ps, self.k_ds, self.k_pg, self.k_pb, self.v_max, self.c_thresh]
    }
}

/// `[u_s, u_g, u_b]` for the given measurements.
pub fn controller(g: &CarGains, e_lat: f64, e_lat_rate: f64, v: f64, curvature: f64) -> [f64; 3] {
    let u_s = (g.k_ps * e_lat + g.k_ds * e_lat_rate).clamp(-1.0, 1.0);
    let u_g = if v <= g.v_max { g.k_pg } else { 0.0 };
    let u_b = if curvature >= g.c_thresh { g.k_pb } else { 0.0 };
    [u_s, u_g, u_b]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarState {
    pub pos: [f64; 2],
    pub heading: f64,
    pub v: f64,
    pub omega: f64,
    pub e_lat: f64,
    /// Lateral error one step earlier; `None` right after a reset.
    pub prev_e_lat: Option<f64>,
    /// Arc length of the projection.
    pub s: f64,
    pub index: usize,
    pub time: f64,
}

impl CarState {
    /// Car placed at arc length `s`, offset `e_lat` to the left, aligned with
    /// the centerline.
    pub fn on_track(track: &Track, s: f64, v: f64, e_lat: f64) -> Self {
        let c = track.point_at(s);
        let heading = track.heading_at(s);
        let pos = [c[0] - e_lat * heading.sin(), c[1] + e_lat * heading.cos()];
        let p = track.project(pos, None, 0);
        Self { pos, heading, v, omega: 0.0, e_lat: p.e_lat, prev_e_lat: None, s: p.s, index: p.index, time: 0.0 }
    }
}

/// What one simulation step emitted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    /// `[v, ω, e_lat]` measured before the step.
    pub z: [f64; 3],
    pub u: [f64; 3],
    pub slip: bool,
    pub crashed: bool,
    /// Signed arc length advanced along the centerline.
    pub progress: f64,
}

const PROJECTION_WINDOW: usize = 12;

pub fn car_step(
    state: &CarState,
    gains: &CarGains,
    params: &CarParams,
    model: &CarModel,
    track: &Track,
) -> (CarState, StepOutput) {
    let dt = model.dt;
    let e_rate = state.prev_e_lat.map_or(0.0, |p| (state.e_lat - p) / dt);
    let c = track.max_abs_curvature_ahead(state.s, model.lookahead);
    let u = controller(gains, state.e_lat, e_rate, state.v, c);

    let m = params.mass(model);
    let v = state.v;
    let steer = -model.max_steer * u[0];
    let omega_kin = v * steer.tan() / model.wheelbase;
    let f_lat = m * v * omega_kin;
    let f_drive = u[1] * params.max_power(model) / v.max(model.min_power_speed);
    let f_brake = if v > 0.0 { u[2] * model.max_brake_force } else { 0.0 };
    let f_long = f_drive - f_brake;
    let demand = f_long.hypot(f_lat);
    let cap = params.traction_limit(model);
    let slip = demand > cap;
    let scale = if slip { cap / demand } else { 1.0 };

    let resist = if v > 0.0 { model.rolling_resistance * m * GRAVITY + model.drag * v * v } else { 0.0 };
    let v_next = (v + (f_long * scale - resist) / m * dt).max(0.0);
    let omega = omega_kin * scale;
    let heading = state.heading + omega * dt;
    let pos = [state.pos[0] + v * heading.cos() * dt, state.pos[1] + v * heading.sin() * dt];

    let p = track.project(pos, Some(state.index), PROJECTION_WINDOW);
    let mut progress = p.s - state.s;
    if progress < -0.5 * track.length {
        progress += track.length;
    } else if progress > 0.5 * track.length {
        progress -= track.length;
    }
    let next = CarState {
        pos,
        heading,
        v: v_next,
        omega,
        e_lat: p.e_lat,
        prev_e_lat: Some(state.e_lat),
        s: p.s,
        index: p.index,
        time: state.time + dt,
    };
    let out = StepOutput {
        z: [state.v, state.omega, state.e_lat],
        u,
        slip,
        crashed: p.e_lat.abs() > model.crash_limit,
        progress,
    };
    (next, out)
}

/// One row of the optional per-step trace.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub omega: f64,
    pub e_lat: f64,
    pub u_s: f64,
    pub u_g: f64,
    pub u_b: f64,
    pub slip: u8,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub metrics: [f64; 3],
    pub crashed: bool,
    pub steps: usize,
    pub end: CarState,
    /// Last `history_len` rows of `[z, u]`, oldest first.
    pub history: VecDeque<[f64; 6]>,
    pub trace: Vec<TraceRow>,
}

/// Drives `distance` metres of centerline from `start`.
///
/// A crash ends the rollout; the unfinished distance is then charged as
/// penalty steps at `penalty_speed` with `|e_lat| = crash_limit`, a slip and
/// zero speed, so crashing is never cheaper than finishing badly.
#[allow(clippy::too_many_arguments)]
pub fn car_rollout(
    gains: &CarGains,
    params: &CarParams,
    model: &CarModel,
    track: &Track,
    start: CarState,
    distance: f64,
    history_len: usize,
    record_trace: bool,
) -> Rollout {
    let max_steps = (model.max_segment_time / model.dt).ceil() as usize;
    let mut state = start;
    let mut history = VecDeque::with_capacity(history_len + 1);
    let mut trace = Vec::new();
    let (mut sum_e, mut sum_slip, mut sum_v) = (0.0, 0.0, 0.0);
    let mut travelled = 0.0;
    let mut steps = 0usize;
    let mut crashed = false;
    while travelled < distance && steps < max_steps {
        let (next, out) = car_step(&state, gains, params, model, track);
        steps += 1;
        sum_e += out.z[2].abs();
        sum_slip += f64::from(u8::from(out.slip));
        sum_v += out.z[0];
        travelled += out.progress;
        if history_len > 0 {
            if history.len() == history_len {
                history.pop_front();
            }
            history.push_back([out.z[0], out.z[1], out.z[2], out.u[0], out.u[1], out.u[2]]);
        }
        if record_trace {
            trace.push(TraceRow {
                t: state.time,
                x: state.pos[0],
                y: state.pos[1],
                v: state.v,
                omega: state.omega,
                e_lat: state.e_lat,
                u_s: out.u[0],
                u_g: out.u[1],
                u_b: out.u[2],
                slip: u8::from(out.slip),
            });
        }
        state = next;
        if out.crashed {
            crashed = true;
            break;
        }
    }
    let mut n = steps as f64;
    if crashed {
        let penalty = ((distance - travelled).max(0.0) / (model.penalty_speed * model.dt)).ceil();
        sum_e += penalty * model.crash_limit;
        sum_slip += penalty;
        n += penalty;
    }
    let n = n.max(1.0);
    Rollout {
        metrics: [1.0 / (1.0 + sum_e / n), 1.0 / (1.0 + sum_slip / n), sum_v / n],
        crashed,
        steps,
        end: state,
        history,
        trace,
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaceCarConfig {
    pub track: TrackConfig,
    pub model: CarModel,
    pub train_tracks: usize,
    pub test_tracks: usize,
    /// Seeds of test tracks start here; training tracks use `0..train_tracks`.
    pub test_track_seed: u64,
    pub task_samples: usize,
    /// Fraction of a lap driven per trial.
    pub segment_fraction: f64,
    pub history_len: usize,
    /// Steps driven before the first trial to fill the history.
    pub warmup_steps: usize,
    pub gain_low: Vec<f64>,
    pub gain_high: Vec<f64>,
    pub nominal_gains: Vec<f64>,
}

impl Default for RaceCarConfig {
    fn default() -> Self {
        Self {
            track: TrackConfig::default(),
            model: CarModel::default(),
            train_tracks: 16,
            test_tracks: 3,
            test_track_seed: 10_000,
            task_samples: 10,
            segment_fraction: 1.0 / 3.0,
            history_len: 25,
            warmup_steps: 50,
            gain_low: vec![0.01, 0.0, 0.05, 0.0, 8.0, 0.005],
            gain_high: vec![0.5, 0.5, 1.0, 1.0, 40.0, 0.08],
            nominal_gains: vec![0.48, 0.1, 0.45, 0.65, 14.0, 0.055],
        }
    }
}

pub struct RaceCar {
    pub config: RaceCarConfig,
    train: Vec<Track>,
    test: Vec<Track>,
}

impl RaceCar {
    pub fn new(config: RaceCarConfig) -> Result<Self> {
        if config.gain_low.len() != 6 || config.gain_high.len() != 6 || config.nominal_gains.len() != 6 {
            return Err(Error::Config("race car gains have 6 entries".into()));
        }
        if config.train_tracks == 0 || config.test_tracks == 0 {
            return Err(Error::Config("race car needs at least one training and one test track".into()));
        }
        if !(config.segment_fraction > 0.0 && config.segment_fraction <= 1.0) {
            return Err(Error::Config("segment_fraction must be in (0, 1]".into()));
        }
        let train = (0..config.train_tracks as u64).map(|s| gen_track(s, &config.track)).collect::<Result<_>>()?;
        let test = (0..config.test_tracks as u64)
            .map(|s| gen_track(config.test_track_seed + s, &config.track))
            .collect::<Result<_>>()?;
        Ok(Self { config, train, test })
    }

    pub fn train_track(&self, i: usize) -> &Track {
        &self.train[i]
    }

    pub fn test_track(&self, i: usize) -> &Track {
        &self.test[i]
    }

    fn segment(&self, track: &Track) -> f64 {
        track.length * self.config.segment_fraction
    }

    fn task(&self, track: &Track, s: f64) -> Vec<f64> {
        track.curvature_profile(s, self.segment(track), self.config.task_samples)
    }

    fn history_matrices(&self, hist: &VecDeque<[f64; 6]>) -> (Matrix, Matrix) {
        let h = self.config.history_len;
        let mut z = Matrix::zeros(h, 3);
        let mut u = Matrix::zeros(h, 3);
        // Left-pad with zeros if fewer rows are available.
        let offset = h - hist.len().min(h);
        for (k, row) in hist.iter().rev().take(h).rev().enumerate() {
            for d in 0..3 {
                z.set(offset + k, d, row[d]);
                u.set(offset + k, d, row[3 + d]);
            }
        }
        (z, u)
    }

    /// Drives `warmup_steps` from `start` with `gains`.
    fn warm_up(&self, gains: &CarGains, params: &CarParams, track: &Track, start: CarState) -> Rollout {
        let m = &self.config.model;
        // Distance large enough that only the step budget stops it.
        let budget = CarModel { max_segment_time: self.config.warmup_steps as f64 * m.dt, ..m.clone() };
        car_rollout(gains, params, &budget, track, start, f64::INFINITY, self.config.history_len, false)
    }
}

impl Environment for RaceCar {
    fn kind(&self) -> EnvKind {
        EnvKind::RaceCar
    }

    fn model_config(&self) -> ModelConfig {
        let mut c = ModelConfig::race_car(self.config.task_samples);
        c.history_len = self.config.history_len;
        c
    }

    fn gain_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.config.gain_low.clone(), self.config.gain_high.clone())
    }

    fn train_box(&self) -> ParamBox {
        ParamBox::new(&["size", "power", "friction"], &[0.01, 2.5e4, 250.0], &[0.03, 4.5e4, 450.0])
    }

    fn test_box(&self) -> ParamBox {
        ParamBox::new(&["size", "power", "friction"], &[0.005, 2.0e4, 200.0], &[0.04, 5.0e4, 500.0])
    }

    fn default_reward_weights(&self) -> Vec<f64> {
        vec![0.6, 0.2, 0.2]
    }

    fn nominal_gains(&self) -> Option<Vec<f64>> {
        Some(self.config.nominal_gains.clone())
    }

    fn test_tasks(&self) -> usize {
        self.test.len()
    }

    fn sample_record(&self, theta: &[f64], rng: &mut Rng) -> Result<EpisodeRecord> {
        let params = CarParams::from_slice(theta);
        let (lo, hi) = (&self.config.gain_low, &self.config.gain_high);
        for _ in 0..50 {
            let track = &self.train[rng.random_range(0..self.train.len())];
            let start = CarState::on_track(
                track,
                rng.random_range(0.0..track.length),
                rng.random_range(5.0..20.0),
                rng.random_range(-1.0..1.0),
            );
            let warm_gains = CarGains::from_slice(&uniform_in(lo, hi, rng));
            let warm = self.warm_up(&warm_gains, &params, track, start);
            if warm.crashed {
                continue;
            }
            let (z_hist, u_hist) = self.history_matrices(&warm.history);
            let gains = uniform_in(lo, hi, rng);
            let task = self.task(track, warm.end.s);
            let mut start = warm.end;
            start.time = 0.0;
            let roll = car_rollout(
                &CarGains::from_slice(&gains),
                &params,
                &self.config.model,
                track,
                start,
                self.segment(track),
                0,
                false,
            );
            return Ok(EpisodeRecord { gains, task, z_hist, u_hist, metrics: roll.metrics.to_vec(), theta: theta.to_vec() });
        }
        Err(Error::Numerical(format!("race car: warm-up kept crashing for theta {theta:?}")))
    }

    fn session(&self, theta: &[f64], task_id: usize, seed: u64) -> Result<Box<dyn Session + '_>> {
        let track = self
            .test
            .get(task_id)
            .ok_or_else(|| Error::Config(format!("race car has {} test tracks, asked for {task_id}", self.test.len())))?;
        let params = CarParams::from_slice(theta);
        let mut rng = crate::rng::stream(seed, &[task_id as u64]);
        let start = CarState::on_track(track, rng.random_range(0.0..track.length), 10.0, 0.0);
        let warm = self.warm_up(&CarGains::from_slice(&self.config.nominal_gains), &params, track, start);
        let mut state = warm.end;
        state.time = 0.0;
        Ok(Box::new(CarSession { env: self, track, params, state, history: warm.history, crashed: warm.crashed, trace: false }))
    }
}

pub struct CarSession<'a> {
    env: &'a RaceCar,
    track: &'a Track,
    params: CarParams,
    state: CarState,
    history: VecDeque<[f64; 6]>,
    crashed: bool,
    trace: bool,
}

impl Session for CarSession<'_> {
    fn context(&self) -> Context {
        let (z_hist, u_hist) = self.env.history_matrices(&self.history);
        Context { task: self.env.task(self.track, self.state.s), z_hist, u_hist }
    }

    fn run_trial(&mut self, gains: &[f64]) -> Result<TrialOutcome> {
        if gains.len() != 6 {
            return Err(Error::InvalidInput(format!("race car expects 6 gains, got {}", gains.len())));
        }
        if self.crashed {
            return Ok(TrialOutcome { metrics: vec![0.0; 3], crashed: true, trace: Vec::new() });
        }
        let roll = car_rollout(
            &CarGains::from_slice(gains),
            &self.params,
            &self.env.config.model,
            self.track,
            self.state,
            self.env.segment(self.track),
            self.env.config.history_len,
            self.trace,
        );
        self.state = roll.end;
        // Keep the most recent rows even if the rollout was short.
        for row in roll.history {
            if self.history.len() == self.env.config.history_len {
                self.history.pop_front();
            }
            self.history.push_back(row);
        }
        self.crashed = roll.crashed;
        Ok(TrialOutcome { metrics: roll.metrics.to_vec(), crashed: roll.crashed, trace: roll.trace })
    }

    fn set_tracing(&mut self, on: bool) {
        self.trace = on;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gains() -> CarGains {
        CarGains::from_slice(&RaceCarConfig::default().nominal_gains)
    }

    #[test]
    fn zero_error_means_zero_steering() {
        assert_eq!(controller(&gains(), 0.0, 0.0, 10.0, 0.0)[0], 0.0);
    }

    #[test]
    fn coasts_above_vmax_on_straights() {
        let g = gains();
        let u = controller(&g, 0.3, 0.0, g.v_max + 1.0, 0.5 * g.c_thresh);
        assert_eq!((u[1], u[2]), (0.0, 0.0));
    }

    #[test]
    fn brake_input_is_proportional() {
        let mut g = gains();
        let a = controller(&g, 0.0, 0.0, 5.0, 2.0 * g.c_thresh)[2];
        g.k_pb *= 2.0;
        let b = controller(&g, 0.0, 0.0, 5.0, 2.0 * g.c_thresh)[2];
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn steering_saturates() {
        let u = controller(&gains(), 100.0, 0.0, 10.0, 0.0);
        assert_eq!(u[0], 1.0);
    }

    #[test]
    fn zero_gains_never_move() {
        let track = gen_track(1, &TrackConfig::default()).unwrap();
        let model = CarModel { max_segment_time: 5.0, ..CarModel::default() };
        let start = CarState::on_track(&track, 0.0, 0.0, 0.0);
        let zero = CarGains::from_slice(&[0.0; 6]);
        let params = CarParams { size: 0.02, power: 3.5e4, friction: 350.0 };
        let r = car_rollout(&zero, &params, &model, &track, start, 100.0, 0, false);
        assert!(!r.crashed);
        assert!(r.metrics[2].abs() < 1e-12);
    }

    #[test]
    fn nominal_gains_finish_a_segment() {
        let env = RaceCar::new(RaceCarConfig::default()).unwrap();
        let mut s = env.session(&env.train_box().midpoint(), 0, 1).unwrap();
        let out = s.run_trial(&env.config.nominal_gains).unwrap();
        assert!(!out.crashed, "{out:?}");
        assert!(out.metrics[2] > 5.0, "{out:?}");
        let ctx = s.context();
        assert_eq!(ctx.z_hist.shape(), (25, 3));
        assert_eq!(ctx.task.len(), 10);
    }
}
