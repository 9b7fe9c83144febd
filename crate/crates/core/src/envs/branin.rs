//! Randomized Branin function
//! `f(x) = a (x2 − b x1² + c x1 − r)² + s (1 − t) cos(x1) + s`
//! on `x1 ∈ [−5, 10]`, `x2 ∈ [0, 15]`.

use std::f64::consts::PI;

use crate::envs::{check_domain, uniform_in, EnvKind, Environment, FunctionSession, ParamBox, Session};
use crate::perfmodel::{EpisodeRecord, ModelConfig};
use crate::rng::Rng;
use crate::Result;

pub const DOMAIN_LOW: [f64; 2] = [-5.0, 0.0];
pub const DOMAIN_HIGH: [f64; 2] = [10.0, 15.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BraninParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r: f64,
    pub s: f64,
    pub t: f64,
}

impl BraninParams {
    /// The textbook constants.
    pub fn standard() -> Self {
        Self { a: 1.0, b: 5.1 / (4.0 * PI * PI), c: 5.0 / PI, r: 6.0, s: 10.0, t: 1.0 / (8.0 * PI) }
    }

    /// From `θ = [a, b, c, r, s, t]`.
    pub fn from_slice(theta: &[f64]) -> Self {
        Self { a: theta[0], b: theta[1], c: theta[2], r: theta[3], s: theta[4], t: theta[5] }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.a, self.b, self.c, self.r, self.s, self.t]
    }
}

pub fn branin_eval(p: &BraninParams, x: &[f64]) -> Result<f64> {
    check_domain("branin", x, &DOMAIN_LOW, &DOMAIN_HIGH)?;
    let (x1, x2) = (x[0], x[1]);
    let inner = x2 - p.b * x1 * x1 + p.c * x1 - p.r;
    Ok(p.a * inner * inner + p.s * (1.0 - p.t) * x1.cos() + p.s)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Branin;

impl Environment for Branin {
    fn kind(&self) -> EnvKind {
        EnvKind::Branin
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig::branin()
    }

    fn gain_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (DOMAIN_LOW.to_vec(), DOMAIN_HIGH.to_vec())
    }

    fn train_box(&self) -> ParamBox {
        ParamBox::new(&["a", "b", "c", "r", "s", "t"], &[0.8, 0.11, 1.2, 5.5, 9.0, 0.035], &[1.2, 0.13, 1.8, 6.5, 11.0, 0.045])
    }

    fn test_box(&self) -> ParamBox {
        ParamBox::new(&["a", "b", "c", "r", "s", "t"], &[0.5, 0.1, 1.0, 5.0, 8.0, 0.03], &[1.5, 0.15, 2.0, 7.0, 12.0, 0.05])
    }

    /// `J(y) = −y`.
    fn default_reward_weights(&self) -> Vec<f64> {
        vec![-1.0]
    }

    fn sample_record(&self, theta: &[f64], rng: &mut Rng) -> Result<EpisodeRecord> {
        let p = BraninParams::from_slice(theta);
        let x = uniform_in(&DOMAIN_LOW, &DOMAIN_HIGH, rng);
        let y = branin_eval(&p, &x)?;
        Ok(EpisodeRecord::without_history(x, vec![y], theta.to_vec()))
    }

    fn session(&self, theta: &[f64], _task_id: usize, _seed: u64) -> Result<Box<dyn Session + '_>> {
        let p = BraninParams::from_slice(theta);
        Ok(Box::new(FunctionSession { f: move |x: &[f64]| branin_eval(&p, x) }))
    }

    fn reference_optimum(&self, theta: &[f64], starts: usize, rng: &mut Rng) -> Option<f64> {
        let p = BraninParams::from_slice(theta);
        let f = |x: &[f64]| branin_eval(&p, x).expect("search stays in the domain");
        Some(crate::envs::multistart_minimize(f, &DOMAIN_LOW, &DOMAIN_HIGH, starts, rng).1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Written out independently of `branin_eval`.
    fn reference(a: f64, b: f64, c: f64, r: f64, s: f64, t: f64, x1: f64, x2: f64) -> f64 {
        let q = x2 - b * x1.powi(2) + c * x1 - r;
        a * q.powi(2) + s * (1.0 - t) * f64::cos(x1) + s
    }

    #[test]
    fn matches_duplicate_formula_at_corner() {
        let p = BraninParams::standard();
        let got = branin_eval(&p, &[-5.0, 0.0]).unwrap();
        let want = reference(p.a, p.b, p.c, p.r, p.s, p.t, -5.0, 0.0);
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn cosine_term_vanishes_at_t_one() {
        let mut p = BraninParams::standard();
        p.t = 1.0;
        let x = [2.5, 7.0];
        let q = x[1] - p.b * x[0] * x[0] + p.c * x[0] - p.r;
        assert!((branin_eval(&p, &x).unwrap() - (p.a * q * q + p.s)).abs() < 1e-12);
    }

    #[test]
    fn out_of_domain_is_rejected() {
        let p = BraninParams::standard();
        assert!(branin_eval(&p, &[10.5, 1.0]).is_err());
        assert!(branin_eval(&p, &[0.0, -0.1]).is_err());
        assert!(branin_eval(&p, &[0.0]).is_err());
    }
}
