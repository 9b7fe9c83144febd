//! Six-dimensional Hartmann function with randomized weights `α = θ`:
//! `f(x) = −Σᵢ αᵢ exp(−Σⱼ Aᵢⱼ (xⱼ − Pᵢⱼ)²)` on `[0, 1]⁶`.

use crate::envs::{check_domain, uniform_in, EnvKind, Environment, FunctionSession, ParamBox, Session};
use crate::perfmodel::{EpisodeRecord, ModelConfig};
use crate::rng::Rng;
use crate::Result;

pub const DIM: usize = 6;

pub const A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];

pub const P: [[f64; 6]; 4] = [
    [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
    [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
    [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
    [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HartmannParams {
    pub alpha: [f64; 4],
}

impl HartmannParams {
    pub fn standard() -> Self {
        Self { alpha: [1.0, 1.2, 3.0, 3.2] }
    }

    pub fn from_slice(theta: &[f64]) -> Self {
        Self { alpha: [theta[0], theta[1], theta[2], theta[3]] }
    }
}

fn bump(i: usize, x: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..DIM {
        let d = x[j] - P[i][j];
        s += A[i][j] * d * d;
    }
    (-s).exp()
}

pub fn hartmann_eval(p: &HartmannParams, x: &[f64]) -> Result<f64> {
    check_domain("hartmann", x, &[0.0; DIM], &[1.0; DIM])?;
    Ok(value_unchecked(p, x))
}

fn value_unchecked(p: &HartmannParams, x: &[f64]) -> f64 {
    -(0..4).map(|i| p.alpha[i] * bump(i, x)).sum::<f64>()
}

fn gradient(p: &HartmannParams, x: &[f64]) -> [f64; DIM] {
    let mut g = [0.0; DIM];
    for i in 0..4 {
        let e = p.alpha[i] * bump(i, x);
        for j in 0..DIM {
            g[j] += 2.0 * e * A[i][j] * (x[j] - P[i][j]);
        }
    }
    g
}

/// Projected gradient descent with backtracking, from `starts` random points
/// plus each bump centre. Returns the best `(x, f)` found.
///
/// Used to compute reference optima for the optimality gap; it is slow by
/// design and not part of the online loop.
pub fn minimize(p: &HartmannParams, starts: usize, rng: &mut Rng) -> (Vec<f64>, f64) {
    let mut inits: Vec<Vec<f64>> = P.iter().map(|r| r.to_vec()).collect();
    inits.extend((0..starts).map(|_| uniform_in(&[0.0; DIM], &[1.0; DIM], rng)));
    let mut best = (inits[0].clone(), f64::INFINITY);
    for mut x in inits {
        let mut f = value_unchecked(p, &x);
        let mut step = 0.1;
        for _ in 0..2000 {
            let g = gradient(p, &x);
            let mut improved = false;
            while step > 1e-12 {
                let cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| (xi - step * gi).clamp(0.0, 1.0)).collect();
                let fc = value_unchecked(p, &cand);
                if fc < f {
                    improved = f - fc > 1e-15;
                    x = cand;
                    f = fc;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        if f < best.1 {
            best = (x, f);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Hartmann;

impl Environment for Hartmann {
    fn kind(&self) -> EnvKind {
        EnvKind::Hartmann
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig::hartmann()
    }

    fn gain_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; DIM], vec![1.0; DIM])
    }

    fn train_box(&self) -> ParamBox {
        ParamBox::new(&["alpha1", "alpha2", "alpha3", "alpha4"], &[1.0, 1.0, 2.4, 3.0], &[1.5, 1.2, 3.0, 3.4])
    }

    fn test_box(&self) -> ParamBox {
        ParamBox::new(&["alpha1", "alpha2", "alpha3", "alpha4"], &[0.5, 0.6, 2.0, 2.8], &[1.5, 1.4, 3.0, 3.6])
    }

    fn default_reward_weights(&self) -> Vec<f64> {
        vec![-1.0]
    }

    fn sample_record(&self, theta: &[f64], rng: &mut Rng) -> Result<EpisodeRecord> {
        let p = HartmannParams::from_slice(theta);
        let x = uniform_in(&[0.0; DIM], &[1.0; DIM], rng);
        let y = hartmann_eval(&p, &x)?;
        Ok(EpisodeRecord::without_history(x, vec![y], theta.to_vec()))
    }

    fn session(&self, theta: &[f64], _task_id: usize, _seed: u64) -> Result<Box<dyn Session + '_>> {
        let p = HartmannParams::from_slice(theta);
        Ok(Box::new(FunctionSession { f: move |x: &[f64]| hartmann_eval(&p, x) }))
    }

    fn reference_optimum(&self, theta: &[f64], starts: usize, rng: &mut Rng) -> Option<f64> {
        Some(minimize(&HartmannParams::from_slice(theta), starts, rng).1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const X_STAR: [f64; 6] = [0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573];

    #[test]
    fn known_minimum() {
        let f = hartmann_eval(&HartmannParams::standard(), &X_STAR).unwrap();
        assert!((f - -3.32237).abs() < 1e-4, "{f}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = HartmannParams { alpha: [0.7, 1.3, 2.2, 3.5] };
        let x = [0.3, 0.6, 0.2, 0.9, 0.4, 0.5];
        let g = gradient(&p, &x);
        for j in 0..DIM {
            let (mut a, mut b) = (x, x);
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let fd = (value_unchecked(&p, &a) - value_unchecked(&p, &b)) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn local_search_finds_standard_minimum() {
        let mut rng = crate::rng::stream(0, &[]);
        let (_, f) = minimize(&HartmannParams::standard(), 16, &mut rng);
        assert!((f - -3.32237).abs() < 1e-4, "{f}");
    }

    #[test]
    fn rejects_outside_unit_cube() {
        let mut x = X_STAR;
        x[2] = 1.01;
        assert!(hartmann_eval(&HartmannParams::standard(), &x).is_err());
    }
}
