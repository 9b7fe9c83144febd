//! Online Bayesian estimation of the last-layer weights.
//!
//! The weights follow identity dynamics `w_{t+1} = w_t + noise(Q)` and are
//! observed through `y_t = Φ_t w_t + noise(R)`. One filter step is
//!
//! ```text
//! Σ̄  = Σ + Q
//! K  = Σ̄ Φᵀ (Φ Σ̄ Φᵀ + R)⁻¹
//! μ' = μ + K (y − Φ μ)
//! Σ' = (I − K Φ) Σ̄          then re-symmetrized
//! ```
//!
//! [`kf_update`] runs on plain matrices for online use; [`kf_update_tracked`]
//! records the same arithmetic on a tape so meta-training can differentiate
//! through it.

use crate::numkernel::{KernelError, Matrix, Var};
use crate::perfmodel::WeightBelief;
use crate::{Error, Result};

/// Knobs for online adaptation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AdaptOptions {
    /// Clamp each innovation component to `[-c, c]` before the update.
    /// Off by default.
    pub residual_clamp: Option<f64>,
}

fn check_shapes(belief: &WeightBelief, phi: &Matrix, y: &[f64]) -> Result<()> {
    let (ny, nb) = (belief.metric_dim(), belief.basis_dim());
    if phi.shape() != (ny, nb) || y.len() != ny {
        return Err(KernelError::Shape { op: "kf_update", lhs: phi.shape(), rhs: (y.len(), nb) }.into());
    }
    if y.iter().any(|v| !v.is_finite()) || !phi.is_finite() {
        return Err(Error::InvalidInput("kf_update: non-finite observation".into()));
    }
    Ok(())
}

/// One Kalman step. Returns the new belief and the innovation `y − Φ μ`.
pub fn kf_update(
    belief: &WeightBelief,
    phi: &Matrix,
    y: &[f64],
    options: &AdaptOptions,
) -> Result<(WeightBelief, Vec<f64>)> {
    check_shapes(belief, phi, y)?;
    let sigma_bar = belief.cov.add(&belief.process_noise)?;
    let ps = sigma_bar.matmul_t(phi)?; // Σ̄ Φᵀ, nb x ny
    let innovation_cov = phi.matmul(&ps)?.add(&belief.measurement_noise)?;
    // K^T = S^{-1} (Σ̄ Φᵀ)^T since S is symmetric
    let gain_t = innovation_cov.solve_spd(&ps.transpose())?;
    let gain = gain_t.transpose();
    let residual: Vec<f64> = phi
        .matmul(&belief.mean)?
        .as_slice()
        .iter()
        .zip(y)
        .map(|(p, obs)| obs - p)
        .collect();
    let used: Vec<f64> = match options.residual_clamp {
        Some(c) => residual.iter().map(|r| r.clamp(-c, c)).collect(),
        None => residual.clone(),
    };
    let mean = belief.mean.add(&gain.matmul(&Matrix::column(&used))?)?;
    let cov = sigma_bar.sub(&gain.matmul(&phi.matmul(&sigma_bar)?)?)?.symmetrize();
    Ok((
        WeightBelief {
            mean,
            cov,
            process_noise: belief.process_noise.clone(),
            measurement_noise: belief.measurement_noise.clone(),
        },
        residual,
    ))
}

/// Result of folding [`kf_update`] over a record list.
#[derive(Debug, Clone)]
pub struct AdaptedSequence {
    pub belief: WeightBelief,
    /// `y_i − Φ_i μ_{i−1}` for each step.
    pub residuals: Vec<Vec<f64>>,
}

pub fn adapt_sequence(
    belief0: &WeightBelief,
    records: &[(Matrix, Vec<f64>)],
    options: &AdaptOptions,
) -> Result<AdaptedSequence> {
    if records.is_empty() {
        return Err(Error::InvalidInput("adapt_sequence needs at least one record".into()));
    }
    let mut belief = belief0.clone();
    let mut residuals = Vec::with_capacity(records.len());
    for (phi, y) in records {
        let (next, r) = kf_update(&belief, phi, y, options)?;
        belief = next;
        residuals.push(r);
    }
    Ok(AdaptedSequence { belief, residuals })
}

/// Tape-recorded belief: mean `nb x 1` and covariance `nb x nb`.
#[derive(Debug, Clone, Copy)]
pub struct TrackedBelief<'t> {
    pub mean: Var<'t>,
    pub cov: Var<'t>,
}

/// [`kf_update`] on the tape. `phi` is `ny x nb`, `y` is `ny x 1`.
pub fn kf_update_tracked<'t>(
    belief: TrackedBelief<'t>,
    process_noise: Var<'t>,
    measurement_noise: Var<'t>,
    phi: Var<'t>,
    y: Var<'t>,
) -> Result<TrackedBelief<'t>, KernelError> {
    let sigma_bar = belief.cov.add(&process_noise)?;
    let phi_t = phi.transpose()?;
    let ps = sigma_bar.matmul(&phi_t)?;
    let innovation_cov = phi.matmul(&ps)?.add(&measurement_noise)?;
    let gain = innovation_cov.solve_spd(&ps.transpose()?)?.transpose()?;
    let residual = y.sub(&phi.matmul(&belief.mean)?)?;
    let mean = belief.mean.add(&gain.matmul(&residual)?)?;
    let cov = sigma_bar.sub(&gain.matmul(&phi.matmul(&sigma_bar)?)?)?.symmetrize()?;
    Ok(TrackedBelief { mean, cov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Tape;
    use crate::perfmodel::KfPrior;
    use rand::Rng as _;

    fn belief(mean: &[f64], cov: Matrix, q: Matrix, r: Matrix) -> WeightBelief {
        WeightBelief { mean: Matrix::column(mean), cov, process_noise: q, measurement_noise: r }
    }

    #[test]
    fn uninformative_measurement_leaves_belief() {
        let b = belief(&[1.0, -2.0], Matrix::identity(2), Matrix::zeros(2, 2), Matrix::identity(1).scale(1e12));
        let phi = Matrix::from_rows(&[vec![0.5, 2.0]]);
        let (next, _) = kf_update(&b, &phi, &[100.0], &AdaptOptions::default()).unwrap();
        assert!(next.mean.sub(&b.mean).unwrap().max_abs() < 1e-9);
        assert!(next.cov.sub(&b.cov).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn symmetric_fusion() {
        let b = belief(&[1.0, 3.0], Matrix::identity(2), Matrix::zeros(2, 2), Matrix::identity(2));
        let (next, residual) = kf_update(&b, &Matrix::identity(2), &[3.0, -1.0], &AdaptOptions::default()).unwrap();
        assert_eq!(residual, vec![2.0, -4.0]);
        assert!(next.mean.sub(&Matrix::column(&[2.0, 1.0])).unwrap().max_abs() < 1e-15);
        assert!(next.cov.sub(&Matrix::identity(2).scale(0.5)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn single_record_sequence_equals_one_update() {
        let b = KfPrior::identity(Matrix::column(&[0.1, 0.2, 0.3]), 1).belief();
        let phi = Matrix::from_rows(&[vec![1.0, 0.5, -0.5]]);
        let (one, r) = kf_update(&b, &phi, &[0.7], &AdaptOptions::default()).unwrap();
        let seq = adapt_sequence(&b, &[(phi, vec![0.7])], &AdaptOptions::default()).unwrap();
        assert_eq!(seq.belief, one);
        assert_eq!(seq.residuals, vec![r]);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let b = KfPrior::identity(Matrix::zeros(2, 1), 1).belief();
        assert!(adapt_sequence(&b, &[], &AdaptOptions::default()).is_err());
    }

    #[test]
    fn residual_clamp_limits_the_step() {
        let b = belief(&[0.0], Matrix::identity(1), Matrix::zeros(1, 1), Matrix::identity(1));
        let phi = Matrix::identity(1);
        let opts = AdaptOptions { residual_clamp: Some(1.0) };
        let (next, r) = kf_update(&b, &phi, &[10.0], &opts).unwrap();
        assert_eq!(r, vec![10.0]);
        assert!((next.mean.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let b = KfPrior::identity(Matrix::zeros(3, 1), 1).belief();
        assert!(kf_update(&b, &Matrix::zeros(1, 2), &[0.0], &AdaptOptions::default()).is_err());
        assert!(kf_update(&b, &Matrix::zeros(1, 3), &[0.0, 1.0], &AdaptOptions::default()).is_err());
    }

    #[test]
    fn tracked_matches_plain() {
        let mut rng = crate::rng::stream(3, &[]);
        let mut rand_m = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let prior = KfPrior { w0: rand_m(4, 1), sigma0_factor: rand_m(4, 4), q_factor: rand_m(4, 4), r_factor: rand_m(2, 2) };
        let b = prior.belief();
        let phi = rand_m(2, 4);
        let y = rand_m(2, 1);
        let (plain, _) = kf_update(&b, &phi, y.as_slice(), &AdaptOptions::default()).unwrap();
        let tape = Tape::new();
        let tb = TrackedBelief { mean: tape.constant(b.mean.clone()), cov: tape.constant(b.cov.clone()) };
        let out = kf_update_tracked(
            tb,
            tape.constant(b.process_noise.clone()),
            tape.constant(b.measurement_noise.clone()),
            tape.constant(phi),
            tape.constant(y),
        )
        .unwrap();
        assert!(out.mean.value().sub(&plain.mean).unwrap().max_abs() < 1e-12);
        assert!(out.cov.value().sub(&plain.cov).unwrap().max_abs() < 1e-12);
    }
}
