use crate::numkernel::Matrix;
use crate::{Error, Result};

/// Lower bound added to the diagonal of `R` so the innovation covariance is
/// strictly positive definite even if the learned factor collapses.
pub const MEASUREMENT_NOISE_FLOOR: f64 = 1e-6;

/// Gaussian belief `w ~ N(mean, cov)` over the last-layer weights, with the
/// filter's process noise `Q` and measurement noise `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBelief {
    /// `basis_dim x 1`
    pub mean: Matrix,
    /// `basis_dim x basis_dim`
    pub cov: Matrix,
    /// `Q`, `basis_dim x basis_dim`
    pub process_noise: Matrix,
    /// `R`, `metric_dim x metric_dim`
    pub measurement_noise: Matrix,
}

impl WeightBelief {
    pub fn basis_dim(&self) -> usize {
        self.mean.rows()
    }

    pub fn metric_dim(&self) -> usize {
        self.measurement_noise.rows()
    }

    /// Smallest `x^T Σ x` over `directions` random unit vectors.
    pub fn min_quadratic_form(&self, directions: usize, rng: &mut crate::rng::Rng) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        let n = self.basis_dim();
        (0..directions)
            .map(|_| {
                let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                x.iter_mut().for_each(|v| *v /= norm);
                self.cov.quadratic_form(&x)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Learned filter parameters `(w0, Σ0, Q, R)`. Covariances are stored as
/// unconstrained square factors `L`; the covariance is `tril(L) tril(L)^T`
/// (plus [`MEASUREMENT_NOISE_FLOOR`] on the diagonal of `R`), so every
/// gradient step leaves them positive semi-definite.
#[derive(Debug, Clone, PartialEq)]
pub struct KfPrior {
    pub w0: Matrix,
    pub sigma0_factor: Matrix,
    pub q_factor: Matrix,
    pub r_factor: Matrix,
}

impl KfPrior {
    /// `Σ0 = Q = R = I` around the given initial mean.
    pub fn identity(w0: Matrix, metric_dim: usize) -> Self {
        let n = w0.rows();
        Self {
            w0,
            sigma0_factor: Matrix::identity(n),
            q_factor: Matrix::identity(n),
            r_factor: Matrix::identity(metric_dim),
        }
    }

    pub fn basis_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn metric_dim(&self) -> usize {
        self.r_factor.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.basis_dim();
        let m = self.metric_dim();
        if self.w0.cols() != 1
            || self.sigma0_factor.shape() != (n, n)
            || self.q_factor.shape() != (n, n)
            || self.r_factor.shape() != (m, m)
        {
            return Err(Error::Format("filter prior shapes are inconsistent".into()));
        }
        Ok(())
    }

    pub fn sigma0(&self) -> Matrix {
        psd(&self.sigma0_factor)
    }

    pub fn process_noise(&self) -> Matrix {
        psd(&self.q_factor)
    }

    pub fn measurement_noise(&self) -> Matrix {
        let mut r = psd(&self.r_factor);
        for i in 0..r.rows() {
            r.set(i, i, r.get(i, i) + MEASUREMENT_NOISE_FLOOR);
        }
        r
    }

    /// The belief the online session starts from.
    pub fn belief(&self) -> WeightBelief {
        WeightBelief {
            mean: self.w0.clone(),
            cov: self.sigma0(),
            process_noise: self.process_noise(),
            measurement_noise: self.measurement_noise(),
        }
    }
}

fn psd(factor: &Matrix) -> Matrix {
    let l = factor.lower_triangle();
    l.matmul_t(&l).expect("square factor")
}

/// Predictive distribution `N(Φ μ, Φ Σ Φ^T)`. With `include_noise` the
/// measurement noise `R` is added to the covariance.
pub fn predict(phi: &Matrix, belief: &WeightBelief, include_noise: bool) -> Result<(Vec<f64>, Matrix)> {
    let mean = phi.matmul(&belief.mean)?.into_vec();
    let mut cov = phi.matmul(&belief.cov)?.matmul_t(phi)?.symmetrize();
    if include_noise {
        cov = cov.add(&belief.measurement_noise)?;
    }
    Ok((mean, cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_matrix(rows: usize, cols: usize, rng: &mut crate::rng::Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_covariance_gives_zero_predictive_covariance() {
        let phi = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 0.5]]);
        let belief = WeightBelief {
            mean: Matrix::column(&[1.0, 1.0, 2.0]),
            cov: Matrix::zeros(3, 3),
            process_noise: Matrix::zeros(3, 3),
            measurement_noise: Matrix::identity(2),
        };
        let (mean, cov) = predict(&phi, &belief, false).unwrap();
        assert_eq!(mean, vec![9.0, 0.0]);
        assert_eq!(cov, Matrix::zeros(2, 2));
        let (_, with_r) = predict(&phi, &belief, true).unwrap();
        assert_eq!(with_r, Matrix::identity(2));
    }

    #[test]
    fn row_selector_picks_mean_entries() {
        let phi = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let belief = KfPrior::identity(Matrix::column(&[4.0, 5.0, 6.0]), 2).belief();
        let (mean, _) = predict(&phi, &belief, false).unwrap();
        assert_eq!(mean, vec![5.0, 6.0]);
    }

    #[test]
    fn predictive_covariance_is_psd() {
        let mut rng = crate::rng::stream(5, &[]);
        for _ in 0..20 {
            let phi = random_matrix(3, 5, &mut rng);
            let prior = KfPrior {
                w0: random_matrix(5, 1, &mut rng),
                sigma0_factor: random_matrix(5, 5, &mut rng),
                q_factor: random_matrix(5, 5, &mut rng),
                r_factor: random_matrix(3, 3, &mut rng),
            };
            let (_, cov) = predict(&phi, &prior.belief(), false).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                assert!(cov.quadratic_form(&x) >= -1e-12);
            }
            assert_eq!(cov, cov.transpose());
        }
    }

    #[test]
    fn factor_parameterization_is_psd_for_any_factor() {
        let mut rng = crate::rng::stream(6, &[]);
        for _ in 0..50 {
            let l = random_matrix(4, 4, &mut rng).scale(3.0);
            let s = psd(&l);
            assert_eq!(s, s.transpose());
            for _ in 0..10 {
                let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                assert!(s.quadratic_form(&x) >= 0.0);
            }
        }
    }
}
