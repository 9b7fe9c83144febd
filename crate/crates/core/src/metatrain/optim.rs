use serde::{Deserialize, Serialize};

use crate::numkernel::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Gradient step over a fixed list of parameter matrices.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64, t: i32, m: Vec<Matrix>, v: Vec<Matrix> },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shapes: &[(usize, usize)]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: 0,
                m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
                v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            },
        }
    }

    /// `lrs[i]` is the step size for `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lrs: &[f64]) {
        match self {
            Optimizer::Sgd => {
                for ((p, g), lr) in params.iter_mut().zip(grads).zip(lrs) {
                    p.axpy(-lr, g).expect("gradient shape");
                }
            }
            Optimizer::Adam { beta1, beta2, eps, t, m, v } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (mi, vi) = (m[i].as_mut_slice(), v[i].as_mut_slice());
                    for (k, (pv, gv)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                        mi[k] = *beta1 * mi[k] + (1.0 - *beta1) * gv;
                        vi[k] = *beta2 * vi[k] + (1.0 - *beta2) * gv * gv;
                        *pv -= lrs[i] * (mi[k] / c1) / ((vi[k] / c2).sqrt() + *eps);
                    }
                }
            }
        }
    }
}

/// Rescales `grads` so their joint Frobenius norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_plain_descent() {
        let mut p = Matrix::column(&[1.0, 2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &[(2, 1)]);
        opt.step(&mut [&mut p], &[Matrix::column(&[0.5, -1.0])], &[0.1]);
        assert_eq!(p.as_slice(), &[0.95, 2.1]);
    }

    #[test]
    fn adam_first_step_has_unit_magnitude() {
        let mut p = Matrix::column(&[0.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &[(2, 1)]);
        opt.step(&mut [&mut p], &[Matrix::column(&[3.0, -0.01])], &[0.1]);
        assert!((p.get(0, 0) + 0.1).abs() < 1e-6);
        assert!((p.get(1, 0) - 0.1).abs() < 1e-4);
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut g = vec![Matrix::column(&[3.0]), Matrix::column(&[4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].get(0, 0) - 0.6).abs() < 1e-12 && (g[1].get(0, 0) - 0.8).abs() < 1e-12);
    }
}
