use crate::numkernel::Matrix;
use crate::perfmodel::EpisodeRecord;
use crate::{Error, Result};

/// Per-dimension standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Fits on rows of equal length. Dimensions with (near) zero spread get
    /// `std = 1` so the statistics stay invertible.
    pub fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut count = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            debug_assert_eq!(row.len(), dim);
            count += 1;
            for d in 0..dim {
                let delta = row[d] - mean[d];
                mean[d] += delta / count as f64;
                m2[d] += delta * (row[d] - mean[d]);
            }
        }
        let std = m2
            .iter()
            .map(|s| {
                let sd = if count > 1 { (s / (count - 1) as f64).sqrt() } else { 0.0 };
                if sd > 1e-12 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| v * s + m).collect()
    }

    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (v, (m, s))) in out.iter_mut().zip(x.iter().zip(self.mean.iter().zip(&self.std))) {
            *o = (v - m) / s;
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::Format(format!("{name} statistics have mismatched lengths")));
        }
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Format(format!("{name} statistics need finite std > 0")));
        }
        Ok(())
    }
}

/// Input and output statistics of a trained model.
///
/// Frozen at training time; online data never updates them.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub gain: Standardizer,
    pub task: Standardizer,
    pub z: Standardizer,
    pub u: Standardizer,
    pub metric: Standardizer,
}

impl Normalizer {
    pub fn identity(gain: usize, task: usize, z: usize, u: usize, metric: usize) -> Self {
        Self {
            gain: Standardizer::identity(gain),
            task: Standardizer::identity(task),
            z: Standardizer::identity(z),
            u: Standardizer::identity(u),
            metric: Standardizer::identity(metric),
        }
    }

    pub fn fit<'a>(records: impl Iterator<Item = &'a EpisodeRecord> + Clone) -> Result<Self> {
        let first = records.clone().next().ok_or_else(|| Error::InvalidInput("no records".into()))?;
        let (ng, nt, nz, nu, ny) = (
            first.gains.len(),
            first.task.len(),
            first.z_hist.cols(),
            first.u_hist.cols(),
            first.metrics.len(),
        );
        let gain = Standardizer::fit(ng, records.clone().map(|r| r.gains.as_slice()));
        let task = Standardizer::fit(nt, records.clone().map(|r| r.task.as_slice()));
        let z = Standardizer::fit(nz, records.clone().flat_map(|r| (0..r.z_hist.rows()).map(move |i| r.z_hist.row(i))));
        let u = Standardizer::fit(nu, records.clone().flat_map(|r| (0..r.u_hist.rows()).map(move |i| r.u_hist.row(i))));
        let metric = Standardizer::fit(ny, records.map(|r| r.metrics.as_slice()));
        Ok(Self { gain, task, z, u, metric })
    }

    pub fn validate(&self) -> Result<()> {
        self.gain.validate("gain")?;
        self.task.validate("task")?;
        self.z.validate("z")?;
        self.u.validate("u")?;
        self.metric.validate("metric")
    }

    /// Flattens a `(z, u)` history into one normalized row:
    /// `[z_0, u_0, z_1, u_1, ...]`, oldest step first.
    pub fn history_row(&self, z_hist: &Matrix, u_hist: &Matrix, out: &mut [f64]) {
        let (nz, nu) = (z_hist.cols(), u_hist.cols());
        for k in 0..z_hist.rows() {
            let base = k * (nz + nu);
            self.z.normalize_into(z_hist.row(k), &mut out[base..base + nz]);
            self.u.normalize_into(u_hist.row(k), &mut out[base + nz..base + nz + nu]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_dimension_gets_unit_std() {
        let rows = [vec![1.0, 2.0], vec![1.0, 4.0]];
        let s = Standardizer::fit(2, rows.iter().map(|r| r.as_slice()));
        assert_eq!(s.std[0], 1.0);
        assert!((s.std[1] - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.mean, vec![1.0, 3.0]);
    }

    proptest! {
        #[test]
        fn denormalize_then_normalize_is_identity(
            x in prop::collection::vec(-1e3f64..1e3, 3),
            mean in prop::collection::vec(-10f64..10.0, 3),
            std in prop::collection::vec(0.01f64..10.0, 3),
        ) {
            let s = Standardizer { mean, std };
            let back = s.normalize(&s.denormalize(&x));
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
