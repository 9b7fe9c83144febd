use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape of the basis network and its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of past control steps fed to the context encoder.
    pub history_len: usize,
    pub z_dim: usize,
    pub u_dim: usize,
    pub gain_dim: usize,
    /// May be zero when the system has no task encoding.
    pub task_dim: usize,
    pub metric_dim: usize,
    pub basis_dim: usize,
    pub encoder_layers: Vec<usize>,
    pub encoded_dim: usize,
    pub trunk_layers: Vec<usize>,
    pub use_context: bool,
}

impl ModelConfig {
    /// Branin: 2 inputs, 1 metric, no history.
    pub fn branin() -> Self {
        Self::benchmark(2, vec![16, 16, 16], 5)
    }

    /// Hartmann: 6 inputs, 1 metric, no history.
    pub fn hartmann() -> Self {
        Self::benchmark(6, vec![32, 32, 32], 15)
    }

    fn benchmark(gain_dim: usize, trunk_layers: Vec<usize>, basis_dim: usize) -> Self {
        Self {
            history_len: 0,
            z_dim: 0,
            u_dim: 0,
            gain_dim,
            task_dim: 0,
            metric_dim: 1,
            basis_dim,
            encoder_layers: Vec::new(),
            encoded_dim: 0,
            trunk_layers,
            use_context: false,
        }
    }

    /// Race car: 6 gains, 3 metrics, 25-step history of `[v, ω, e_lat]` and
    /// `[u_s, u_g, u_b]`, `task_dim` curvature samples.
    pub fn race_car(task_dim: usize) -> Self {
        Self {
            history_len: 25,
            z_dim: 3,
            u_dim: 3,
            gain_dim: 6,
            task_dim,
            metric_dim: 3,
            basis_dim: 5,
            encoder_layers: vec![32, 32],
            encoded_dim: 15,
            trunk_layers: vec![32, 32, 32],
            use_context: true,
        }
    }

    /// Flattened history width per record.
    pub fn history_width(&self) -> usize {
        if self.use_context {
            self.history_len * (self.z_dim + self.u_dim)
        } else {
            0
        }
    }

    pub fn context_dim(&self) -> usize {
        if self.use_context {
            self.encoded_dim
        } else {
            0
        }
    }

    pub fn trunk_input_dim(&self) -> usize {
        self.context_dim() + self.gain_dim + self.task_dim
    }

    pub fn output_dim(&self) -> usize {
        self.metric_dim * self.basis_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gain_dim", self.gain_dim),
            ("metric_dim", self.metric_dim),
            ("basis_dim", self.basis_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.use_context {
            let ctx = [
                ("history_len", self.history_len),
                ("z_dim", self.z_dim),
                ("u_dim", self.u_dim),
                ("encoded_dim", self.encoded_dim),
            ];
            for (name, v) in ctx {
                if v == 0 {
                    return Err(Error::Config(format!("{name} must be at least 1 when use_context is set")));
                }
            }
        } else if !self.encoder_layers.is_empty() {
            return Err(Error::Config("encoder_layers must be empty when use_context is false".into()));
        }
        if self.encoder_layers.iter().chain(&self.trunk_layers).any(|w| *w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::branin(), ModelConfig::hartmann(), ModelConfig::race_car(10)] {
            cfg.validate().unwrap();
        }
        assert_eq!(ModelConfig::race_car(10).output_dim(), 15);
        assert_eq!(ModelConfig::hartmann().basis_dim, 15);
    }

    #[test]
    fn benchmark_rejects_encoder_layers() {
        let mut cfg = ModelConfig::branin();
        cfg.encoder_layers = vec![8];
        assert!(cfg.validate().is_err());
    }
}
