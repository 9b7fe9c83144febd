//! Checkpoint container.
//!
//! All integers are little-endian `u32` unless noted, all reals
//! little-endian `f64`, matrices are `rows, cols` followed by row-major
//! values. Field order:
//!
//! | field | encoding |
//! |---|---|
//! | magic | 8 bytes `OCCAMCKP` |
//! | version | `u32` (currently 1) |
//! | training stage | `u8`: 0 pretrained, 1 meta-trained |
//! | history_len, z_dim, u_dim, gain_dim, task_dim, metric_dim, basis_dim, encoded_dim | 8 x `u32` |
//! | use_context | `u8` |
//! | encoder_layers, trunk_layers | `u32` count + `u32` widths, each |
//! | normalizer | gain, task, z, u, metric: each `u32 n`, `n` means, `n` stds |
//! | encoder | `u32` layer count, then per layer weight matrix and bias matrix |
//! | trunk | same as encoder |
//! | prior | `w0`, `Σ0` factor, `Q` factor, `R` factor as matrices |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::perfmodel::{BasisNetwork, Dense, KfPrior, Mlp, ModelConfig, Normalizer, Standardizer};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"OCCAMCKP";
const VERSION: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingStage {
    Pretrained,
    MetaTrained,
}

/// Trained network plus the learned filter prior.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: TrainingStage,
    pub network: BasisNetwork,
    pub prior: KfPrior,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u8(match self.stage {
            TrainingStage::Pretrained => 0,
            TrainingStage::MetaTrained => 1,
        })?;
        let c = &self.network.config;
        for v in [c.history_len, c.z_dim, c.u_dim, c.gain_dim, c.task_dim, c.metric_dim, c.basis_dim, c.encoded_dim] {
            w.u32(v)?;
        }
        w.u8(c.use_context as u8)?;
        w.usizes(&c.encoder_layers)?;
        w.usizes(&c.trunk_layers)?;
        let n = &self.network.normalizer;
        for s in [&n.gain, &n.task, &n.z, &n.u, &n.metric] {
            w.vec(&s.mean)?;
            w.f64s(&s.std)?;
        }
        let empty = Mlp { layers: Vec::new() };
        for mlp in [self.network.encoder.as_ref().unwrap_or(&empty), &self.network.trunk] {
            w.u32(mlp.layers.len())?;
            for layer in &mlp.layers {
                w.matrix(&layer.weight)?;
                w.matrix(&layer.bias)?;
            }
        }
        let p = &self.prior;
        for m in [&p.w0, &p.sigma0_factor, &p.q_factor, &p.r_factor] {
            w.matrix(m)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let stage = match r.u8()? {
            0 => TrainingStage::Pretrained,
            1 => TrainingStage::MetaTrained,
            s => return Err(Error::Format(format!("unknown training stage {s}"))),
        };
        let mut dims = [0usize; 8];
        for d in dims.iter_mut() {
            *d = r.u32()?;
        }
        let use_context = r.u8()? != 0;
        let config = ModelConfig {
            history_len: dims[0],
            z_dim: dims[1],
            u_dim: dims[2],
            gain_dim: dims[3],
            task_dim: dims[4],
            metric_dim: dims[5],
            basis_dim: dims[6],
            encoded_dim: dims[7],
            use_context,
            encoder_layers: r.usizes()?,
            trunk_layers: r.usizes()?,
        };
        config.validate()?;
        let read_std = |r: &mut Reader<R>| -> Result<Standardizer> {
            let mean = r.vec()?;
            let std = r.f64s(mean.len())?;
            Ok(Standardizer { mean, std })
        };
        let normalizer = Normalizer {
            gain: read_std(&mut r)?,
            task: read_std(&mut r)?,
            z: read_std(&mut r)?,
            u: read_std(&mut r)?,
            metric: read_std(&mut r)?,
        };
        normalizer.validate()?;
        let read_mlp = |r: &mut Reader<R>| -> Result<Mlp> {
            let n = r.u32()?;
            let layers = (0..n)
                .map(|_| Ok(Dense { weight: r.matrix()?, bias: r.matrix()? }))
                .collect::<Result<Vec<_>>>()?;
            Ok(Mlp { layers })
        };
        let encoder = read_mlp(&mut r)?;
        let trunk = read_mlp(&mut r)?;
        let encoder = if config.use_context { Some(encoder) } else { None };
        let prior = KfPrior {
            w0: r.matrix()?,
            sigma0_factor: r.matrix()?,
            q_factor: r.matrix()?,
            r_factor: r.matrix()?,
        };
        prior.validate()?;
        let network = BasisNetwork { config, normalizer, encoder, trunk };
        check_network_shapes(&network)?;
        if prior.basis_dim() != network.config.basis_dim || prior.metric_dim() != network.config.metric_dim {
            return Err(Error::Format("prior dimensions do not match network".into()));
        }
        Ok(Self { stage, network, prior })
    }
}

fn check_network_shapes(net: &BasisNetwork) -> Result<()> {
    let c = &net.config;
    let check = |mlp: &Mlp, input: usize, hidden: &[usize], output: usize| -> Result<()> {
        let widths: Vec<usize> = hidden.iter().copied().chain(std::iter::once(output)).collect();
        if mlp.layers.len() != widths.len() {
            return Err(Error::Format("layer count does not match config".into()));
        }
        let mut prev = input;
        for (layer, &w) in mlp.layers.iter().zip(&widths) {
            if layer.weight.shape() != (prev, w) || layer.bias.shape() != (1, w) {
                return Err(Error::Format("layer shape does not match config".into()));
            }
            prev = w;
        }
        Ok(())
    };
    if let Some(enc) = &net.encoder {
        check(enc, c.history_width(), &c.encoder_layers, c.encoded_dim)?;
    }
    check(&net.trunk, c.trunk_input_dim(), &c.trunk_layers, c.output_dim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Matrix;

    #[test]
    fn roundtrip_preserves_everything() {
        let cfg = ModelConfig::race_car(10);
        let mut norm = Normalizer::identity(6, 10, 3, 3, 3);
        norm.metric.mean = vec![0.5, 0.25, 12.0];
        let net = BasisNetwork::new(cfg, norm, 4).unwrap();
        let mut prior = KfPrior::identity(Matrix::filled(5, 1, 0.3), 3);
        prior.q_factor.set(2, 1, 0.125);
        let ckpt = Checkpoint { stage: TrainingStage::MetaTrained, network: net, prior };
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"OCCAMCKP");
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::read_from(&b"NOTACKPT"[..]).is_err());
        let net = BasisNetwork::new(ModelConfig::branin(), Normalizer::identity(2, 0, 0, 0, 1), 1).unwrap();
        let ckpt = Checkpoint {
            stage: TrainingStage::Pretrained,
            network: net,
            prior: KfPrior::identity(Matrix::zeros(5, 1), 1),
        };
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(buf.as_slice()).is_err());
    }
}
