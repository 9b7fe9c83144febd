//! Training data grouped by system parameters, and its binary file format.
//!
//! Layout (little-endian): magic `OCCAMDAT`, `u32` version, env name string,
//! `u32` gain/task/history/z/u/metric dims, `u32` batch count, then per batch
//! the `θ` vector, `u32` record count, and per record gains, task, `z`
//! history matrix, `u` history matrix and metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::perfmodel::EpisodeRecord;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"OCCAMDAT";
const VERSION: usize = 1;

/// `N_B` records collected under one `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBatch {
    pub theta: Vec<f64>,
    pub records: Vec<EpisodeRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: String,
    pub batches: Vec<ParamBatch>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &EpisodeRecord> + Clone {
        self.batches.iter().flat_map(|b| b.records.iter())
    }

    /// Smallest batch size.
    pub fn min_batch_len(&self) -> usize {
        self.batches.iter().map(|b| b.records.len()).min().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .batches
            .first()
            .and_then(|b| b.records.first())
            .ok_or_else(|| Error::InvalidInput("dataset is empty".into()))?;
        for (i, b) in self.batches.iter().enumerate() {
            if b.records.is_empty() {
                return Err(Error::InvalidInput(format!("batch {i} has no records")));
            }
            for r in &b.records {
                if r.theta != b.theta {
                    return Err(Error::InvalidInput(format!("batch {i} mixes system parameters")));
                }
                if r.gains.len() != first.gains.len()
                    || r.task.len() != first.task.len()
                    || r.metrics.len() != first.metrics.len()
                    || r.z_hist.shape() != first.z_hist.shape()
                    || r.u_hist.shape() != first.u_hist.shape()
                {
                    return Err(Error::InvalidInput(format!("batch {i} has records of inconsistent shape")));
                }
            }
        }
        Ok(())
    }

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
        self.validate()?;
        let r0 = &self.batches[0].records[0];
        let mut w = Writer::new(out);
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.string(&self.env)?;
        for d in [r0.gains.len(), r0.task.len(), r0.z_hist.rows(), r0.z_hist.cols(), r0.u_hist.cols(), r0.metrics.len()] {
            w.u32(d)?;
        }
        w.u32(self.batches.len())?;
        for b in &self.batches {
            w.vec(&b.theta)?;
            w.u32(b.records.len())?;
            for r in &b.records {
                w.f64s(&r.gains)?;
                w.f64s(&r.task)?;
                w.f64s(r.z_hist.as_slice())?;
                w.f64s(r.u_hist.as_slice())?;
                w.f64s(&r.metrics)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("dataset version {version}, expected {VERSION}")));
        }
        let env = r.string()?;
        let (g, t, h, z, u, m) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let n = r.u32()?;
        let mut batches = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let theta = r.vec()?;
            let count = r.u32()?;
            let mut records = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let gains = r.f64s(g)?;
                let task = r.f64s(t)?;
                let z_hist = crate::numkernel::Matrix::from_vec(h, z, r.f64s(h * z)?)?;
                let u_hist = crate::numkernel::Matrix::from_vec(h, u, r.f64s(h * u)?)?;
                let metrics = r.f64s(m)?;
                records.push(EpisodeRecord { gains, task, z_hist, u_hist, metrics, theta: theta.clone() });
            }
            batches.push(ParamBatch { theta, records });
        }
        let ds = Self { env, batches };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Matrix;

    fn sample() -> Dataset {
        let rec = |x: f64| EpisodeRecord {
            gains: vec![x, 2.0 * x],
            task: vec![0.5],
            z_hist: Matrix::filled(2, 1, x),
            u_hist: Matrix::filled(2, 1, -x),
            metrics: vec![x * x],
            theta: vec![1.0, 2.0],
        };
        Dataset { env: "toy".into(), batches: vec![ParamBatch { theta: vec![1.0, 2.0], records: vec![rec(0.1), rec(0.3)] }] }
    }

    #[test]
    fn roundtrip() {
        let ds = sample();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Dataset::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn mixed_theta_is_rejected() {
        let mut ds = sample();
        ds.batches[0].records[1].theta = vec![0.0, 0.0];
        assert!(ds.validate().is_err());
    }
}
