//! Little-endian binary helpers shared by the checkpoint and dataset files.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::numkernel::Matrix;
use crate::{Error, Result};

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        Ok(self.inner.write_all(b)?)
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.inner.write_u8(v)?)
    }

    pub fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        Ok(self.inner.write_u32::<LittleEndian>(v)?)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.inner.write_f64::<LittleEndian>(v)?)
    }

    pub fn f64s(&mut self, v: &[f64]) -> Result<()> {
        for x in v {
            self.f64(*x)?;
        }
        Ok(())
    }

    /// `u32 len` followed by `len` values.
    pub fn vec(&mut self, v: &[f64]) -> Result<()> {
        self.u32(v.len())?;
        self.f64s(v)
    }

    pub fn usizes(&mut self, v: &[usize]) -> Result<()> {
        self.u32(v.len())?;
        for x in v {
            self.u32(*x)?;
        }
        Ok(())
    }

    /// `u32 rows, u32 cols`, then row-major values.
    pub fn matrix(&mut self, m: &Matrix) -> Result<()> {
        self.u32(m.rows())?;
        self.u32(m.cols())?;
        self.f64s(m.as_slice())
    }

    pub fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.bytes(s.as_bytes())
    }
}

pub(crate) struct Reader<R: Read> {
    inner: R,
}

/// Guards against allocating absurd sizes from corrupt headers.
const MAX_LEN: usize = 1 << 30;

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let mut buf = vec![0u8; magic.len()];
        self.inner.read_exact(&mut buf)?;
        if buf != magic {
            return Err(Error::Format(format!(
                "bad magic: expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.inner.read_u8()?)
    }

    pub fn u32(&mut self) -> Result<usize> {
        Ok(self.inner.read_u32::<LittleEndian>()? as usize)
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u32()?;
        if n > MAX_LEN {
            return Err(Error::Format(format!("length {n} too large")));
        }
        Ok(n)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > MAX_LEN {
            return Err(Error::Format(format!("length {n} too large")));
        }
        let mut v = vec![0.0; n];
        self.inner.read_f64_into::<LittleEndian>(&mut v)?;
        Ok(v)
    }

    pub fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        self.f64s(n)
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        (0..n).map(|_| self.u32()).collect()
    }

    pub fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.len()?;
        let cols = self.len()?;
        let data = self.f64s(rows.checked_mul(cols).ok_or_else(|| Error::Format("matrix too large".into()))?)?;
        Ok(Matrix::from_vec(rows, cols, data)?)
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }
}
