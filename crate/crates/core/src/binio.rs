//! Little-endian readers with offset-aware format errors.

use std::io::Read;

use crate::error::{Error, Result};

pub(crate) struct LeReader<R> {
    inner: R,
    offset: u64,
    what: &'static str,
}

impl<R: Read> LeReader<R> {
    pub fn new(inner: R, what: &'static str) -> Self {
        LeReader {
            inner,
            offset: 0,
            what,
        }
    }

    pub fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::format(self.what, format!("{msg} (offset {})", self.offset))
    }

    pub fn bytes(&mut self, buf: &mut [u8], field: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| self.err(format!("truncated while reading {field}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, field)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn f32s(&mut self, out: &mut Vec<f64>, n: usize, field: &str) -> Result<()> {
        let mut buf = vec![0u8; n * 4];
        self.bytes(&mut buf, field)?;
        out.extend(
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
        );
        Ok(())
    }

    pub fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        self.bytes(&mut buf, field)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// True when the stream has no more bytes.
    pub fn at_eof(&mut self) -> bool {
        let mut b = [0u8; 1];
        matches!(self.inner.read(&mut b), Ok(0))
    }
}
