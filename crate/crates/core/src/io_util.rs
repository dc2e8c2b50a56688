//! Little-endian helpers for the binary dump formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) struct ByteReader<R> {
    inner: R,
}

impl<R: Read> ByteReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
                _ => Error::Io(e),
            })?;
        Ok(buf)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.bytes()?))
    }

    /// Errors unless the stream is exhausted.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after payload".into())),
        }
    }
}

pub(crate) fn read_array<R: Read, const N: usize>(r: &mut ByteReader<R>) -> Result<[u8; N]> {
    r.bytes()
}

pub(crate) fn read_f64s<R: Read>(r: &mut ByteReader<R>, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| r.f64()).collect()
}

pub(crate) fn read_i64s<R: Read>(r: &mut ByteReader<R>, n: usize) -> Result<Vec<i64>> {
    (0..n).map(|_| r.i64()).collect()
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn write_i64s<W: Write>(w: &mut W, values: &[i64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}
