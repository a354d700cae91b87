//! Little-endian readers shared by the binary file formats.

use std::io::{ErrorKind, Read};

use crate::error::{Error, Result};

pub(crate) struct LeReader<R> {
    inner: R,
    /// Prefix used in truncation errors, e.g. "record 12".
    pub(crate) location: String,
}

impl<R: Read> LeReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self {
            inner,
            location: "header".into(),
        }
    }

    pub(crate) fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::parse(self.location.clone(), "truncated file")
            } else {
                Error::Io(e)
            }
        })
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub(crate) fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let v = self.f64()?;
            if !v.is_finite() {
                return Err(Error::parse(self.location.clone(), "non-finite value"));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// u16 length prefix + UTF-8 bytes; length 0 reads as `None`.
    pub(crate) fn short_string(&mut self) -> Result<Option<String>> {
        let len = self.u16()? as usize;
        if len == 0 {
            return Ok(None);
        }
        let mut bytes = vec![0u8; len];
        self.fill(&mut bytes)?;
        String::from_utf8(bytes)
            .map(Some)
            .map_err(|_| Error::parse(self.location.clone(), "invalid UTF-8 identifier"))
    }

    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        let mut rest = [0u8; 1];
        if self.inner.read(&mut rest)? != 0 {
            return Err(Error::parse("trailer", "unexpected bytes after end of data"));
        }
        Ok(())
    }
}
