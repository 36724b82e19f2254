//! Little-endian binary encoding shared by the VSEQ, VCOD, GMM1 and CKPT formats.

use crate::error::{Error, Result};

#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> &mut Self {
        self.buf.extend_from_slice(magic);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// u32 length prefix followed by the values.
    pub fn f64_slice(&mut self, v: &[f64]) -> Result<&mut Self> {
        self.u32(len_u32(v.len(), "f64 block length")?);
        for &x in v {
            self.f64(x);
        }
        Ok(self)
    }

    /// u32 length prefix followed by UTF-8 bytes.
    pub fn str32(&mut self, s: &str) -> Result<&mut Self> {
        self.u32(len_u32(s.len(), "string length")?);
        self.bytes(s.as_bytes());
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::FormatOverflow(format!("{what} {n} exceeds u32")))
}

pub(crate) fn len_u16(n: usize, what: &str) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::FormatOverflow(format!("{what} {n} exceeds u16")))
}

/// Cursor over a byte buffer that reports the byte offset of every failure.
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.pos,
                what: format!("{what}: need {n} bytes, {} left", self.remaining()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// Reads an f32 and rejects NaN/Inf, naming the offending offset.
    pub fn finite_f32(&mut self, what: &str) -> Result<f32> {
        let at = self.pos;
        let v = f32::from_le_bytes(self.take(4, what)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite { offset: at, what: what.to_string() });
        }
        Ok(v)
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u32(what)? as usize;
        if self.remaining() < n.saturating_mul(8) {
            return Err(Error::Truncated {
                offset: self.pos,
                what: format!("{what}: {n} values announced, {} bytes left", self.remaining()),
            });
        }
        (0..n).map(|_| self.f64(what)).collect()
    }

    pub fn str32(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Malformed { offset: at, what: format!("{what}: invalid UTF-8") })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_reports_offset() {
        let mut e = Encoder::new();
        e.u32(7).u16(3);
        let bytes = e.into_bytes();
        let mut d = Decoder::new(&bytes);
        assert_eq!(d.u32("a").unwrap(), 7);
        match d.u32("b") {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_is_rejected_with_position() {
        let mut e = Encoder::new();
        e.f32(1.0).f32(f32::NAN);
        let bytes = e.into_bytes();
        let mut d = Decoder::new(&bytes);
        d.finite_f32("x").unwrap();
        match d.finite_f32("x") {
            Err(Error::NonFinite { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
    }
}
