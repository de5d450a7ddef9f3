//! Little-endian section codec for the store file.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CDRSTOR\0";
pub const VERSION: u32 = 1;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32s(&mut self, vs: impl IntoIterator<Item = u32>) {
        for v in vs {
            self.u32(v);
        }
    }

    /// Appends a tagged section whose payload is produced by `body`.
    pub fn section(&mut self, tag: &[u8; 4], body: impl FnOnce(&mut Writer)) {
        let mut inner = Writer::default();
        body(&mut inner);
        self.bytes(tag);
        self.u64(inner.buf.len() as u64);
        self.bytes(&inner.buf);
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of store file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub fn i32(&mut self) -> Result<i32> {
        self.array().map(i32::from_le_bytes)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }

    pub fn str(&mut self) -> Result<&'a str> {
        let len = self.u32()? as usize;
        std::str::from_utf8(self.take(len)?).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    /// Reads a length that must fit in the remaining bytes at `unit` bytes
    /// per element.
    pub fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("element count {n} exceeds section size")));
        }
        Ok(n)
    }

    pub fn u32_vec(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn i64_vec(&mut self, n: usize) -> Result<Vec<i64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Next `(tag, payload)` section.
    pub fn section(&mut self) -> Result<([u8; 4], Reader<'a>)> {
        let tag = self.array::<4>()?;
        let len = self.u64()? as usize;
        Ok((tag, Reader::new(self.take(len)?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_round_trip() {
        let mut w = Writer::default();
        w.section(b"TEST", |s| {
            s.u8(7);
            s.i32(-5);
            s.i64(-1 << 40);
            s.i64(3);
            s.f64(0.1);
            s.str("héllo");
            s.u64(2);
            s.u32s([1, 2]);
        });
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        let (tag, mut s) = r.section().unwrap();
        assert_eq!(&tag, b"TEST");
        assert_eq!(s.u8().unwrap(), 7);
        assert_eq!(s.i32().unwrap(), -5);
        assert_eq!(s.i64_vec(2).unwrap(), vec![-1 << 40, 3]);
        assert_eq!(s.f64().unwrap(), 0.1);
        assert_eq!(s.str().unwrap(), "héllo");
        let n = s.count(4).unwrap();
        assert_eq!(s.u32_vec(n).unwrap(), vec![1, 2]);
        assert!(s.remaining() == 0 && r.remaining() == 0);
    }

    #[test]
    fn truncated_input_is_an_error() {
        let mut r = Reader::new(&[1, 2]);
        assert!(r.u32().is_err());
        let mut r = Reader::new(&[255, 255, 255, 255, 255, 255, 255, 255]);
        assert!(r.count(4).is_err());
    }
}
