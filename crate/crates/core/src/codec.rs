//! Big-endian, length-prefixed binary encoding shared by every wire and
//! storage format in the crate.

use thiserror::Error;

use crate::cid::{Cid, CID_BINARY_LEN};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("input truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            buf: Vec::with_capacity(n),
        }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    /// Raw bytes, no prefix.
    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    /// `u32` length then bytes.
    pub fn blob(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.bytes(v);
    }

    /// `u16` length then UTF-8 bytes. Panics past 65535 bytes; callers
    /// validate lengths first.
    pub fn short_str(&mut self, s: &str) {
        self.u16(u16::try_from(s.len()).expect("short string over 65535 bytes"));
        self.bytes(s.as_bytes());
    }

    pub fn cid(&mut self, cid: &Cid) {
        self.bytes(&cid.to_binary());
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::Truncated {
                needed: n - self.buf.len(),
            });
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        self.array().map(u16::from_be_bytes)
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        self.array().map(u32::from_be_bytes)
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        self.array().map(u64::from_be_bytes)
    }

    pub fn blob(&mut self) -> Result<&'a [u8], DecodeError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn short_str(&mut self) -> Result<String, DecodeError> {
        let n = self.u16()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DecodeError::Invalid("string is not UTF-8".into()))
    }

    pub fn cid(&mut self) -> Result<Cid, DecodeError> {
        Cid::from_binary(self.take(CID_BINARY_LEN)?).map_err(|e| DecodeError::Invalid(e.to_string()))
    }

    /// A `u32` element count, sanity-checked against the bytes left so a
    /// hostile count cannot trigger a huge allocation.
    pub fn count(&mut self, min_element_len: usize) -> Result<usize, DecodeError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_element_len.max(1)) > self.buf.len() {
            return Err(DecodeError::Truncated {
                needed: n * min_element_len.max(1) - self.buf.len(),
            });
        }
        Ok(n)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(DecodeError::Trailing(self.buf.len()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_big_endian() {
        let mut w = Writer::default();
        w.u16(0x0102);
        w.u32(0x03040506);
        w.u64(7);
        w.short_str("hi");
        w.blob(b"xyz");
        let bytes = w.into_inner();
        assert_eq!(
            bytes,
            [1, 2, 3, 4, 5, 6, 0, 0, 0, 0, 0, 0, 0, 7, 0, 2, b'h', b'i', 0, 0, 0, 3, b'x', b'y', b'z']
        );
        let mut r = Reader::new(&bytes);
        assert_eq!(r.u16().unwrap(), 0x0102);
        assert_eq!(r.u32().unwrap(), 0x03040506);
        assert_eq!(r.u64().unwrap(), 7);
        assert_eq!(r.short_str().unwrap(), "hi");
        assert_eq!(r.blob().unwrap(), b"xyz");
        r.finish().unwrap();
    }

    #[test]
    fn truncation_and_trailing() {
        assert_eq!(Reader::new(&[0, 0]).u32(), Err(DecodeError::Truncated { needed: 2 }));
        let mut r = Reader::new(&[0, 0, 0, 9, 1]);
        assert!(r.blob().is_err());
        assert_eq!(Reader::new(&[1]).finish(), Err(DecodeError::Trailing(1)));
        assert!(Reader::new(&[0xff, 0xff, 0xff, 0xff]).count(1).is_err());
    }
}
