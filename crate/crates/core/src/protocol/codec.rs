//! Canonical binary codec shared by every wire type.
//!
//! Top-level encodings start with [`WIRE_VERSION`]; nested values are written
//! without it. Integers are big-endian, variable-length fields carry a `u32`
//! length prefix, and decoding must consume the input exactly.

use crate::crypto::sign::SIGNATURE_LEN;
use crate::crypto::{GroupElement, Signature, Tag};

pub const WIRE_VERSION: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
    #[error("unsupported wire version {0:#04x}")]
    VersionUnsupported(u8),
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn versioned() -> Self {
        let mut w = Self::new();
        w.u8(WIRE_VERSION);
        w
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    /// `u32` length prefix followed by the bytes.
    pub fn var(&mut self, bytes: &[u8]) -> &mut Self {
        self.u32(u32::try_from(bytes.len()).expect("field under 4 GiB"));
        self.raw(bytes)
    }

    pub fn element(&mut self, g: &GroupElement) -> &mut Self {
        self.raw(g.as_bytes())
    }

    pub fn tag(&mut self, t: &Tag) -> &mut Self {
        self.raw(&t.0)
    }

    pub fn sig(&mut self, s: &Signature) -> &mut Self {
        self.raw(&s.0)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    /// Checks and strips the version prefix.
    pub fn versioned(buf: &'a [u8]) -> Result<Self, WireError> {
        let mut r = Self::new(buf);
        match r.u8()? {
            WIRE_VERSION => Ok(r),
            v => Err(WireError::VersionUnsupported(v)),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Malformed("truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn var(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn element(&mut self) -> Result<GroupElement, WireError> {
        GroupElement::from_public_bytes(&self.array()?)
            .map_err(|_| WireError::Malformed("invalid group element"))
    }

    pub fn tag(&mut self) -> Result<Tag, WireError> {
        Ok(Tag(self.array()?))
    }

    pub fn sig(&mut self) -> Result<Signature, WireError> {
        Ok(Signature(self.array::<SIGNATURE_LEN>()?))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::Malformed("trailing bytes"))
        }
    }
}

/// A type with a canonical, versioned binary encoding.
pub trait Wire: Sized {
    fn write_body(&self, w: &mut Writer);
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError>;

    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::versioned();
        self.write_body(&mut w);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::versioned(bytes)?;
        let v = Self::read_body(&mut r)?;
        r.finish()?;
        Ok(v)
    }
}

/// Implements serde for a [`Wire`] type by (de)serializing its canonical
/// encoding as a byte string.
#[macro_export]
macro_rules! serde_via_wire {
    ($($t:ty),* $(,)?) => {$(
        impl serde::Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_bytes(&$crate::protocol::codec::Wire::encode(self))
            }
        }
        impl<'de> serde::Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let bytes: Vec<u8> = serde::Deserialize::deserialize(d)?;
                <$t as $crate::protocol::codec::Wire>::decode(&bytes).map_err(serde::de::Error::custom)
            }
        }
    )*};
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reader_rejects_truncation_and_trailing() {
        let mut w = Writer::versioned();
        w.u32(7).var(b"abc");
        let bytes = w.finish();
        let mut r = Reader::versioned(&bytes).unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.var().unwrap(), b"abc");
        r.finish().unwrap();

        let mut r = Reader::versioned(&bytes[..bytes.len() - 1]).unwrap();
        r.u32().unwrap();
        assert!(matches!(r.var(), Err(WireError::Malformed(_))));

        let mut extra = bytes.clone();
        extra.push(0);
        let mut r = Reader::versioned(&extra).unwrap();
        r.u32().unwrap();
        r.var().unwrap();
        assert!(r.finish().is_err());
    }

    #[test]
    fn version_checked() {
        assert_eq!(
            Reader::versioned(&[0x02, 0]).err(),
            Some(WireError::VersionUnsupported(2))
        );
        assert!(Reader::versioned(&[]).is_err());
    }
}
