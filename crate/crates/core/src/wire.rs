//! Envelope encoding shared by every serialized object.
//!
//! Layout: `"DBRA" | version 0x01 | type tag | epoch (u32 BE) | fields`, where
//! each field is a 16-bit big-endian length followed by that many bytes.

use thiserror::Error;

use crate::group::{GroupError, Scalar, Slot, SourceElement, TargetElement, NONCE_LEN};

pub const MAGIC: &[u8; 4] = b"DBRA";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 10;

/// Envelope type tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Tag {
    PublicRecord = 0x01,
    HibePublicKey = 0x02,
    HibeKey = 0x03,
    HibeHeader = 0x04,
    HvePublicKey = 0x05,
    HveKey = 0x06,
    HveHeader = 0x07,
    Ciphertext = 0x08,
    DbraKey = 0x09,
    KeyMessage = 0x0A,
    DbraMasterKey = 0x0B,
    DbraPublicKey = 0x0C,
    SealedMail = 0x0D,
    HveMasterKey = 0x0E,
    HibeMasterKey = 0x0F,
    Permanent = 0x10,
}

impl Tag {
    pub fn from_u8(b: u8) -> Option<Tag> {
        use Tag::*;
        Some(match b {
            0x01 => PublicRecord,
            0x02 => HibePublicKey,
            0x03 => HibeKey,
            0x04 => HibeHeader,
            0x05 => HvePublicKey,
            0x06 => HveKey,
            0x07 => HveHeader,
            0x08 => Ciphertext,
            0x09 => DbraKey,
            0x0A => KeyMessage,
            0x0B => DbraMasterKey,
            0x0C => DbraPublicKey,
            0x0D => SealedMail,
            0x0E => HveMasterKey,
            0x0F => HibeMasterKey,
            0x10 => Permanent,
            _ => return None,
        })
    }

    /// Tags whose payload is secret key material.
    pub fn is_secret(self) -> bool {
        matches!(
            self,
            Tag::HibeKey
                | Tag::HveKey
                | Tag::DbraKey
                | Tag::KeyMessage
                | Tag::DbraMasterKey
                | Tag::HveMasterKey
                | Tag::HibeMasterKey
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic or version")]
    BadHeader,
    #[error("unexpected type tag {found:#04x}, wanted {wanted:#04x}")]
    WrongTag { found: u8, wanted: u8 },
    #[error("truncated input")]
    Truncated,
    #[error("trailing bytes after last field")]
    Trailing,
    #[error("field of {0} bytes exceeds the 16-bit length prefix")]
    FieldTooLong(usize),
    #[error("malformed field: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Group(#[from] GroupError),
}

/// Reads the tag and epoch of an envelope without consuming its fields.
pub fn peek(bytes: &[u8]) -> Result<(Tag, u32), WireError> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC || bytes[4] != VERSION {
        return Err(WireError::BadHeader);
    }
    let tag = Tag::from_u8(bytes[5]).ok_or(WireError::BadHeader)?;
    let epoch = u32::from_be_bytes(bytes[6..10].try_into().unwrap());
    Ok((tag, epoch))
}

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(tag: Tag, epoch: u32) -> Self {
        let mut buf = Vec::with_capacity(256);
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.push(tag as u8);
        buf.extend_from_slice(&epoch.to_be_bytes());
        Writer { buf }
    }

    pub fn bytes(&mut self, field: &[u8]) -> Result<&mut Self, WireError> {
        let len = u16::try_from(field.len()).map_err(|_| WireError::FieldTooLong(field.len()))?;
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(field);
        Ok(self)
    }

    pub fn u16(&mut self, v: u16) -> Result<&mut Self, WireError> {
        self.bytes(&v.to_be_bytes())
    }

    pub fn u32(&mut self, v: u32) -> Result<&mut Self, WireError> {
        self.bytes(&v.to_be_bytes())
    }

    pub fn source(&mut self, e: &SourceElement) -> Result<&mut Self, WireError> {
        self.bytes(&e.to_bytes())
    }

    pub fn target(&mut self, e: &TargetElement) -> Result<&mut Self, WireError> {
        self.bytes(&e.to_bytes())
    }

    pub fn scalar(&mut self, s: &Scalar) -> Result<&mut Self, WireError> {
        self.bytes(&s.to_bytes())
    }

    /// Appends unprefixed bytes running to the end of the envelope.
    pub fn tail(&mut self, rest: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(rest);
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

pub struct Reader<'a> {
    pub epoch: u32,
    rest: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn open(bytes: &'a [u8], tag: Tag) -> Result<Self, WireError> {
        let (found, epoch) = peek(bytes)?;
        if found != tag {
            return Err(WireError::WrongTag {
                found: found as u8,
                wanted: tag as u8,
            });
        }
        Ok(Reader {
            epoch,
            rest: &bytes[HEADER_LEN..],
        })
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        if self.rest.len() < 2 {
            return Err(WireError::Truncated);
        }
        let len = u16::from_be_bytes([self.rest[0], self.rest[1]]) as usize;
        if self.rest.len() < 2 + len {
            return Err(WireError::Truncated);
        }
        let field = &self.rest[2..2 + len];
        self.rest = &self.rest[2 + len..];
        Ok(field)
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.bytes()?;
        Ok(u16::from_be_bytes(
            b.try_into().map_err(|_| WireError::Malformed("u16"))?,
        ))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.bytes()?;
        Ok(u32::from_be_bytes(
            b.try_into().map_err(|_| WireError::Malformed("u32"))?,
        ))
    }

    pub fn source(&mut self, slot: Slot) -> Result<SourceElement, WireError> {
        Ok(SourceElement::from_bytes_with(self.bytes()?, slot)?)
    }

    pub fn target(&mut self) -> Result<TargetElement, WireError> {
        Ok(TargetElement::from_bytes(self.bytes()?)?)
    }

    pub fn scalar(&mut self) -> Result<Scalar, WireError> {
        Ok(Scalar::from_bytes(self.bytes()?)?)
    }

    pub fn nonce(&mut self) -> Result<[u8; NONCE_LEN], WireError> {
        self.bytes()?
            .try_into()
            .map_err(|_| WireError::Malformed("nonce"))
    }

    /// Everything after the last prefixed field.
    pub fn tail(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.rest)
    }

    pub fn is_empty(&self) -> bool {
        self.rest.is_empty()
    }

    pub fn finish(self) -> Result<(), WireError> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(WireError::Trailing)
        }
    }
}

/// Length-prefixed list of UTF-8 strings packed into one field.
pub fn encode_strings(items: &[String]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    let n = u16::try_from(items.len()).map_err(|_| WireError::FieldTooLong(items.len()))?;
    out.extend_from_slice(&n.to_be_bytes());
    for s in items {
        let len = u16::try_from(s.len()).map_err(|_| WireError::FieldTooLong(s.len()))?;
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    Ok(out)
}

pub fn decode_strings(mut b: &[u8]) -> Result<Vec<String>, WireError> {
    let take = |b: &mut &[u8], n: usize| -> Result<Vec<u8>, WireError> {
        if b.len() < n {
            return Err(WireError::Truncated);
        }
        let (h, t) = b.split_at(n);
        *b = t;
        Ok(h.to_vec())
    };
    let n = u16::from_be_bytes(take(&mut b, 2)?.try_into().unwrap()) as usize;
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u16::from_be_bytes(take(&mut b, 2)?.try_into().unwrap()) as usize;
        let s = String::from_utf8(take(&mut b, len)?).map_err(|_| WireError::Malformed("utf-8"))?;
        items.push(s);
    }
    if !b.is_empty() {
        return Err(WireError::Trailing);
    }
    Ok(items)
}
