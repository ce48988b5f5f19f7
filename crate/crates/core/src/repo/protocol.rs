//! Request/response framing for the repository socket.
//!
//! Frame: `code (u8) | payload length (u32 BE) | payload`. A payload is a
//! sequence of fields, each a u32 BE length followed by bytes.

use std::io::{Read, Write};

use super::{MailboxEntry, Replacements, RepoError, ResourceBlobs, ResourceRecord};

pub const MAX_FRAME: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    PutPublicKey = 0x01,
    GetPublicKey = 0x02,
    PutResource = 0x03,
    GetResource = 0x04,
    ListResources = 0x05,
    SwapRevocable = 0x06,
    MailboxPost = 0x07,
    MailboxFetch = 0x08,
}

impl Opcode {
    pub fn from_u8(b: u8) -> Option<Self> {
        use Opcode::*;
        Some(match b {
            0x01 => PutPublicKey,
            0x02 => GetPublicKey,
            0x03 => PutResource,
            0x04 => GetResource,
            0x05 => ListResources,
            0x06 => SwapRevocable,
            0x07 => MailboxPost,
            0x08 => MailboxFetch,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0x00,
    NotFound = 0x01,
    Conflict = 0x02,
    Error = 0x03,
}

pub fn write_frame<W: Write>(w: &mut W, code: u8, payload: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(payload.len()).map_err(|_| std::io::Error::other("frame too large"))?;
    let mut head = [0u8; 5];
    head[0] = code;
    head[1..].copy_from_slice(&len.to_be_bytes());
    w.write_all(&head)?;
    w.write_all(payload)?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> std::io::Result<Option<(u8, Vec<u8>)>> {
    let mut head = [0u8; 5];
    match r.read_exact(&mut head) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(head[1..].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(std::io::Error::other("frame too large"));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some((head[0], payload)))
}

#[derive(Default)]
pub struct Fields(Vec<u8>);

impl Fields {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, b: &[u8]) -> &mut Self {
        self.0.extend_from_slice(&(b.len() as u32).to_be_bytes());
        self.0.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.put(s.as_bytes())
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.put(&v.to_be_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.put(&v.to_be_bytes())
    }

    pub fn list(&mut self, items: &[Vec<u8>]) -> &mut Self {
        self.u32(items.len() as u32);
        for i in items {
            self.put(i);
        }
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.0)
    }
}

pub struct Cursor<'a>(&'a [u8]);

fn bad(what: &str) -> RepoError {
    RepoError::Invalid(format!("malformed {what}"))
}

impl<'a> Cursor<'a> {
    pub fn new(b: &'a [u8]) -> Self {
        Cursor(b)
    }

    pub fn get(&mut self) -> Result<&'a [u8], RepoError> {
        if self.0.len() < 4 {
            return Err(bad("field length"));
        }
        let len = u32::from_be_bytes(self.0[..4].try_into().unwrap()) as usize;
        let rest = &self.0[4..];
        if rest.len() < len {
            return Err(bad("field"));
        }
        self.0 = &rest[len..];
        Ok(&rest[..len])
    }

    pub fn str(&mut self) -> Result<String, RepoError> {
        String::from_utf8(self.get()?.to_vec()).map_err(|_| bad("string"))
    }

    pub fn u32(&mut self) -> Result<u32, RepoError> {
        Ok(u32::from_be_bytes(
            self.get()?.try_into().map_err(|_| bad("u32"))?,
        ))
    }

    pub fn u64(&mut self) -> Result<u64, RepoError> {
        Ok(u64::from_be_bytes(
            self.get()?.try_into().map_err(|_| bad("u64"))?,
        ))
    }

    pub fn list(&mut self) -> Result<Vec<Vec<u8>>, RepoError> {
        let n = self.u32()? as usize;
        if n > self.0.len() / 4 {
            return Err(bad("list"));
        }
        (0..n).map(|_| self.get().map(<[u8]>::to_vec)).collect()
    }

    pub fn finish(self) -> Result<(), RepoError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(bad("trailing bytes"))
        }
    }
}

pub fn encode_blobs(f: &mut Fields, b: &ResourceBlobs) {
    f.put(&b.permanent).list(&b.revocable);
}

pub fn decode_blobs(c: &mut Cursor<'_>) -> Result<ResourceBlobs, RepoError> {
    Ok(ResourceBlobs {
        permanent: c.get()?.to_vec(),
        revocable: c.list()?,
    })
}

pub fn decode_record(c: &mut Cursor<'_>) -> Result<ResourceRecord, RepoError> {
    ResourceRecord::from_text(&c.str()?)
}

pub fn encode_replacements(f: &mut Fields, r: &Replacements) {
    f.u32(r.len() as u32);
    for (name, blobs) in r {
        f.str(name).list(blobs);
    }
}

pub fn decode_replacements(c: &mut Cursor<'_>) -> Result<Replacements, RepoError> {
    let n = c.u32()?;
    let mut out = Replacements::new();
    for _ in 0..n {
        let name = c.str()?;
        out.insert(name, c.list()?);
    }
    Ok(out)
}

pub fn encode_entries(f: &mut Fields, entries: &[MailboxEntry]) {
    f.u32(entries.len() as u32);
    for e in entries {
        f.str(&e.recipient_id).u64(e.seq).put(&e.payload);
    }
}

pub fn decode_entries(c: &mut Cursor<'_>) -> Result<Vec<MailboxEntry>, RepoError> {
    let n = c.u32()?;
    (0..n)
        .map(|_| {
            Ok(MailboxEntry {
                recipient_id: c.str()?,
                seq: c.u64()?,
                payload: c.get()?.to_vec(),
            })
        })
        .collect()
}

/// Error kinds carried in non-ok responses.
pub fn encode_error(e: &RepoError) -> (Status, Vec<u8>) {
    let mut f = Fields::new();
    let status = match e {
        RepoError::NotFound(m) => {
            f.u32(0).str(m);
            Status::NotFound
        }
        RepoError::Conflict { expected, stored } => {
            f.u32(1).u32(*expected).u32(*stored);
            Status::Conflict
        }
        RepoError::StaleEpoch { given, stored } => {
            f.u32(2).u32(*given).u32(*stored);
            Status::Conflict
        }
        RepoError::QuotaExceeded(m) => {
            f.u32(3).str(m);
            Status::Error
        }
        RepoError::Oversize { len, limit } => {
            f.u32(4).u64(*len as u64).u64(*limit as u64);
            Status::Error
        }
        RepoError::Invalid(m) => {
            f.u32(5).str(m);
            Status::Error
        }
        RepoError::Io(m) => {
            f.u32(6).str(m);
            Status::Error
        }
    };
    (status, f.finish())
}

pub fn decode_error(payload: &[u8]) -> RepoError {
    let mut c = Cursor::new(payload);
    let parsed = (|| -> Result<RepoError, RepoError> {
        Ok(match c.u32()? {
            0 => RepoError::NotFound(c.str()?),
            1 => RepoError::Conflict {
                expected: c.u32()?,
                stored: c.u32()?,
            },
            2 => RepoError::StaleEpoch {
                given: c.u32()?,
                stored: c.u32()?,
            },
            3 => RepoError::QuotaExceeded(c.str()?),
            4 => RepoError::Oversize {
                len: c.u64()? as usize,
                limit: c.u64()? as usize,
            },
            5 => RepoError::Invalid(c.str()?),
            6 => RepoError::Io(c.str()?),
            k => RepoError::Io(format!("unknown error kind {k}")),
        })
    })();
    parsed.unwrap_or_else(|e| e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, 0x04, b"abc").unwrap();
        assert_eq!(buf, [0x04, 0, 0, 0, 3, b'a', b'b', b'c']);
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r).unwrap(), Some((0x04, b"abc".to_vec())));
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    #[test]
    fn errors_round_trip() {
        for e in [
            RepoError::NotFound("x".into()),
            RepoError::Conflict {
                expected: 1,
                stored: 2,
            },
            RepoError::StaleEpoch {
                given: 0,
                stored: 3,
            },
            RepoError::QuotaExceeded("q".into()),
            RepoError::Oversize { len: 9, limit: 8 },
            RepoError::Invalid("i".into()),
            RepoError::Io("io".into()),
        ] {
            let (_, payload) = encode_error(&e);
            assert_eq!(decode_error(&payload), e);
        }
        assert_eq!(
            encode_error(&RepoError::NotFound("x".into())).0,
            Status::NotFound
        );
        assert_eq!(
            encode_error(&RepoError::Conflict {
                expected: 0,
                stored: 1
            })
            .0,
            Status::Conflict
        );
    }

    #[test]
    fn lists_reject_absurd_counts() {
        let mut f = Fields::new();
        f.u32(1_000_000);
        let bytes = f.finish();
        assert!(Cursor::new(&bytes).list().is_err());
    }
}
