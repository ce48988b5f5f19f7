//! Untrusted storage: public keys, ciphertext blobs, searchable metadata and
//! opaque mailboxes. Nothing stored here is key material.

mod protocol;
mod server;
mod store;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use protocol::{Opcode, Status};
pub use server::{serve_blocking, RemoteRepo, RepoServer};
pub use store::{Limits, RepoStore};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RepoError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("epoch conflict: expected {expected}, stored {stored}")]
    Conflict { expected: u32, stored: u32 },
    #[error("stale epoch {given}, stored {stored}")]
    StaleEpoch { given: u32, stored: u32 },
    #[error("quota exceeded: {0}")]
    QuotaExceeded(String),
    #[error("payload of {len} bytes exceeds limit {limit}")]
    Oversize { len: usize, limit: usize },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for RepoError {
    fn from(e: std::io::Error) -> Self {
        RepoError::Io(e.to_string())
    }
}

/// Lowercase hex SHA-256 of a blob.
pub fn blob_ref(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceRecord {
    pub owner_id: String,
    pub resource_name: String,
    pub content_type: String,
    pub version: u64,
    pub epoch: u32,
    pub permanent_blob_ref: String,
    pub revocable_blob_refs: Vec<String>,
}

fn escape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for c in v.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(v: &str) -> Result<String, RepoError> {
    let mut out = String::with_capacity(v.len());
    let mut it = v.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            _ => return Err(RepoError::Invalid("bad escape in text map".into())),
        }
    }
    Ok(out)
}

/// `key=value` lines sorted by key.
pub fn to_text_map(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        let _ = writeln!(out, "{}={}", escape(k), escape(v));
    }
    out
}

pub fn from_text_map(text: &str) -> Result<BTreeMap<String, String>, RepoError> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| RepoError::Invalid(format!("text map line without '=': {line:?}")))?;
        if map.insert(unescape(k)?, unescape(v)?).is_some() {
            return Err(RepoError::Invalid(format!("duplicate key {k}")));
        }
    }
    Ok(map)
}

impl ResourceRecord {
    /// A record to hand to `put_resource`; version and refs are filled in by the store.
    pub fn draft(owner_id: &str, resource_name: &str, content_type: &str, epoch: u32) -> Self {
        ResourceRecord {
            owner_id: owner_id.into(),
            resource_name: resource_name.into(),
            content_type: content_type.into(),
            version: 0,
            epoch,
            permanent_blob_ref: String::new(),
            revocable_blob_refs: Vec::new(),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("content_type".into(), self.content_type.clone()),
            ("epoch".into(), self.epoch.to_string()),
            ("owner_id".into(), self.owner_id.clone()),
            ("permanent_blob_ref".into(), self.permanent_blob_ref.clone()),
            ("resource_name".into(), self.resource_name.clone()),
            (
                "revocable_blob_refs".into(),
                self.revocable_blob_refs.join(","),
            ),
            ("version".into(), self.version.to_string()),
        ])
    }

    pub fn to_text(&self) -> String {
        to_text_map(&self.to_map())
    }

    pub fn from_text(text: &str) -> Result<Self, RepoError> {
        let mut map = from_text_map(text)?;
        let mut take = |k: &str| {
            map.remove(k)
                .ok_or_else(|| RepoError::Invalid(format!("record is missing {k}")))
        };
        let num = |v: String| {
            v.parse::<u64>()
                .map_err(|_| RepoError::Invalid(format!("bad number {v:?}")))
        };
        let refs = take("revocable_blob_refs")?;
        let record = ResourceRecord {
            content_type: take("content_type")?,
            epoch: u32::try_from(num(take("epoch")?)?)
                .map_err(|_| RepoError::Invalid("epoch".into()))?,
            owner_id: take("owner_id")?,
            permanent_blob_ref: take("permanent_blob_ref")?,
            resource_name: take("resource_name")?,
            revocable_blob_refs: if refs.is_empty() {
                Vec::new()
            } else {
                refs.split(',').map(str::to_string).collect()
            },
            version: num(take("version")?)?,
        };
        if let Some(k) = map.keys().next() {
            return Err(RepoError::Invalid(format!("unknown record key {k}")));
        }
        Ok(record)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ResourceBlobs {
    pub permanent: Vec<u8>,
    pub revocable: Vec<Vec<u8>>,
}

impl ResourceBlobs {
    pub fn total_len(&self) -> usize {
        self.permanent.len() + self.revocable.iter().map(Vec::len).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MailboxEntry {
    pub recipient_id: String,
    pub seq: u64,
    pub payload: Vec<u8>,
}

/// Replacement revocable blobs per resource name.
pub type Replacements = BTreeMap<String, Vec<Vec<u8>>>;

pub trait Repository: Send + Sync {
    /// Rejects an epoch lower than the stored one.
    fn put_public_key(&self, owner: &str, pk: &[u8], epoch: u32) -> Result<(), RepoError>;

    fn get_public_key(&self, owner: &str) -> Result<(Vec<u8>, u32), RepoError>;

    /// Stores a new version. The record's epoch must equal the owner's
    /// current epoch. Returns the record as stored.
    fn put_resource(
        &self,
        record: &ResourceRecord,
        blobs: &ResourceBlobs,
    ) -> Result<ResourceRecord, RepoError>;

    fn get_resource(
        &self,
        owner: &str,
        name: &str,
    ) -> Result<(ResourceRecord, ResourceBlobs), RepoError>;

    fn list_resources(&self, owner: &str) -> Result<Vec<ResourceRecord>, RepoError>;

    /// Atomically installs `new_pk` and replaces the revocable blobs of every
    /// listed resource, moving the owner from `expected_epoch` to the next.
    fn swap_revocable(
        &self,
        owner: &str,
        expected_epoch: u32,
        replacements: &Replacements,
        new_pk: &[u8],
    ) -> Result<u32, RepoError>;

    fn mailbox_post(&self, recipient: &str, payload: &[u8]) -> Result<u64, RepoError>;

    /// Deletes entries up to and including `ack_through`, then returns what
    /// remains in FIFO order.
    fn mailbox_fetch(
        &self,
        recipient: &str,
        ack_through: Option<u64>,
    ) -> Result<Vec<MailboxEntry>, RepoError>;
}

impl<T: Repository + ?Sized> Repository for Arc<T> {
    fn put_public_key(&self, owner: &str, pk: &[u8], epoch: u32) -> Result<(), RepoError> {
        (**self).put_public_key(owner, pk, epoch)
    }
    fn get_public_key(&self, owner: &str) -> Result<(Vec<u8>, u32), RepoError> {
        (**self).get_public_key(owner)
    }
    fn put_resource(
        &self,
        record: &ResourceRecord,
        blobs: &ResourceBlobs,
    ) -> Result<ResourceRecord, RepoError> {
        (**self).put_resource(record, blobs)
    }
    fn get_resource(
        &self,
        owner: &str,
        name: &str,
    ) -> Result<(ResourceRecord, ResourceBlobs), RepoError> {
        (**self).get_resource(owner, name)
    }
    fn list_resources(&self, owner: &str) -> Result<Vec<ResourceRecord>, RepoError> {
        (**self).list_resources(owner)
    }
    fn swap_revocable(
        &self,
        owner: &str,
        expected_epoch: u32,
        replacements: &Replacements,
        new_pk: &[u8],
    ) -> Result<u32, RepoError> {
        (**self).swap_revocable(owner, expected_epoch, replacements, new_pk)
    }
    fn mailbox_post(&self, recipient: &str, payload: &[u8]) -> Result<u64, RepoError> {
        (**self).mailbox_post(recipient, payload)
    }
    fn mailbox_fetch(
        &self,
        recipient: &str,
        ack_through: Option<u64>,
    ) -> Result<Vec<MailboxEntry>, RepoError> {
        (**self).mailbox_fetch(recipient, ack_through)
    }
}

/// Forwards to another repository and records which operations were called.
pub struct RecordingRepo {
    inner: Arc<dyn Repository>,
    calls: Mutex<Vec<Opcode>>,
}

impl RecordingRepo {
    pub fn new(inner: Arc<dyn Repository>) -> Self {
        RecordingRepo {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<Opcode> {
        self.calls.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.calls.lock().unwrap().clear();
    }

    fn note(&self, op: Opcode) {
        self.calls.lock().unwrap().push(op);
    }
}

impl Repository for RecordingRepo {
    fn put_public_key(&self, owner: &str, pk: &[u8], epoch: u32) -> Result<(), RepoError> {
        self.note(Opcode::PutPublicKey);
        self.inner.put_public_key(owner, pk, epoch)
    }
    fn get_public_key(&self, owner: &str) -> Result<(Vec<u8>, u32), RepoError> {
        self.note(Opcode::GetPublicKey);
        self.inner.get_public_key(owner)
    }
    fn put_resource(
        &self,
        record: &ResourceRecord,
        blobs: &ResourceBlobs,
    ) -> Result<ResourceRecord, RepoError> {
        self.note(Opcode::PutResource);
        self.inner.put_resource(record, blobs)
    }
    fn get_resource(
        &self,
        owner: &str,
        name: &str,
    ) -> Result<(ResourceRecord, ResourceBlobs), RepoError> {
        self.note(Opcode::GetResource);
        self.inner.get_resource(owner, name)
    }
    fn list_resources(&self, owner: &str) -> Result<Vec<ResourceRecord>, RepoError> {
        self.note(Opcode::ListResources);
        self.inner.list_resources(owner)
    }
    fn swap_revocable(
        &self,
        owner: &str,
        expected_epoch: u32,
        replacements: &Replacements,
        new_pk: &[u8],
    ) -> Result<u32, RepoError> {
        self.note(Opcode::SwapRevocable);
        self.inner
            .swap_revocable(owner, expected_epoch, replacements, new_pk)
    }
    fn mailbox_post(&self, recipient: &str, payload: &[u8]) -> Result<u64, RepoError> {
        self.note(Opcode::MailboxPost);
        self.inner.mailbox_post(recipient, payload)
    }
    fn mailbox_fetch(
        &self,
        recipient: &str,
        ack_through: Option<u64>,
    ) -> Result<Vec<MailboxEntry>, RepoError> {
        self.note(Opcode::MailboxFetch);
        self.inner.mailbox_fetch(recipient, ack_through)
    }
}

impl Opcode {
    /// True for operations that never modify repository state.
    pub fn is_read(self) -> bool {
        matches!(
            self,
            Opcode::GetPublicKey | Opcode::GetResource | Opcode::ListResources
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ResourceRecord {
        ResourceRecord {
            owner_id: "alice".into(),
            resource_name: "ann\nwith=odd\\chars".into(),
            content_type: "text/plain".into(),
            version: 3,
            epoch: 2,
            permanent_blob_ref: blob_ref(b"p"),
            revocable_blob_refs: vec![blob_ref(b"a"), blob_ref(b"b")],
        }
    }

    #[test]
    fn record_text_is_sorted_and_round_trips() {
        let r = sample();
        let text = r.to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(ResourceRecord::from_text(&text).unwrap(), r);
        let empty = ResourceRecord::draft("a", "b", "c", 0);
        assert_eq!(ResourceRecord::from_text(&empty.to_text()).unwrap(), empty);
        assert!(ResourceRecord::from_text("epoch=1\n").is_err());
    }

    #[test]
    fn blob_refs_are_sha256_hex() {
        assert_eq!(
            blob_ref(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    proptest! {
        #[test]
        fn text_maps_round_trip(map in proptest::collection::btree_map("[^=\\n]{0,8}", "\\PC{0,12}", 0..6)) {
            let text = to_text_map(&map);
            prop_assert_eq!(from_text_map(&text).unwrap(), map);
        }
    }
}
