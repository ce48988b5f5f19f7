//! Reference repository: in-memory state behind one lock, optionally mirrored
//! to a directory (`manifest.json` plus content-addressed `blobs/`).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::{
    blob_ref, MailboxEntry, Replacements, RepoError, Repository, ResourceBlobs, ResourceRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_resources_per_owner: usize,
    pub max_bytes_per_owner: usize,
    pub max_mail_payload: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_resources_per_owner: 100_000,
            max_bytes_per_owner: 1 << 34,
            max_mail_payload: 1 << 20,
        }
    }
}

#[derive(Debug, Clone)]
struct StoredResource {
    record: ResourceRecord,
    permanent: Arc<Vec<u8>>,
    revocable: Vec<Arc<Vec<u8>>>,
}

impl StoredResource {
    fn bytes(&self) -> usize {
        self.permanent.len() + self.revocable.iter().map(|b| b.len()).sum::<usize>()
    }
}

#[derive(Debug, Clone)]
struct OwnerState {
    pk: Arc<Vec<u8>>,
    epoch: u32,
    resources: BTreeMap<String, StoredResource>,
}

#[derive(Debug, Default)]
struct State {
    owners: BTreeMap<String, OwnerState>,
    mailboxes: BTreeMap<String, VecDeque<MailboxEntry>>,
    next_seq: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    owners: BTreeMap<String, OwnerManifest>,
    mailboxes: BTreeMap<String, Vec<(u64, String)>>,
    next_seq: u64,
}

#[derive(Serialize, Deserialize)]
struct OwnerManifest {
    pk: String,
    epoch: u32,
    records: Vec<String>,
}

pub struct RepoStore {
    state: RwLock<State>,
    dir: Option<PathBuf>,
    limits: Limits,
}

impl RepoStore {
    pub fn in_memory() -> Self {
        Self::with_limits(Limits::default())
    }

    pub fn with_limits(limits: Limits) -> Self {
        RepoStore {
            state: RwLock::new(State::default()),
            dir: None,
            limits,
        }
    }

    /// Opens (or creates) a store persisted under `dir`.
    pub fn open(dir: &Path, limits: Limits) -> Result<Self, RepoError> {
        fs::create_dir_all(dir.join("blobs"))?;
        let manifest_path = dir.join("manifest.json");
        let state = if manifest_path.exists() {
            load(dir, &fs::read(&manifest_path)?)?
        } else {
            State::default()
        };
        Ok(RepoStore {
            state: RwLock::new(state),
            dir: Some(dir.to_path_buf()),
            limits,
        })
    }

    pub fn limits(&self) -> Limits {
        self.limits
    }

    /// Every byte stream held by the store: public keys, blobs, mail payloads.
    pub fn stored_streams(&self) -> Vec<Vec<u8>> {
        let st = self.state.read().unwrap();
        let mut out = Vec::new();
        for o in st.owners.values() {
            out.push(o.pk.to_vec());
            for r in o.resources.values() {
                out.push(r.permanent.to_vec());
                out.extend(r.revocable.iter().map(|b| b.to_vec()));
            }
        }
        for q in st.mailboxes.values() {
            out.extend(q.iter().map(|e| e.payload.clone()));
        }
        out
    }

    /// Current epoch of every owner.
    pub fn epochs(&self) -> BTreeMap<String, u32> {
        let st = self.state.read().unwrap();
        st.owners
            .iter()
            .map(|(k, o)| (k.clone(), o.epoch))
            .collect()
    }

    fn persist(&self, st: &State) -> Result<(), RepoError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let blobs = dir.join("blobs");
        let mut live = BTreeSet::new();
        let mut write_blob = |bytes: &[u8]| -> Result<String, RepoError> {
            let r = blob_ref(bytes);
            let path = blobs.join(&r);
            if !path.exists() {
                write_atomic(&path, bytes)?;
            }
            live.insert(r.clone());
            Ok(r)
        };
        let mut owners = BTreeMap::new();
        for (id, o) in &st.owners {
            let pk = write_blob(&o.pk)?;
            let mut records = Vec::new();
            for r in o.resources.values() {
                write_blob(&r.permanent)?;
                for b in &r.revocable {
                    write_blob(b)?;
                }
                records.push(r.record.to_text());
            }
            owners.insert(
                id.clone(),
                OwnerManifest {
                    pk,
                    epoch: o.epoch,
                    records,
                },
            );
        }
        let manifest = Manifest {
            owners,
            mailboxes: st
                .mailboxes
                .iter()
                .map(|(k, q)| {
                    (
                        k.clone(),
                        q.iter().map(|e| (e.seq, hex::encode(&e.payload))).collect(),
                    )
                })
                .collect(),
            next_seq: st.next_seq,
        };
        let json =
            serde_json::to_vec_pretty(&manifest).map_err(|e| RepoError::Io(e.to_string()))?;
        write_atomic(&dir.join("manifest.json"), &json)?;
        for entry in fs::read_dir(&blobs)? {
            let entry = entry?;
            if !live.contains(entry.file_name().to_string_lossy().as_ref()) {
                let _ = fs::remove_file(entry.path());
            }
        }
        Ok(())
    }

    fn owner_bytes(o: &OwnerState) -> usize {
        o.pk.len()
            + o.resources
                .values()
                .map(StoredResource::bytes)
                .sum::<usize>()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RepoError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load(dir: &Path, manifest: &[u8]) -> Result<State, RepoError> {
    let m: Manifest =
        serde_json::from_slice(manifest).map_err(|e| RepoError::Io(format!("manifest: {e}")))?;
    let read_blob = |r: &str| -> Result<Arc<Vec<u8>>, RepoError> {
        let bytes = fs::read(dir.join("blobs").join(r))?;
        if blob_ref(&bytes) != r {
            return Err(RepoError::Io(format!("blob {r} is corrupt")));
        }
        Ok(Arc::new(bytes))
    };
    let mut owners = BTreeMap::new();
    for (id, om) in m.owners {
        let mut resources = BTreeMap::new();
        for text in om.records {
            let record = ResourceRecord::from_text(&text)?;
            let stored = StoredResource {
                permanent: read_blob(&record.permanent_blob_ref)?,
                revocable: record
                    .revocable_blob_refs
                    .iter()
                    .map(|r| read_blob(r))
                    .collect::<Result<_, _>>()?,
                record,
            };
            resources.insert(stored.record.resource_name.clone(), stored);
        }
        owners.insert(
            id,
            OwnerState {
                pk: read_blob(&om.pk)?,
                epoch: om.epoch,
                resources,
            },
        );
    }
    let mut mailboxes = BTreeMap::new();
    for (recipient, entries) in m.mailboxes {
        let q = entries
            .into_iter()
            .map(|(seq, payload)| {
                Ok(MailboxEntry {
                    recipient_id: recipient.clone(),
                    seq,
                    payload: hex::decode(payload).map_err(|e| RepoError::Io(e.to_string()))?,
                })
            })
            .collect::<Result<VecDeque<_>, RepoError>>()?;
        mailboxes.insert(recipient, q);
    }
    Ok(State {
        owners,
        mailboxes,
        next_seq: m.next_seq,
    })
}

fn unknown_owner(owner: &str) -> RepoError {
    RepoError::NotFound(format!("owner {owner}"))
}

impl Repository for RepoStore {
    fn put_public_key(&self, owner: &str, pk: &[u8], epoch: u32) -> Result<(), RepoError> {
        let mut st = self.state.write().unwrap();
        match st.owners.get_mut(owner) {
            Some(o) if epoch < o.epoch => {
                return Err(RepoError::StaleEpoch {
                    given: epoch,
                    stored: o.epoch,
                })
            }
            Some(o) if epoch > o.epoch && !o.resources.is_empty() => {
                return Err(RepoError::Invalid(
                    "epoch advance with stored resources requires swap_revocable".into(),
                ))
            }
            Some(o) => {
                o.pk = Arc::new(pk.to_vec());
                o.epoch = epoch;
            }
            None => {
                st.owners.insert(
                    owner.to_string(),
                    OwnerState {
                        pk: Arc::new(pk.to_vec()),
                        epoch,
                        resources: BTreeMap::new(),
                    },
                );
            }
        }
        self.persist(&st)
    }

    fn get_public_key(&self, owner: &str) -> Result<(Vec<u8>, u32), RepoError> {
        let st = self.state.read().unwrap();
        let o = st.owners.get(owner).ok_or_else(|| unknown_owner(owner))?;
        Ok((o.pk.to_vec(), o.epoch))
    }

    fn put_resource(
        &self,
        record: &ResourceRecord,
        blobs: &ResourceBlobs,
    ) -> Result<ResourceRecord, RepoError> {
        if record.resource_name.is_empty() {
            return Err(RepoError::Invalid("empty resource name".into()));
        }
        let mut st = self.state.write().unwrap();
        let limits = self.limits;
        let o = st
            .owners
            .get_mut(&record.owner_id)
            .ok_or_else(|| unknown_owner(&record.owner_id))?;
        if record.epoch != o.epoch {
            return Err(RepoError::Conflict {
                expected: record.epoch,
                stored: o.epoch,
            });
        }
        let previous = o.resources.get(&record.resource_name);
        if previous.is_none() && o.resources.len() >= limits.max_resources_per_owner {
            return Err(RepoError::QuotaExceeded(format!(
                "{} resources",
                limits.max_resources_per_owner
            )));
        }
        let used = Self::owner_bytes(o) - previous.map_or(0, StoredResource::bytes);
        if used + blobs.total_len() > limits.max_bytes_per_owner {
            return Err(RepoError::QuotaExceeded(format!(
                "{} bytes",
                limits.max_bytes_per_owner
            )));
        }
        let stored_record = ResourceRecord {
            owner_id: record.owner_id.clone(),
            resource_name: record.resource_name.clone(),
            content_type: record.content_type.clone(),
            version: previous.map_or(1, |p| p.record.version + 1),
            epoch: o.epoch,
            permanent_blob_ref: blob_ref(&blobs.permanent),
            revocable_blob_refs: blobs.revocable.iter().map(|b| blob_ref(b)).collect(),
        };
        o.resources.insert(
            record.resource_name.clone(),
            StoredResource {
                record: stored_record.clone(),
                permanent: Arc::new(blobs.permanent.clone()),
                revocable: blobs
                    .revocable
                    .iter()
                    .map(|b| Arc::new(b.clone()))
                    .collect(),
            },
        );
        self.persist(&st)?;
        Ok(stored_record)
    }

    fn get_resource(
        &self,
        owner: &str,
        name: &str,
    ) -> Result<(ResourceRecord, ResourceBlobs), RepoError> {
        let st = self.state.read().unwrap();
        let o = st.owners.get(owner).ok_or_else(|| unknown_owner(owner))?;
        let r = o
            .resources
            .get(name)
            .ok_or_else(|| RepoError::NotFound(format!("resource {owner}/{name}")))?;
        Ok((
            r.record.clone(),
            ResourceBlobs {
                permanent: r.permanent.to_vec(),
                revocable: r.revocable.iter().map(|b| b.to_vec()).collect(),
            },
        ))
    }

    fn list_resources(&self, owner: &str) -> Result<Vec<ResourceRecord>, RepoError> {
        let st = self.state.read().unwrap();
        let o = st.owners.get(owner).ok_or_else(|| unknown_owner(owner))?;
        Ok(o.resources.values().map(|r| r.record.clone()).collect())
    }

    fn swap_revocable(
        &self,
        owner: &str,
        expected_epoch: u32,
        replacements: &Replacements,
        new_pk: &[u8],
    ) -> Result<u32, RepoError> {
        let mut st = self.state.write().unwrap();
        let o = st
            .owners
            .get_mut(owner)
            .ok_or_else(|| unknown_owner(owner))?;
        if o.epoch != expected_epoch {
            return Err(RepoError::Conflict {
                expected: expected_epoch,
                stored: o.epoch,
            });
        }
        // A resource left at the old epoch would be readable by nobody.
        for (name, r) in &o.resources {
            if !r.revocable.is_empty() && !replacements.contains_key(name) {
                return Err(RepoError::Invalid(format!("swap does not cover {name}")));
            }
        }
        if let Some(name) = replacements.keys().find(|n| !o.resources.contains_key(*n)) {
            return Err(RepoError::NotFound(format!("resource {owner}/{name}")));
        }
        let new_epoch = expected_epoch
            .checked_add(1)
            .ok_or_else(|| RepoError::Invalid("epoch overflow".into()))?;
        for (name, blobs) in replacements {
            let r = o.resources.get_mut(name).expect("checked above");
            r.revocable = blobs.iter().map(|b| Arc::new(b.clone())).collect();
            r.record.revocable_blob_refs = blobs.iter().map(|b| blob_ref(b)).collect();
        }
        for r in o.resources.values_mut() {
            r.record.epoch = new_epoch;
        }
        o.pk = Arc::new(new_pk.to_vec());
        o.epoch = new_epoch;
        self.persist(&st)?;
        Ok(new_epoch)
    }

    fn mailbox_post(&self, recipient: &str, payload: &[u8]) -> Result<u64, RepoError> {
        if payload.len() > self.limits.max_mail_payload {
            return Err(RepoError::Oversize {
                len: payload.len(),
                limit: self.limits.max_mail_payload,
            });
        }
        let mut st = self.state.write().unwrap();
        st.next_seq += 1;
        let seq = st.next_seq;
        st.mailboxes
            .entry(recipient.to_string())
            .or_default()
            .push_back(MailboxEntry {
                recipient_id: recipient.to_string(),
                seq,
                payload: payload.to_vec(),
            });
        self.persist(&st)?;
        Ok(seq)
    }

    fn mailbox_fetch(
        &self,
        recipient: &str,
        ack_through: Option<u64>,
    ) -> Result<Vec<MailboxEntry>, RepoError> {
        if let Some(ack) = ack_through {
            let mut st = self.state.write().unwrap();
            if let Some(q) = st.mailboxes.get_mut(recipient) {
                let before = q.len();
                q.retain(|e| e.seq > ack);
                let changed = q.len() != before;
                if q.is_empty() {
                    st.mailboxes.remove(recipient);
                }
                if changed {
                    self.persist(&st)?;
                }
            }
            let q = st.mailboxes.get(recipient);
            return Ok(q.map(|q| q.iter().cloned().collect()).unwrap_or_default());
        }
        let st = self.state.read().unwrap();
        Ok(st
            .mailboxes
            .get(recipient)
            .map(|q| q.iter().cloned().collect())
            .unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(tag: u8, n: usize, size: usize) -> ResourceBlobs {
        ResourceBlobs {
            permanent: vec![tag; size],
            revocable: (0..n).map(|i| vec![tag ^ (i as u8 + 1); 64]).collect(),
        }
    }

    fn seeded() -> RepoStore {
        let s = RepoStore::in_memory();
        s.put_public_key("alice", b"pk0", 0).unwrap();
        s
    }

    #[test]
    fn public_keys() {
        let s = seeded();
        assert_eq!(s.get_public_key("alice").unwrap(), (b"pk0".to_vec(), 0));
        s.put_public_key("bob", b"pk1", 1).unwrap();
        assert_eq!(
            s.put_public_key("bob", b"old", 0),
            Err(RepoError::StaleEpoch {
                given: 0,
                stored: 1
            })
        );
        assert_eq!(s.get_public_key("bob").unwrap().0, b"pk1");
        assert!(matches!(
            s.get_public_key("carol"),
            Err(RepoError::NotFound(_))
        ));
    }

    #[test]
    fn resources_round_trip_and_version() {
        let s = seeded();
        let b = blobs(1, 2, 1 << 20);
        let r = s
            .put_resource(&ResourceRecord::draft("alice", "doc", "text/plain", 0), &b)
            .unwrap();
        assert_eq!(r.version, 1);
        assert_eq!(r.permanent_blob_ref, blob_ref(&b.permanent));
        let (r2, b2) = s.get_resource("alice", "doc").unwrap();
        assert_eq!((r2, b2), (r.clone(), b));
        let again = s
            .put_resource(
                &ResourceRecord::draft("alice", "doc", "text/plain", 0),
                &blobs(2, 1, 10),
            )
            .unwrap();
        assert_eq!(again.version, 2);
        for n in ["a", "b"] {
            s.put_resource(&ResourceRecord::draft("alice", n, "x", 0), &blobs(3, 1, 1))
                .unwrap();
        }
        let names: Vec<_> = s
            .list_resources("alice")
            .unwrap()
            .into_iter()
            .map(|r| r.resource_name)
            .collect();
        assert_eq!(names, ["a", "b", "doc"]);
        assert!(matches!(
            s.get_resource("alice", "nope"),
            Err(RepoError::NotFound(_))
        ));
        assert!(matches!(
            s.put_resource(
                &ResourceRecord::draft("alice", "c", "x", 5),
                &blobs(3, 1, 1)
            ),
            Err(RepoError::Conflict {
                expected: 5,
                stored: 0
            })
        ));
    }

    #[test]
    fn quotas() {
        let s = RepoStore::with_limits(Limits {
            max_resources_per_owner: 2,
            max_bytes_per_owner: 1000,
            max_mail_payload: 8,
        });
        s.put_public_key("a", b"k", 0).unwrap();
        s.put_resource(&ResourceRecord::draft("a", "1", "x", 0), &blobs(0, 1, 10))
            .unwrap();
        s.put_resource(&ResourceRecord::draft("a", "2", "x", 0), &blobs(0, 1, 10))
            .unwrap();
        assert!(matches!(
            s.put_resource(&ResourceRecord::draft("a", "3", "x", 0), &blobs(0, 1, 10)),
            Err(RepoError::QuotaExceeded(_))
        ));
        assert!(matches!(
            s.put_resource(&ResourceRecord::draft("a", "1", "x", 0), &blobs(0, 1, 2000)),
            Err(RepoError::QuotaExceeded(_))
        ));
        assert_eq!(
            s.mailbox_post("b", &[0; 9]),
            Err(RepoError::Oversize { len: 9, limit: 8 })
        );
    }

    #[test]
    fn swap_is_all_or_nothing() {
        let s = seeded();
        for i in 0..5 {
            s.put_resource(
                &ResourceRecord::draft("alice", &format!("r{i}"), "x", 0),
                &blobs(i, 2, 8),
            )
            .unwrap();
        }
        let mut repl: Replacements = (0..4)
            .map(|i| (format!("r{i}"), vec![vec![9u8; 3]]))
            .collect();
        assert!(matches!(
            s.swap_revocable("alice", 0, &repl, b"pk1"),
            Err(RepoError::Invalid(_))
        ));
        repl.insert("r4".into(), vec![vec![8u8; 3]]);
        assert_eq!(
            s.swap_revocable("alice", 1, &repl, b"pk1"),
            Err(RepoError::Conflict {
                expected: 1,
                stored: 0
            })
        );
        assert_eq!(s.get_public_key("alice").unwrap().1, 0);
        assert_eq!(s.swap_revocable("alice", 0, &repl, b"pk1").unwrap(), 1);
        for r in s.list_resources("alice").unwrap() {
            assert_eq!(r.epoch, 1);
            assert_eq!(r.revocable_blob_refs.len(), 1);
        }
        assert_eq!(s.get_public_key("alice").unwrap(), (b"pk1".to_vec(), 1));
        let empty = RepoStore::in_memory();
        empty.put_public_key("z", b"k0", 0).unwrap();
        assert_eq!(
            empty
                .swap_revocable("z", 0, &Replacements::new(), b"k1")
                .unwrap(),
            1
        );
    }

    #[test]
    fn mailbox_fifo_and_ack() {
        let s = RepoStore::in_memory();
        let seqs: Vec<u64> = (0..3)
            .map(|i| s.mailbox_post("bob", &[i]).unwrap())
            .collect();
        let got = s.mailbox_fetch("bob", None).unwrap();
        assert_eq!(
            got.iter().map(|e| e.payload[0]).collect::<Vec<_>>(),
            [0, 1, 2]
        );
        assert!(s.mailbox_fetch("bob", Some(seqs[2])).unwrap().is_empty());
        assert!(s.mailbox_fetch("carol", None).unwrap().is_empty());
    }

    #[test]
    fn durable_across_restart() {
        let dir = tempfile::tempdir().unwrap();
        let expected = {
            let s = RepoStore::open(dir.path(), Limits::default()).unwrap();
            s.put_public_key("alice", b"pk0", 0).unwrap();
            s.put_resource(
                &ResourceRecord::draft("alice", "doc", "t", 0),
                &blobs(4, 2, 5000),
            )
            .unwrap();
            s.put_resource(
                &ResourceRecord::draft("alice", "old", "t", 0),
                &blobs(5, 1, 50),
            )
            .unwrap();
            let repl = Replacements::from([
                ("doc".to_string(), vec![vec![1u8; 10]]),
                ("old".to_string(), vec![vec![2u8; 10]]),
            ]);
            s.swap_revocable("alice", 0, &repl, b"pk1").unwrap();
            s.mailbox_post("bob", b"hello").unwrap();
            (
                s.stored_streams(),
                s.list_resources("alice").unwrap(),
                s.epochs(),
            )
        };
        let s = RepoStore::open(dir.path(), Limits::default()).unwrap();
        assert_eq!(
            (
                s.stored_streams(),
                s.list_resources("alice").unwrap(),
                s.epochs()
            ),
            expected
        );
        assert_eq!(s.mailbox_fetch("bob", None).unwrap()[0].payload, b"hello");
        let n = fs::read_dir(dir.path().join("blobs")).unwrap().count();
        assert_eq!(n, 5, "superseded blobs are collected");
        assert_eq!(s.mailbox_post("bob", b"x").unwrap(), 2);
    }
}
