//! Per-user protocol engine: enrollment, publication, non-interactive access,
//! link creation with key issuance, transitive propagation and revocation.

mod messages;
mod persist;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::group::{group_setup, AccessDenied, SymmetricKey};
use crate::par::Execution;
use crate::policy::{
    compile_policy, derive_key_pattern, parse_policy, ConditionUniverse, CredentialSet, PolicyError,
};
use crate::repo::{Replacements, RepoError, Repository, ResourceBlobs, ResourceRecord};
use crate::scheme::{
    self, AttributeSchema, DbraCiphertext, DbraKey, DbraMasterKey, DbraPublicKey, KeyPattern,
    PolicyPair, SchemeError,
};
use crate::wire::WireError;

pub use messages::{
    open_mail, open_permanent, seal_mail, seal_permanent, transport_base, KeyMessage, PublicRecord,
    TransportKeys,
};

pub const DEFAULT_CONTENT_TYPE: &str = "application/octet-stream";
const SWAP_ATTEMPTS: usize = 4;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("access denied")]
    Denied,
    #[error("user {0} is already enrolled")]
    AlreadyEnrolled(String),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("no active link to {0}")]
    NoSuchLink(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("node has no condition universe; use explicit patterns and pairs")]
    NoUniverse,
    #[error("distance {d} outside 1..={d_max}")]
    BadDistance { d: u32, d_max: u32 },
    #[error("a policy needs at least one rule")]
    EmptyPolicy,
    #[error("local state is behind the repository (local epoch {local}, stored {stored})")]
    OutOfSync { local: u32, stored: u32 },
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Repo(RepoError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<RepoError> for NodeError {
    fn from(e: RepoError) -> Self {
        match e {
            RepoError::NotFound(m) => NodeError::NotFound(m),
            e => NodeError::Repo(e),
        }
    }
}

impl From<AccessDenied> for NodeError {
    fn from(_: AccessDenied) -> Self {
        NodeError::Denied
    }
}

/// What an owner declares at enrollment.
#[derive(Debug, Clone)]
pub enum Profile {
    /// Policies are written in the policy language over these conditions.
    Universe(ConditionUniverse),
    /// Policies are given directly as attribute vectors over this schema.
    Schema(AttributeSchema),
}

/// How the key pattern for a new link is chosen.
#[derive(Debug, Clone)]
pub enum Grant {
    Credentials(CredentialSet),
    Pattern(Vec<Option<u32>>),
}

/// How a resource's policy pairs are chosen.
#[derive(Debug, Clone)]
pub enum Labels {
    Policy(String),
    Pairs(Vec<PolicyPair>),
}

/// A key message addressed to one peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub recipient: String,
    pub message: KeyMessage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IssuedLink {
    pub distance: u32,
    pub key: DbraKey,
}

impl IssuedLink {
    pub fn pattern(&self) -> &KeyPattern {
        self.key.pattern()
    }
}

#[derive(Debug, Clone)]
struct OwnerKeys {
    pk: DbraPublicKey,
    held: BTreeMap<Vec<String>, DbraKey>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publication {
    pub content_type: String,
    /// Kept locally; never uploaded.
    pub policy: Option<String>,
    pub pairs: Vec<PolicyPair>,
    pub version: u64,
}

/// Result of a successful access.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Granted {
    pub plaintext: Vec<u8>,
    pub chain: Vec<String>,
    pub key_epoch: u32,
    pub ct_epoch: u32,
}

#[derive(Debug, Clone)]
pub struct RevocationReceipt {
    pub new_epoch: u32,
    pub resources_updated: usize,
    pub ciphertexts_updated: usize,
    pub messages: Vec<Outgoing>,
}

pub struct Node {
    user_id: String,
    universe: Option<ConditionUniverse>,
    pk: DbraPublicKey,
    msk: DbraMasterKey,
    transport: TransportKeys,
    key_ring: BTreeMap<String, OwnerKeys>,
    issued: BTreeMap<String, IssuedLink>,
    revoked_pending: Vec<(String, IssuedLink)>,
    publications: BTreeMap<String, Publication>,
    mail_ack: Option<u64>,
    rng: ChaCha20Rng,
    repo: Arc<dyn Repository>,
    exec: Execution,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("user_id", &self.user_id)
            .finish_non_exhaustive()
    }
}

fn make_rng(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    }
}

impl Node {
    /// Generates the master key pair and publishes the public record.
    pub fn enroll(
        user_id: &str,
        profile: Profile,
        repo: Arc<dyn Repository>,
        seed: Option<u64>,
    ) -> Result<Node, NodeError> {
        if user_id.is_empty() {
            return Err(NodeError::Corrupt("empty user id".into()));
        }
        match repo.get_public_key(user_id) {
            Ok(_) => return Err(NodeError::AlreadyEnrolled(user_id.into())),
            Err(RepoError::NotFound(_)) => {}
            Err(e) => return Err(e.into()),
        }
        let (universe, schema) = match profile {
            Profile::Universe(u) => {
                let s = u.schema()?;
                (Some(u), s)
            }
            Profile::Schema(s) => (None, s),
        };
        let mut rng = make_rng(seed);
        let ctx = group_setup(128, Some(b"dbra/node/v1")).expect("128-bit level is supported");
        let (pk, msk) = scheme::setup(&schema, &ctx, &mut rng)?;
        let transport = TransportKeys::generate(&mut rng);
        let node = Node {
            user_id: user_id.into(),
            universe,
            pk,
            msk,
            transport,
            key_ring: BTreeMap::new(),
            issued: BTreeMap::new(),
            revoked_pending: Vec::new(),
            publications: BTreeMap::new(),
            mail_ack: None,
            rng,
            repo,
            exec: Execution::default(),
        };
        node.repo
            .put_public_key(user_id, &node.public_record().to_bytes()?, node.pk.epoch())?;
        Ok(node)
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn public_key(&self) -> &DbraPublicKey {
        &self.pk
    }

    pub fn schema(&self) -> &AttributeSchema {
        self.pk.schema()
    }

    pub fn universe(&self) -> Option<&ConditionUniverse> {
        self.universe.as_ref()
    }

    pub fn epoch(&self) -> u32 {
        self.pk.epoch()
    }

    pub fn d_max(&self) -> u32 {
        self.schema().d_max()
    }

    pub fn set_execution(&mut self, exec: Execution) {
        self.exec = exec;
    }

    pub fn repository(&self) -> &Arc<dyn Repository> {
        &self.repo
    }

    /// Serialized master secret; changes only on revocation.
    pub fn master_key_bytes(&self) -> Vec<u8> {
        self.msk.to_bytes().expect("master key fits the envelope")
    }

    pub fn public_record(&self) -> PublicRecord {
        PublicRecord {
            user_id: self.user_id.clone(),
            pk: self.pk.clone(),
            transport: *self.transport.public(),
        }
    }

    /// Keys held for `owner`'s resources, by issuer chain.
    pub fn held_keys(&self, owner: &str) -> Vec<(Vec<String>, DbraKey)> {
        self.key_ring
            .get(owner)
            .map(|o| o.held.iter().map(|(c, k)| (c.clone(), k.clone())).collect())
            .unwrap_or_default()
    }

    pub fn key_ring_size(&self, owner: &str) -> usize {
        self.key_ring.get(owner).map_or(0, |o| o.held.len())
    }

    pub fn key_ring_owners(&self) -> Vec<String> {
        self.key_ring.keys().cloned().collect()
    }

    pub fn issued(&self) -> &BTreeMap<String, IssuedLink> {
        &self.issued
    }

    pub fn revoked_pending(&self) -> &[(String, IssuedLink)] {
        &self.revoked_pending
    }

    pub fn publications(&self) -> &BTreeMap<String, Publication> {
        &self.publications
    }

    fn check_distance(&self, d: u32) -> Result<(), NodeError> {
        if d < 1 || d > self.d_max() {
            return Err(NodeError::BadDistance {
                d,
                d_max: self.d_max(),
            });
        }
        Ok(())
    }

    pub fn publish(
        &mut self,
        name: &str,
        content: &[u8],
        policy_text: &str,
    ) -> Result<ResourceRecord, NodeError> {
        self.publish_with(
            name,
            DEFAULT_CONTENT_TYPE,
            content,
            Labels::Policy(policy_text.into()),
        )
    }

    /// Hybrid publication: one permanent ciphertext under a fresh resource key
    /// and one revocable ciphertext of that key per policy pair.
    pub fn publish_with(
        &mut self,
        name: &str,
        content_type: &str,
        content: &[u8],
        labels: Labels,
    ) -> Result<ResourceRecord, NodeError> {
        let (policy, pairs) = match labels {
            Labels::Policy(text) => {
                let universe = self.universe.as_ref().ok_or(NodeError::NoUniverse)?;
                let p = parse_policy(&text)?;
                (Some(p.to_string()), compile_policy(&p, universe)?)
            }
            Labels::Pairs(pairs) => (None, pairs),
        };
        if pairs.is_empty() {
            return Err(NodeError::EmptyPolicy);
        }
        let sk = SymmetricKey::random(&mut self.rng);
        let permanent = seal_permanent(&sk, &self.user_id, name, content, &mut self.rng)?;
        let mut revocable = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let ct = scheme::encrypt(&self.pk, p, sk.as_bytes(), &mut self.rng)?;
            revocable.push(ct.to_bytes()?);
        }
        let record = ResourceRecord::draft(&self.user_id, name, content_type, self.pk.epoch());
        let stored = self.repo.put_resource(
            &record,
            &ResourceBlobs {
                permanent,
                revocable,
            },
        )?;
        self.publications.insert(
            name.into(),
            Publication {
                content_type: content_type.into(),
                policy,
                pairs,
                version: stored.version,
            },
        );
        Ok(stored)
    }

    /// Repository reads only; never contacts the owner.
    pub fn access(&self, owner: &str, name: &str) -> Result<Vec<u8>, NodeError> {
        self.access_traced(owner, name).map(|g| g.plaintext)
    }

    pub fn access_traced(&self, owner: &str, name: &str) -> Result<Granted, NodeError> {
        let (_, blobs) = self.repo.get_resource(owner, name)?;
        let Some(ring) = self.key_ring.get(owner) else {
            return Err(NodeError::Denied);
        };
        for bytes in &blobs.revocable {
            let Ok(ct) = DbraCiphertext::from_bytes(bytes) else {
                continue;
            };
            for (chain, key) in &ring.held {
                let Ok(sk) = scheme::decrypt(key, &ct) else {
                    continue;
                };
                let Ok(sk) = SymmetricKey::from_bytes(&sk) else {
                    continue;
                };
                if let Ok(plaintext) = open_permanent(&sk, owner, name, &blobs.permanent) {
                    return Ok(Granted {
                        plaintext,
                        chain: chain.clone(),
                        key_epoch: key.epoch(),
                        ct_epoch: ct.epoch(),
                    });
                }
            }
        }
        Err(NodeError::Denied)
    }

    fn issue(&mut self, peer: &str, pattern: &KeyPattern) -> Result<KeyMessage, NodeError> {
        let key = scheme::derive(&self.pk, &self.msk, pattern, &mut self.rng)?;
        tracing::debug!(owner = %self.user_id, %peer, "issued key");
        Ok(KeyMessage {
            chain: vec![self.user_id.clone()],
            owner: self.user_id.clone(),
            key,
            pk: self.pk.clone(),
        })
    }

    /// Derives and records a key for `peer`, and forwards every held key that
    /// stays within its owner's maximum distance.
    pub fn create_link(
        &mut self,
        peer: &str,
        grant: Grant,
        distance: u32,
    ) -> Result<Vec<Outgoing>, NodeError> {
        self.check_distance(distance)?;
        if peer == self.user_id {
            return Err(NodeError::Corrupt("link to self".into()));
        }
        let pattern = match grant {
            Grant::Credentials(creds) => {
                let u = self.universe.as_ref().ok_or(NodeError::NoUniverse)?;
                derive_key_pattern(&creds, u, distance)?
            }
            Grant::Pattern(y) => KeyPattern::new(y, distance),
        };
        let msg = self.issue(peer, &pattern)?;
        if let Some(old) = self.issued.insert(
            peer.into(),
            IssuedLink {
                distance,
                key: msg.key.clone(),
            },
        ) {
            self.revoked_pending.push((peer.into(), old));
        }
        let mut out = vec![Outgoing {
            recipient: peer.into(),
            message: msg,
        }];
        let held: Vec<(String, DbraPublicKey, Vec<String>, DbraKey)> = self
            .key_ring
            .iter()
            .flat_map(|(o, r)| {
                r.held
                    .iter()
                    .map(move |(c, k)| (o.clone(), r.pk.clone(), c.clone(), k.clone()))
            })
            .collect();
        for (owner, pk, chain, key) in held {
            if let Some(m) = self.forward(&owner, &pk, &chain, &key, peer, distance)? {
                out.push(m);
            }
        }
        Ok(out)
    }

    fn forward(
        &mut self,
        owner: &str,
        pk: &DbraPublicKey,
        chain: &[String],
        key: &DbraKey,
        peer: &str,
        link_distance: u32,
    ) -> Result<Option<Outgoing>, NodeError> {
        if peer == owner || chain.iter().any(|c| c == peer) {
            return Ok(None);
        }
        let d = key.pattern().d + link_distance;
        if d > pk.schema().d_max() {
            return Ok(None);
        }
        let delegated = scheme::delegate(pk, key, d, &mut self.rng)?;
        let mut chain = chain.to_vec();
        chain.push(self.user_id.clone());
        Ok(Some(Outgoing {
            recipient: peer.into(),
            message: KeyMessage {
                chain,
                owner: owner.into(),
                key: delegated,
                pk: pk.clone(),
            },
        }))
    }

    /// Stores a received key and delegates it along every outgoing link.
    pub fn receive_and_propagate(&mut self, msg: KeyMessage) -> Result<Vec<Outgoing>, NodeError> {
        if msg.owner == self.user_id || msg.chain.contains(&self.user_id) {
            tracing::debug!(user = %self.user_id, chain = ?msg.chain, "loop suppressed");
            return Ok(Vec::new());
        }
        let (_, current) = self.repo.get_public_key(&msg.owner)?;
        if msg.epoch() != current {
            tracing::warn!(
                user = %self.user_id,
                owner = %msg.owner,
                epoch = msg.epoch(),
                current,
                "dropping key message from another epoch"
            );
            return Ok(Vec::new());
        }
        let ring = self
            .key_ring
            .entry(msg.owner.clone())
            .or_insert_with(|| OwnerKeys {
                pk: msg.pk.clone(),
                held: BTreeMap::new(),
            });
        if msg.epoch() < ring.pk.epoch() {
            return Ok(Vec::new());
        }
        if msg.epoch() > ring.pk.epoch() {
            ring.pk = msg.pk.clone();
            ring.held.clear();
        }
        if ring
            .held
            .get(&msg.chain)
            .is_some_and(|k| k.epoch() == msg.epoch())
        {
            return Ok(Vec::new());
        }
        ring.held.insert(msg.chain.clone(), msg.key.clone());
        let links: Vec<(String, u32)> = self
            .issued
            .iter()
            .map(|(p, l)| (p.clone(), l.distance))
            .collect();
        let mut out = Vec::new();
        for (peer, e) in links {
            if let Some(m) = self.forward(&msg.owner, &msg.pk, &msg.chain, &msg.key, &peer, e)? {
                out.push(m);
            }
        }
        Ok(out)
    }

    /// Seals each message for its recipient and posts it to their mailbox.
    pub fn send(&mut self, out: &[Outgoing]) -> Result<(), NodeError> {
        for o in out {
            let (bytes, _) = self
                .repo
                .get_public_key(&o.recipient)
                .map_err(|e| match e {
                    RepoError::NotFound(_) => NodeError::UnknownUser(o.recipient.clone()),
                    e => e.into(),
                })?;
            let record = PublicRecord::from_bytes(&bytes)?;
            let sealed = seal_mail(
                &self.user_id,
                &o.recipient,
                &record.transport,
                &o.message.to_bytes()?,
                &mut self.rng,
            )?;
            self.repo.mailbox_post(&o.recipient, &sealed)?;
        }
        Ok(())
    }

    /// Handles every queued key message, forwards the resulting messages and
    /// acknowledges the batch. Returns how many messages were read.
    pub fn process_mailbox(&mut self) -> Result<usize, NodeError> {
        let entries = self.repo.mailbox_fetch(&self.user_id, self.mail_ack)?;
        let n = entries.len();
        for e in entries {
            match open_mail(&self.transport, &self.user_id, &e.payload)
                .ok()
                .and_then(|(_, p)| KeyMessage::from_bytes(&p).ok())
            {
                Some(msg) => {
                    let out = self.receive_and_propagate(msg)?;
                    self.send(&out)?;
                }
                None => {
                    tracing::warn!(user = %self.user_id, seq = e.seq, "discarding unreadable mail")
                }
            }
            self.mail_ack = Some(e.seq);
        }
        if n > 0 {
            self.repo.mailbox_fetch(&self.user_id, self.mail_ack)?;
        }
        Ok(n)
    }

    /// Drops the link to `peer` and rotates to a new epoch in which only the
    /// remaining issued keys work.
    pub fn revoke_link(&mut self, peer: &str) -> Result<RevocationReceipt, NodeError> {
        if !self.issued.contains_key(peer) {
            return Err(NodeError::NoSuchLink(peer.into()));
        }
        let removed = self.issued.remove(peer).expect("checked");
        match self.rotate() {
            Ok(r) => Ok(r),
            Err(e) => {
                self.issued.insert(peer.into(), removed);
                Err(e)
            }
        }
    }

    /// Rotates the epoch so that keys replaced by later links stop working.
    pub fn revoke_pending(&mut self) -> Result<RevocationReceipt, NodeError> {
        self.rotate()
    }

    fn rotate(&mut self) -> Result<RevocationReceipt, NodeError> {
        let mut last = None;
        for _ in 0..SWAP_ATTEMPTS {
            let (_, stored) = self.repo.get_public_key(&self.user_id)?;
            if stored != self.pk.epoch() {
                return Err(NodeError::OutOfSync {
                    local: self.pk.epoch(),
                    stored,
                });
            }
            let mut names = Vec::new();
            let mut cts = Vec::new();
            for record in self.repo.list_resources(&self.user_id)? {
                let (_, blobs) = self
                    .repo
                    .get_resource(&self.user_id, &record.resource_name)?;
                for b in &blobs.revocable {
                    cts.push(DbraCiphertext::from_bytes(b)?);
                }
                names.push((record.resource_name, blobs.revocable.len()));
            }
            let peers: Vec<String> = self.issued.keys().cloned().collect();
            let keys: Vec<DbraKey> = self.issued.values().map(|l| l.key.clone()).collect();
            let out = scheme::revoke(&self.pk, &self.msk, &cts, &keys, &mut self.rng, self.exec)?;
            let mut replacements = Replacements::new();
            let mut it = out.ciphertexts.iter();
            for (name, n) in &names {
                let blobs = it
                    .by_ref()
                    .take(*n)
                    .map(|c| c.to_bytes())
                    .collect::<Result<Vec<_>, _>>()?;
                replacements.insert(name.clone(), blobs);
            }
            let record = PublicRecord {
                user_id: self.user_id.clone(),
                pk: out.pk.clone(),
                transport: *self.transport.public(),
            };
            match self.repo.swap_revocable(
                &self.user_id,
                stored,
                &replacements,
                &record.to_bytes()?,
            ) {
                Ok(new_epoch) => {
                    self.pk = out.pk;
                    self.msk = out.msk;
                    let mut messages = Vec::new();
                    for (peer, key) in peers.into_iter().zip(out.keys) {
                        let link = self.issued.get_mut(&peer).expect("peer listed above");
                        link.key = key.clone();
                        messages.push(Outgoing {
                            recipient: peer,
                            message: KeyMessage {
                                chain: vec![self.user_id.clone()],
                                owner: self.user_id.clone(),
                                key,
                                pk: self.pk.clone(),
                            },
                        });
                    }
                    self.revoked_pending.clear();
                    return Ok(RevocationReceipt {
                        new_epoch,
                        resources_updated: names.len(),
                        ciphertexts_updated: cts.len(),
                        messages,
                    });
                }
                Err(e @ RepoError::Conflict { .. }) => {
                    tracing::warn!(owner = %self.user_id, error = %e, "swap conflict, retrying");
                    last = Some(e);
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(NodeError::Repo(last.expect("at least one attempt")))
    }
}

#[cfg(test)]
mod tests;
