//! Private store: the node's secrets and bookkeeping as a mode-0600 JSON file.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::os::unix::fs::OpenOptionsExt;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{IssuedLink, Node, NodeError, OwnerKeys, Publication, TransportKeys};
use crate::group::Scalar;
use crate::par::Execution;
use crate::policy::ConditionUniverse;
use crate::repo::Repository;
use crate::scheme::{DbraKey, DbraMasterKey, DbraPublicKey, PolicyPair};

const FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Saved {
    format: u32,
    user_id: String,
    universe: Option<String>,
    pk: String,
    msk: String,
    transport_secret: String,
    owners: BTreeMap<String, SavedOwner>,
    issued: BTreeMap<String, SavedLink>,
    revoked_pending: Vec<(String, SavedLink)>,
    publications: BTreeMap<String, SavedPublication>,
    mail_ack: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct SavedOwner {
    pk: String,
    held: Vec<(Vec<String>, String)>,
}

#[derive(Serialize, Deserialize)]
struct SavedLink {
    distance: u32,
    key: String,
}

#[derive(Serialize, Deserialize)]
struct SavedPublication {
    content_type: String,
    policy: Option<String>,
    pairs: Vec<(Vec<u32>, u32)>,
    version: u64,
}

fn corrupt(what: &str) -> NodeError {
    NodeError::Corrupt(format!("private store: {what}"))
}

fn unhex(s: &str) -> Result<Vec<u8>, NodeError> {
    hex::decode(s).map_err(|_| corrupt("hex"))
}

fn save_link(l: &IssuedLink) -> Result<SavedLink, NodeError> {
    Ok(SavedLink {
        distance: l.distance,
        key: hex::encode(l.key.to_bytes()?),
    })
}

fn load_link(l: &SavedLink) -> Result<IssuedLink, NodeError> {
    Ok(IssuedLink {
        distance: l.distance,
        key: DbraKey::from_bytes(&unhex(&l.key)?)?,
    })
}

impl Node {
    pub fn save(&self, path: &Path) -> Result<(), NodeError> {
        let saved = Saved {
            format: FORMAT,
            user_id: self.user_id.clone(),
            universe: self.universe.as_ref().map(|u| u.to_string()),
            pk: hex::encode(self.pk.to_bytes()?),
            msk: hex::encode(self.msk.to_bytes()?),
            transport_secret: hex::encode(self.transport.secret().to_bytes()),
            owners: self
                .key_ring
                .iter()
                .map(|(o, r)| {
                    Ok((
                        o.clone(),
                        SavedOwner {
                            pk: hex::encode(r.pk.to_bytes()?),
                            held: r
                                .held
                                .iter()
                                .map(|(c, k)| Ok((c.clone(), hex::encode(k.to_bytes()?))))
                                .collect::<Result<_, NodeError>>()?,
                        },
                    ))
                })
                .collect::<Result<_, NodeError>>()?,
            issued: self
                .issued
                .iter()
                .map(|(p, l)| Ok((p.clone(), save_link(l)?)))
                .collect::<Result<_, NodeError>>()?,
            revoked_pending: self
                .revoked_pending
                .iter()
                .map(|(p, l)| Ok((p.clone(), save_link(l)?)))
                .collect::<Result<_, NodeError>>()?,
            publications: self
                .publications
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        SavedPublication {
                            content_type: p.content_type.clone(),
                            policy: p.policy.clone(),
                            pairs: p.pairs.iter().map(|q| (q.x.clone(), q.d)).collect(),
                            version: p.version,
                        },
                    )
                })
                .collect(),
            mail_ack: self.mail_ack,
        };
        let json = serde_json::to_vec_pretty(&saved).map_err(|e| corrupt(&e.to_string()))?;
        let tmp = path.with_extension("tmp");
        let mut f = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .mode(0o600)
            .open(&tmp)?;
        f.write_all(&json)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, repo: Arc<dyn Repository>) -> Result<Node, NodeError> {
        let saved: Saved =
            serde_json::from_slice(&fs::read(path)?).map_err(|e| corrupt(&e.to_string()))?;
        if saved.format != FORMAT {
            return Err(corrupt("unsupported format"));
        }
        let pk = DbraPublicKey::from_bytes(&unhex(&saved.pk)?)?;
        let universe = match saved.universe {
            Some(text) => Some(ConditionUniverse::parse(&text, pk.schema().d_max())?),
            None => None,
        };
        let mut key_ring = BTreeMap::new();
        for (owner, o) in saved.owners {
            let pk = DbraPublicKey::from_bytes(&unhex(&o.pk)?)?;
            let held = o
                .held
                .into_iter()
                .map(|(c, k)| Ok((c, DbraKey::from_bytes(&unhex(&k)?)?)))
                .collect::<Result<_, NodeError>>()?;
            key_ring.insert(owner, OwnerKeys { pk, held });
        }
        Ok(Node {
            user_id: saved.user_id,
            universe,
            msk: DbraMasterKey::from_bytes(&unhex(&saved.msk)?)?,
            pk,
            transport: TransportKeys::from_secret(
                Scalar::from_bytes(&unhex(&saved.transport_secret)?)
                    .map_err(|_| corrupt("transport key"))?,
            ),
            key_ring,
            issued: saved
                .issued
                .iter()
                .map(|(p, l)| Ok((p.clone(), load_link(l)?)))
                .collect::<Result<_, NodeError>>()?,
            revoked_pending: saved
                .revoked_pending
                .iter()
                .map(|(p, l)| Ok((p.clone(), load_link(l)?)))
                .collect::<Result<_, NodeError>>()?,
            publications: saved
                .publications
                .into_iter()
                .map(|(n, p)| {
                    (
                        n,
                        Publication {
                            content_type: p.content_type,
                            policy: p.policy,
                            pairs: p
                                .pairs
                                .into_iter()
                                .map(|(x, d)| PolicyPair::new(x, d))
                                .collect(),
                            version: p.version,
                        },
                    )
                })
                .collect(),
            mail_ack: saved.mail_ack,
            rng: ChaCha20Rng::from_entropy(),
            repo,
            exec: Execution::default(),
        })
    }
}
