//! Objects exchanged between nodes and stored in the repository.

use std::sync::OnceLock;

use rand::{CryptoRng, RngCore};

use crate::group::{
    aead_open, aead_seal, derive_key_bytes, group_setup, random_nonce, AccessDenied, Scalar, Slot,
    SourceElement, SymmetricKey,
};
use crate::scheme::{DbraKey, DbraPublicKey, SchemeError};
use crate::wire::{decode_strings, encode_strings, Reader, Tag, WireError, Writer};

const MAIL_LABEL: &[u8] = b"dbra/mail/v1";

fn utf8(b: &[u8]) -> Result<String, WireError> {
    String::from_utf8(b.to_vec()).map_err(|_| WireError::Malformed("utf-8"))
}

/// Fixed base point for the mailbox key agreement, shared by every node.
pub fn transport_base() -> SourceElement {
    static BASE: OnceLock<SourceElement> = OnceLock::new();
    *BASE.get_or_init(|| {
        group_setup(128, Some(b"dbra/transport/v1"))
            .expect("128-bit level is supported")
            .generator()
            .left_only()
    })
}

#[derive(Clone, PartialEq, Eq)]
pub struct TransportKeys {
    secret: Scalar,
    public: SourceElement,
}

impl std::fmt::Debug for TransportKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransportKeys")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl TransportKeys {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        Self::from_secret(Scalar::random_nonzero(rng))
    }

    pub fn from_secret(secret: Scalar) -> Self {
        TransportKeys {
            public: transport_base().pow(&secret),
            secret,
        }
    }

    pub fn secret(&self) -> &Scalar {
        &self.secret
    }

    pub fn public(&self) -> &SourceElement {
        &self.public
    }
}

/// What a user publishes on enrollment: the encryption key and the mailbox key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicRecord {
    pub user_id: String,
    pub pk: DbraPublicKey,
    pub transport: SourceElement,
}

impl PublicRecord {
    pub fn epoch(&self) -> u32 {
        self.pk.epoch()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        Ok(Writer::new(Tag::PublicRecord, self.epoch())
            .bytes(self.user_id.as_bytes())?
            .bytes(&self.pk.to_bytes()?)?
            .source(&self.transport)?
            .finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SchemeError> {
        let mut r = Reader::open(bytes, Tag::PublicRecord)?;
        let user_id = utf8(r.bytes()?)?;
        let pk = DbraPublicKey::from_bytes(r.bytes()?)?;
        let transport = r.source(Slot::Left)?;
        let epoch = r.epoch;
        r.finish()?;
        if pk.epoch() != epoch {
            return Err(WireError::Malformed("record epoch").into());
        }
        Ok(PublicRecord {
            user_id,
            pk,
            transport,
        })
    }
}

/// A restricted decryption key in transit. `chain` lists the issuers, owner first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMessage {
    pub chain: Vec<String>,
    pub owner: String,
    pub key: DbraKey,
    pub pk: DbraPublicKey,
}

impl KeyMessage {
    pub fn epoch(&self) -> u32 {
        self.key.epoch()
    }

    pub fn sender(&self) -> &str {
        self.chain.last().map(String::as_str).unwrap_or(&self.owner)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        Ok(Writer::new(Tag::KeyMessage, self.epoch())
            .bytes(&encode_strings(&self.chain)?)?
            .bytes(self.owner.as_bytes())?
            .bytes(&self.key.to_bytes()?)?
            .bytes(&self.pk.to_bytes()?)?
            .finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SchemeError> {
        let mut r = Reader::open(bytes, Tag::KeyMessage)?;
        let chain = decode_strings(r.bytes()?)?;
        let owner = utf8(r.bytes()?)?;
        let key = DbraKey::from_bytes(r.bytes()?)?;
        let pk = DbraPublicKey::from_bytes(r.bytes()?)?;
        let epoch = r.epoch;
        r.finish()?;
        if key.epoch() != epoch || pk.epoch() != epoch || chain.first() != Some(&owner) {
            return Err(WireError::Malformed("key message").into());
        }
        Ok(KeyMessage {
            chain,
            owner,
            key,
            pk,
        })
    }
}

fn mail_ad(sender: &str, recipient: &str) -> Vec<u8> {
    let mut ad = MAIL_LABEL.to_vec();
    ad.extend_from_slice(sender.as_bytes());
    ad.push(0);
    ad.extend_from_slice(recipient.as_bytes());
    ad
}

fn mail_key(shared: &SourceElement, ephemeral: &SourceElement) -> SymmetricKey {
    let mut ikm = shared.to_bytes();
    ikm.extend_from_slice(&ephemeral.to_bytes());
    derive_key_bytes(&ikm, MAIL_LABEL).expect("label is non-empty")
}

/// Encrypts `payload` to the holder of `recipient_key`; the envelope is opaque
/// to the repository.
pub fn seal_mail<R: RngCore + CryptoRng + ?Sized>(
    sender: &str,
    recipient: &str,
    recipient_key: &SourceElement,
    payload: &[u8],
    rng: &mut R,
) -> Result<Vec<u8>, WireError> {
    let r = Scalar::random_nonzero(rng);
    let ephemeral = transport_base().pow(&r);
    let key = mail_key(&recipient_key.pow(&r), &ephemeral);
    let nonce = random_nonce(rng);
    let ct = aead_seal(&key, &nonce, &mail_ad(sender, recipient), payload);
    Ok(Writer::new(Tag::SealedMail, 0)
        .bytes(sender.as_bytes())?
        .bytes(recipient.as_bytes())?
        .source(&ephemeral)?
        .bytes(&nonce)?
        .tail(&ct)
        .finish())
}

/// Returns `(sender, payload)`.
pub fn open_mail(
    keys: &TransportKeys,
    recipient: &str,
    bytes: &[u8],
) -> Result<(String, Vec<u8>), AccessDenied> {
    let parse = || -> Result<_, WireError> {
        let mut r = Reader::open(bytes, Tag::SealedMail)?;
        let sender = utf8(r.bytes()?)?;
        let to = utf8(r.bytes()?)?;
        let ephemeral = r.source(Slot::Left)?;
        let nonce = r.nonce()?;
        Ok((sender, to, ephemeral, nonce, r.tail()))
    };
    let (sender, to, ephemeral, nonce, ct) = parse().map_err(|_| AccessDenied)?;
    if to != recipient {
        return Err(AccessDenied);
    }
    let key = mail_key(&ephemeral.pow(keys.secret()), &ephemeral);
    let payload = aead_open(&key, &nonce, &mail_ad(&sender, &to), ct)?;
    Ok((sender, payload))
}

/// The resource under its per-resource key; never rewritten by revocation.
pub fn seal_permanent<R: RngCore + CryptoRng + ?Sized>(
    sk: &SymmetricKey,
    owner: &str,
    name: &str,
    content: &[u8],
    rng: &mut R,
) -> Result<Vec<u8>, WireError> {
    let nonce = random_nonce(rng);
    let ct = aead_seal(sk, &nonce, &permanent_ad(owner, name), content);
    Ok(Writer::new(Tag::Permanent, 0)
        .bytes(&nonce)?
        .tail(&ct)
        .finish())
}

pub fn open_permanent(
    sk: &SymmetricKey,
    owner: &str,
    name: &str,
    bytes: &[u8],
) -> Result<Vec<u8>, AccessDenied> {
    let mut r = Reader::open(bytes, Tag::Permanent).map_err(|_| AccessDenied)?;
    let nonce = r.nonce().map_err(|_| AccessDenied)?;
    aead_open(sk, &nonce, &permanent_ad(owner, name), r.tail())
}

fn permanent_ad(owner: &str, name: &str) -> Vec<u8> {
    let mut ad = b"dbra/permanent/v1".to_vec();
    ad.extend_from_slice(owner.as_bytes());
    ad.push(0);
    ad.extend_from_slice(name.as_bytes());
    ad
}
