//! Distance-based revokable attribute encryption.
//!
//! Attributes go through the HVE layer, the distance `d` goes through the HIBE
//! layer as the unary identity `1^d`. A ciphertext is layered as
//!
//! ```text
//! hibe header (depth = d, rewritten on revocation)
//! outer = AEAD[kdf(K_hibe)]( hve header || inner nonce || inner )
//! inner = AEAD[kdf(K_hve)]( plaintext )
//! ```
//!
//! The outer layer does not bind the HIBE header so revocation can update
//! `Omega` in place. Distance is therefore visible; attributes are not.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::group::{
    aead_open, aead_seal, derive_key, random_nonce, AccessDenied, GroupContext, Scalar, NONCE_LEN,
};
use crate::hibe::{
    self, HibeError, HibeHeader, HibeIdentity, HibeKey, HibeMasterKey, HibePublicKey,
};
use crate::hve::{
    self, BitAttributeVector, BitPattern, HveError, HveHeader, HveKey, HveMasterKey, HvePublicKey,
};
use crate::par::Execution;
use crate::wire::{Reader, Tag, WireError, Writer};

pub const HVE_LABEL: &[u8] = b"dbra/hve/v1";
pub const HIBE_LABEL: &[u8] = b"dbra/hibe/v1";
const OUTER_AD: &[u8] = b"dbra/outer/v1";
const INNER_AD: &[u8] = b"dbra/inner/v1";
const WILDCARD: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemeError {
    #[error("invalid schema: {0}")]
    InvalidSchema(&'static str),
    #[error("vector has {found} dimensions, schema has {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("symbol {symbol} is outside the domain of dimension {dimension}")]
    SymbolOutOfDomain { dimension: usize, symbol: u32 },
    #[error("distance {d} outside 1..={d_max}")]
    BadDistance { d: u32, d_max: u32 },
    #[error("delegation target {target} must exceed current distance {current}")]
    NotIncreasing { current: u32, target: u32 },
    #[error("plaintext must not be empty")]
    EmptyPlaintext,
    #[error("objects from different epochs")]
    EpochMismatch,
    #[error("key does not belong to this public key's schema")]
    SchemaMismatch,
    #[error(transparent)]
    Hibe(#[from] HibeError),
    #[error(transparent)]
    Hve(#[from] HveError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dimension {
    pub name: String,
    /// Size of the symbol domain `{0, .., arity - 1}`; symbol 0 means "none".
    pub arity: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    dimensions: Vec<Dimension>,
    d_max: u32,
}

fn bits_for(arity: u32) -> usize {
    (32 - (arity - 1).leading_zeros()) as usize
}

impl AttributeSchema {
    pub fn new(dimensions: Vec<Dimension>, d_max: u32) -> Result<Self, SchemeError> {
        if dimensions.is_empty() {
            return Err(SchemeError::InvalidSchema("no dimensions"));
        }
        if dimensions
            .iter()
            .any(|d| d.arity < 2 || d.arity == WILDCARD)
        {
            return Err(SchemeError::InvalidSchema(
                "every domain needs at least two symbols",
            ));
        }
        if d_max < 1 || d_max > u16::MAX as u32 {
            return Err(SchemeError::InvalidSchema("maximum distance out of range"));
        }
        Ok(AttributeSchema { dimensions, d_max })
    }

    /// `n` binary dimensions named `cond1..condn`.
    pub fn binary(n: usize, d_max: u32) -> Result<Self, SchemeError> {
        Self::new(
            (1..=n)
                .map(|i| Dimension {
                    name: format!("cond{i}"),
                    arity: 2,
                })
                .collect(),
            d_max,
        )
    }

    pub fn dimensions(&self) -> &[Dimension] {
        &self.dimensions
    }

    pub fn d_max(&self) -> u32 {
        self.d_max
    }

    pub fn bit_width(&self) -> usize {
        self.dimensions.iter().map(|d| bits_for(d.arity)).sum()
    }

    fn check_len(&self, n: usize) -> Result<(), SchemeError> {
        if n != self.dimensions.len() {
            return Err(SchemeError::DimensionMismatch {
                found: n,
                expected: self.dimensions.len(),
            });
        }
        Ok(())
    }

    fn check_symbol(&self, dimension: usize, symbol: u32) -> Result<(), SchemeError> {
        if symbol >= self.dimensions[dimension].arity {
            return Err(SchemeError::SymbolOutOfDomain { dimension, symbol });
        }
        Ok(())
    }

    fn check_distance(&self, d: u32) -> Result<(), SchemeError> {
        if d < 1 || d > self.d_max {
            return Err(SchemeError::BadDistance {
                d,
                d_max: self.d_max,
            });
        }
        Ok(())
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.d_max.to_be_bytes());
        out.extend_from_slice(&(self.dimensions.len() as u16).to_be_bytes());
        for d in &self.dimensions {
            out.extend_from_slice(&(d.name.len() as u16).to_be_bytes());
            out.extend_from_slice(d.name.as_bytes());
            out.extend_from_slice(&d.arity.to_be_bytes());
        }
        out
    }

    fn from_bytes(b: &[u8]) -> Result<Self, SchemeError> {
        let bad = || SchemeError::Wire(WireError::Malformed("schema"));
        let mut cur = b;
        let mut take = |n: usize| -> Result<&[u8], SchemeError> {
            if cur.len() < n {
                return Err(bad());
            }
            let (h, t) = cur.split_at(n);
            cur = t;
            Ok(h)
        };
        let d_max = u32::from_be_bytes(take(4)?.try_into().unwrap());
        let n = u16::from_be_bytes(take(2)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u16::from_be_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad())?;
            let arity = u32::from_be_bytes(take(4)?.try_into().unwrap());
            dims.push(Dimension { name, arity });
        }
        if !cur.is_empty() {
            return Err(bad());
        }
        Self::new(dims, d_max)
    }
}

/// Ciphertext label `(x, d)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PolicyPair {
    pub x: Vec<u32>,
    pub d: u32,
}

/// Key label `(y, d)`; `None` in `y` is the wildcard.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KeyPattern {
    pub y: Vec<Option<u32>>,
    pub d: u32,
}

impl PolicyPair {
    pub fn new(x: Vec<u32>, d: u32) -> Self {
        PolicyPair { x, d }
    }

    fn validate(&self, schema: &AttributeSchema) -> Result<(), SchemeError> {
        schema.check_len(self.x.len())?;
        for (i, &s) in self.x.iter().enumerate() {
            schema.check_symbol(i, s)?;
        }
        schema.check_distance(self.d)
    }
}

impl KeyPattern {
    pub fn new(y: Vec<Option<u32>>, d: u32) -> Self {
        KeyPattern { y, d }
    }

    fn validate(&self, schema: &AttributeSchema) -> Result<(), SchemeError> {
        schema.check_len(self.y.len())?;
        for (i, s) in self.y.iter().enumerate() {
            if let Some(s) = s {
                schema.check_symbol(i, *s)?;
            }
        }
        schema.check_distance(self.d)
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.y.len());
        out.extend_from_slice(&self.d.to_be_bytes());
        out.extend_from_slice(&(self.y.len() as u16).to_be_bytes());
        for s in &self.y {
            out.extend_from_slice(&s.unwrap_or(WILDCARD).to_be_bytes());
        }
        out
    }

    fn from_bytes(b: &[u8]) -> Result<Self, SchemeError> {
        let bad = || SchemeError::Wire(WireError::Malformed("key pattern"));
        if b.len() < 6 {
            return Err(bad());
        }
        let d = u32::from_be_bytes(b[..4].try_into().unwrap());
        let n = u16::from_be_bytes([b[4], b[5]]) as usize;
        if b.len() != 6 + 4 * n {
            return Err(bad());
        }
        let y = b[6..]
            .chunks(4)
            .map(|c| match u32::from_be_bytes(c.try_into().unwrap()) {
                WILDCARD => None,
                v => Some(v),
            })
            .collect();
        Ok(KeyPattern { y, d })
    }
}

fn push_bits(out: &mut Vec<bool>, value: u32, width: usize) {
    for i in (0..width).rev() {
        out.push((value >> i) & 1 == 1);
    }
}

/// Each symbol becomes its big-endian index in `ceil(log2 |domain|)` bits.
pub fn encode_attributes(
    schema: &AttributeSchema,
    x: &[u32],
) -> Result<BitAttributeVector, SchemeError> {
    schema.check_len(x.len())?;
    let mut bits = Vec::with_capacity(schema.bit_width());
    for (i, (&s, dim)) in x.iter().zip(&schema.dimensions).enumerate() {
        schema.check_symbol(i, s)?;
        push_bits(&mut bits, s, bits_for(dim.arity));
    }
    Ok(BitAttributeVector(bits))
}

/// Like [`encode_attributes`]; a wildcard symbol becomes all-wildcard bits.
pub fn encode_pattern(
    schema: &AttributeSchema,
    y: &[Option<u32>],
) -> Result<BitPattern, SchemeError> {
    schema.check_len(y.len())?;
    let mut out = Vec::with_capacity(schema.bit_width());
    for (i, (s, dim)) in y.iter().zip(&schema.dimensions).enumerate() {
        let width = bits_for(dim.arity);
        match s {
            Some(s) => {
                schema.check_symbol(i, *s)?;
                let mut bits = Vec::with_capacity(width);
                push_bits(&mut bits, *s, width);
                out.extend(bits.into_iter().map(Some));
            }
            None => out.extend(std::iter::repeat_n(None, width)),
        }
    }
    Ok(BitPattern(out))
}

/// `(for all j: y_j = * or y_j = x_j) and d_key <= d_ct`.
pub fn match_oracle(
    schema: &AttributeSchema,
    p: &PolicyPair,
    k: &KeyPattern,
) -> Result<bool, SchemeError> {
    p.validate(schema)?;
    k.validate(schema)?;
    Ok(k.d <= p.d && p.x.iter().zip(&k.y).all(|(x, y)| y.is_none_or(|y| y == *x)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbraPublicKey {
    schema: AttributeSchema,
    hve: HvePublicKey,
    hibe: HibePublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbraMasterKey {
    schema: AttributeSchema,
    hve: HveMasterKey,
    hibe: HibeMasterKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbraKey {
    hve_key: HveKey,
    hibe_key: HibeKey,
    pattern: KeyPattern,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbraCiphertext {
    hibe_header: HibeHeader,
    outer_nonce: [u8; NONCE_LEN],
    outer: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct DbraRevocation {
    pub pk: DbraPublicKey,
    pub msk: DbraMasterKey,
    pub ciphertexts: Vec<DbraCiphertext>,
    pub keys: Vec<DbraKey>,
}

impl DbraPublicKey {
    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn epoch(&self) -> u32 {
        self.hibe.epoch()
    }

    pub fn hve(&self) -> &HvePublicKey {
        &self.hve
    }

    pub fn hibe(&self) -> &HibePublicKey {
        &self.hibe
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        Ok(Writer::new(Tag::DbraPublicKey, self.epoch())
            .bytes(&self.schema.to_bytes())?
            .bytes(&self.hve.to_bytes()?)?
            .bytes(&self.hibe.to_bytes()?)?
            .finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SchemeError> {
        let mut r = Reader::open(bytes, Tag::DbraPublicKey)?;
        let schema = AttributeSchema::from_bytes(r.bytes()?)?;
        let hve = HvePublicKey::from_bytes(r.bytes()?)?;
        let hibe = HibePublicKey::from_bytes(r.bytes()?)?;
        let epoch = r.epoch;
        r.finish()?;
        if hibe.epoch() != epoch
            || hve.width() != schema.bit_width()
            || hibe.max_depth() != schema.d_max() as usize
        {
            return Err(SchemeError::SchemaMismatch);
        }
        Ok(DbraPublicKey { schema, hve, hibe })
    }
}

impl DbraMasterKey {
    pub fn epoch(&self) -> u32 {
        self.hibe.epoch()
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        Ok(Writer::new(Tag::DbraMasterKey, self.epoch())
            .bytes(&self.schema.to_bytes())?
            .bytes(&self.hve.to_bytes()?)?
            .bytes(&self.hibe.to_bytes()?)?
            .finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SchemeError> {
        let mut r = Reader::open(bytes, Tag::DbraMasterKey)?;
        let schema = AttributeSchema::from_bytes(r.bytes()?)?;
        let hve = HveMasterKey::from_bytes(r.bytes()?)?;
        let hibe = HibeMasterKey::from_bytes(r.bytes()?)?;
        r.finish()?;
        Ok(DbraMasterKey { schema, hve, hibe })
    }
}

impl DbraKey {
    pub fn pattern(&self) -> &KeyPattern {
        &self.pattern
    }

    pub fn epoch(&self) -> u32 {
        self.hibe_key.epoch()
    }

    pub fn hve_key(&self) -> &HveKey {
        &self.hve_key
    }

    pub fn hibe_key(&self) -> &HibeKey {
        &self.hibe_key
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        Ok(Writer::new(Tag::DbraKey, self.epoch())
            .bytes(&self.pattern.to_bytes())?
            .bytes(&self.hve_key.to_bytes()?)?
            .bytes(&self.hibe_key.to_bytes()?)?
            .finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SchemeError> {
        let mut r = Reader::open(bytes, Tag::DbraKey)?;
        let pattern = KeyPattern::from_bytes(r.bytes()?)?;
        let hve_key = HveKey::from_bytes(r.bytes()?)?;
        let hibe_key = HibeKey::from_bytes(r.bytes()?)?;
        let epoch = r.epoch;
        r.finish()?;
        if hibe_key.epoch() != epoch || hibe_key.identity().len() != pattern.d as usize {
            return Err(WireError::Malformed("key distance").into());
        }
        Ok(DbraKey {
            hve_key,
            hibe_key,
            pattern,
        })
    }
}

impl DbraCiphertext {
    pub fn epoch(&self) -> u32 {
        self.hibe_header.epoch()
    }

    /// The distance bound, which travels in clear.
    pub fn distance(&self) -> usize {
        self.hibe_header.depth()
    }

    pub fn hibe_header(&self) -> &HibeHeader {
        &self.hibe_header
    }

    /// The revocation-invariant authenticated part.
    pub fn sealed_body(&self) -> (&[u8; NONCE_LEN], &[u8]) {
        (&self.outer_nonce, &self.outer)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        Ok(Writer::new(Tag::Ciphertext, self.epoch())
            .bytes(&self.hibe_header.to_bytes()?)?
            .bytes(&self.outer_nonce)?
            .bytes(&self.outer)?
            .finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SchemeError> {
        let mut r = Reader::open(bytes, Tag::Ciphertext)?;
        let hibe_header = HibeHeader::from_bytes(r.bytes()?)?;
        let outer_nonce = r.nonce()?;
        let outer = r.bytes()?.to_vec();
        let epoch = r.epoch;
        r.finish()?;
        if hibe_header.epoch() != epoch {
            return Err(WireError::Malformed("ciphertext epoch").into());
        }
        Ok(DbraCiphertext {
            hibe_header,
            outer_nonce,
            outer,
        })
    }
}

pub fn setup<R: RngCore + CryptoRng + ?Sized>(
    schema: &AttributeSchema,
    ctx: &GroupContext,
    rng: &mut R,
) -> Result<(DbraPublicKey, DbraMasterKey), SchemeError> {
    let (hve_pk, hve_msk) = hve::setup(schema.bit_width(), ctx, rng)?;
    let (hibe_pk, hibe_msk) = hibe::setup(schema.d_max() as usize, ctx, rng)?;
    Ok((
        DbraPublicKey {
            schema: schema.clone(),
            hve: hve_pk,
            hibe: hibe_pk,
        },
        DbraMasterKey {
            schema: schema.clone(),
            hve: hve_msk,
            hibe: hibe_msk,
        },
    ))
}

pub fn encrypt<R: RngCore + CryptoRng + ?Sized>(
    pk: &DbraPublicKey,
    p: &PolicyPair,
    plaintext: &[u8],
    rng: &mut R,
) -> Result<DbraCiphertext, SchemeError> {
    if plaintext.is_empty() {
        return Err(SchemeError::EmptyPlaintext);
    }
    p.validate(&pk.schema)?;
    let bits = encode_attributes(&pk.schema, &p.x)?;

    let (k_hve, hve_header) = hve::encap(&pk.hve, &bits, rng)?;
    let inner_nonce = random_nonce(rng);
    let inner = aead_seal(
        &derive_key(&k_hve, HVE_LABEL).expect("label"),
        &inner_nonce,
        INNER_AD,
        plaintext,
    );

    let hve_bytes = hve_header.to_bytes()?;
    let mut body = Vec::with_capacity(4 + hve_bytes.len() + NONCE_LEN + inner.len());
    body.extend_from_slice(&(hve_bytes.len() as u32).to_be_bytes());
    body.extend_from_slice(&hve_bytes);
    body.extend_from_slice(&inner_nonce);
    body.extend_from_slice(&inner);

    let (k_hibe, hibe_header) = hibe::encap(&pk.hibe, &HibeIdentity::unary(p.d as usize), rng)?;
    let outer_nonce = random_nonce(rng);
    let outer = aead_seal(
        &derive_key(&k_hibe, HIBE_LABEL).expect("label"),
        &outer_nonce,
        OUTER_AD,
        &body,
    );
    Ok(DbraCiphertext {
        hibe_header,
        outer_nonce,
        outer,
    })
}

pub fn derive<R: RngCore + CryptoRng + ?Sized>(
    pk: &DbraPublicKey,
    msk: &DbraMasterKey,
    k: &KeyPattern,
    rng: &mut R,
) -> Result<DbraKey, SchemeError> {
    if pk.schema != msk.schema {
        return Err(SchemeError::SchemaMismatch);
    }
    if pk.epoch() != msk.epoch() {
        return Err(SchemeError::EpochMismatch);
    }
    k.validate(&pk.schema)?;
    let bits = encode_pattern(&pk.schema, &k.y)?;
    let hve_key = hve::derive(&msk.hve, &bits, rng)?;
    let hibe_key = hibe::derive(&pk.hibe, &msk.hibe, &HibeIdentity::unary(k.d as usize), rng)?;
    Ok(DbraKey {
        hve_key,
        hibe_key,
        pattern: k.clone(),
    })
}

/// Opens `ct` or fails with the one opaque [`AccessDenied`] value.
pub fn decrypt(key: &DbraKey, ct: &DbraCiphertext) -> Result<Vec<u8>, AccessDenied> {
    let k_hibe = hibe::decap(&key.hibe_key, &ct.hibe_header);
    let hibe_key = derive_key(&k_hibe, HIBE_LABEL).map_err(|_| AccessDenied)?;
    let body = aead_open(&hibe_key, &ct.outer_nonce, OUTER_AD, &ct.outer)?;

    if body.len() < 4 {
        return Err(AccessDenied);
    }
    let hve_len = u32::from_be_bytes(body[..4].try_into().unwrap()) as usize;
    let rest = &body[4..];
    if rest.len() < hve_len + NONCE_LEN {
        return Err(AccessDenied);
    }
    let hve_header = HveHeader::from_bytes(&rest[..hve_len]).map_err(|_| AccessDenied)?;
    let inner_nonce: [u8; NONCE_LEN] = rest[hve_len..hve_len + NONCE_LEN].try_into().unwrap();
    let inner = &rest[hve_len + NONCE_LEN..];

    let k_hve = hve::decap(&key.hve_key, &hve_header);
    let hve_key = derive_key(&k_hve, HVE_LABEL).map_err(|_| AccessDenied)?;
    aead_open(&hve_key, &inner_nonce, INNER_AD, inner)
}

/// Extends a key for distance `d` to `d_new > d`, without the master key.
pub fn delegate<R: RngCore + CryptoRng + ?Sized>(
    pk: &DbraPublicKey,
    key: &DbraKey,
    d_new: u32,
    rng: &mut R,
) -> Result<DbraKey, SchemeError> {
    let current = key.pattern.d;
    if d_new <= current {
        return Err(SchemeError::NotIncreasing {
            current,
            target: d_new,
        });
    }
    pk.schema.check_distance(d_new)?;
    let ext = vec![Scalar::one(); (d_new - current) as usize];
    let hibe_key = hibe::delegate(&pk.hibe, &key.hibe_key, &ext, rng)?;
    Ok(DbraKey {
        hve_key: key.hve_key.clone(),
        hibe_key,
        pattern: KeyPattern {
            y: key.pattern.y.clone(),
            d: d_new,
        },
    })
}

/// Rotates to a new epoch. Only the given keys survive; the ciphertexts keep
/// their plaintexts.
pub fn revoke<R: RngCore + CryptoRng + ?Sized>(
    pk: &DbraPublicKey,
    msk: &DbraMasterKey,
    cts: &[DbraCiphertext],
    keys: &[DbraKey],
    rng: &mut R,
    exec: Execution,
) -> Result<DbraRevocation, SchemeError> {
    let headers: Vec<HibeHeader> = cts.iter().map(|c| c.hibe_header.clone()).collect();
    let hibe_keys: Vec<HibeKey> = keys.iter().map(|k| k.hibe_key.clone()).collect();
    let out =
        hibe::revoke(&pk.hibe, &msk.hibe, &headers, &hibe_keys, rng, exec).map_err(
            |e| match e {
                HibeError::EpochMismatch => SchemeError::EpochMismatch,
                e => e.into(),
            },
        )?;
    Ok(DbraRevocation {
        pk: DbraPublicKey {
            schema: pk.schema.clone(),
            hve: pk.hve.clone(),
            hibe: out.pk,
        },
        msk: DbraMasterKey {
            schema: msk.schema.clone(),
            hve: msk.hve.clone(),
            hibe: out.msk,
        },
        ciphertexts: cts
            .iter()
            .zip(out.headers)
            .map(|(c, hibe_header)| DbraCiphertext {
                hibe_header,
                outer_nonce: c.outer_nonce,
                outer: c.outer.clone(),
            })
            .collect(),
        keys: keys
            .iter()
            .zip(out.keys)
            .map(|(k, hibe_key)| DbraKey {
                hve_key: k.hve_key.clone(),
                hibe_key,
                pattern: k.pattern.clone(),
            })
            .collect(),
    })
}
