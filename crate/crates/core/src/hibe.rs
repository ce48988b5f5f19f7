//! Hierarchical identity-based KEM with constant-size headers and batch
//! revocation by re-randomizing the master secret.
//!
//! Public parameters are `g, g1 = g^alpha, g2, g3, h_1..h_l`; the master secret
//! is `g2^alpha`. A key for `(I_1..I_k)` is
//! `(g2^alpha * (h_1^I_1 .. h_k^I_k * g3)^r, g^r, h_{k+1}^r .. h_l^r)` and a
//! header is `(Omega = e(g1, g2)^s * K, g^s, (h_1^I_1 .. h_k^I_k * g3)^s)`.
//!
//! Revocation picks a fresh `beta`, moves the master secret to `alpha + beta`,
//! multiplies every surviving key head by `g2^beta` and every header's `Omega`
//! by `e(g^s, g2^beta)`. The encapsulated session values stay the same; keys
//! left out of the batch stop working on updated headers and vice versa.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::group::{multi_pair, pair, GroupContext, Scalar, Slot, SourceElement, TargetElement};
use crate::par::Execution;
use crate::wire::{Reader, Tag, WireError, Writer};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HibeError {
    #[error("maximum depth must be at least 1")]
    InvalidMaxDepth,
    #[error("identity of depth {depth} exceeds the maximum depth {max}")]
    DepthOverflow { depth: usize, max: usize },
    #[error("identity must have at least one component")]
    EmptyIdentity,
    #[error("identity components must be nonzero")]
    ZeroComponent,
    #[error("objects from different epochs")]
    EpochMismatch,
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Identity vector; each component is a nonzero scalar.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HibeIdentity(Vec<Scalar>);

impl HibeIdentity {
    pub fn new(components: Vec<Scalar>) -> Result<Self, HibeError> {
        if components.iter().any(Scalar::is_zero) {
            return Err(HibeError::ZeroComponent);
        }
        Ok(HibeIdentity(components))
    }

    /// `1^depth`, the unary identity used for distances.
    pub fn unary(depth: usize) -> Self {
        HibeIdentity(vec![Scalar::one(); depth])
    }

    pub fn components(&self) -> &[Scalar] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_prefix_of(&self, other: &HibeIdentity) -> bool {
        other.0.starts_with(&self.0)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|s| s.to_bytes()).collect()
    }

    fn from_bytes(b: &[u8]) -> Result<Self, HibeError> {
        if !b.len().is_multiple_of(32) {
            return Err(WireError::Malformed("identity").into());
        }
        let comps = b
            .chunks(32)
            .map(Scalar::from_bytes)
            .collect::<Result<Vec<_>, _>>()
            .map_err(WireError::from)?;
        HibeIdentity::new(comps)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HibePublicKey {
    g: SourceElement,
    g1: SourceElement,
    g2: SourceElement,
    g3: SourceElement,
    h: Vec<SourceElement>,
    epoch: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HibeMasterKey {
    secret: SourceElement,
    alpha: Scalar,
    epoch: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HibeKey {
    identity: HibeIdentity,
    head: SourceElement,
    companion: SourceElement,
    delegation: Vec<SourceElement>,
    epoch: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HibeHeader {
    omega: TargetElement,
    c_s: SourceElement,
    c_id: SourceElement,
    depth: usize,
    epoch: u32,
}

/// Blinding elements `g2^beta` and `g^beta` of one revocation batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevocationUpdate {
    beta_blind_g2: SourceElement,
    beta_blind_g: SourceElement,
}

/// Output of [`revoke`].
#[derive(Debug, Clone)]
pub struct HibeRevocation {
    pub pk: HibePublicKey,
    pub msk: HibeMasterKey,
    pub headers: Vec<HibeHeader>,
    pub keys: Vec<HibeKey>,
}

impl HibePublicKey {
    pub fn max_depth(&self) -> usize {
        self.h.len()
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn g1(&self) -> &SourceElement {
        &self.g1
    }

    pub fn g2(&self) -> &SourceElement {
        &self.g2
    }

    fn check_depth(&self, depth: usize) -> Result<(), HibeError> {
        if depth > self.max_depth() {
            return Err(HibeError::DepthOverflow {
                depth,
                max: self.max_depth(),
            });
        }
        Ok(())
    }

    /// `h_1^I_1 ... h_k^I_k * g3`.
    fn identity_base(&self, id: &[Scalar]) -> SourceElement {
        id.iter()
            .zip(&self.h)
            .fold(self.g3, |acc, (i, h)| acc.mul(&h.pow(i)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        let mut w = Writer::new(Tag::HibePublicKey, self.epoch);
        w.u16(self.max_depth() as u16)?
            .source(&self.g)?
            .source(&self.g1)?
            .source(&self.g2)?
            .source(&self.g3)?;
        for h in &self.h {
            w.source(h)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HibeError> {
        let mut r = Reader::open(bytes, Tag::HibePublicKey)?;
        let depth = r.u16()? as usize;
        if depth == 0 {
            return Err(HibeError::InvalidMaxDepth);
        }
        let g = r.source(Slot::Left)?;
        let g1 = r.source(Slot::Left)?;
        let g2 = r.source(Slot::Right)?;
        let g3 = r.source(Slot::Right)?;
        let h = (0..depth)
            .map(|_| r.source(Slot::Right))
            .collect::<Result<Vec<_>, _>>()?;
        let epoch = r.epoch;
        r.finish()?;
        Ok(HibePublicKey {
            g,
            g1,
            g2,
            g3,
            h,
            epoch,
        })
    }
}

impl HibeMasterKey {
    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn alpha(&self) -> &Scalar {
        &self.alpha
    }

    pub fn secret(&self) -> &SourceElement {
        &self.secret
    }

    /// The master secret seen as a key for the empty identity.
    pub fn master_view(&self, pk: &HibePublicKey) -> HibeKey {
        HibeKey {
            identity: HibeIdentity::default(),
            head: self.secret,
            companion: pk.g.identity_like(),
            delegation: vec![pk.g2.identity_like(); pk.max_depth()],
            epoch: self.epoch,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        Ok(Writer::new(Tag::HibeMasterKey, self.epoch)
            .source(&self.secret)?
            .scalar(&self.alpha)?
            .finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HibeError> {
        let mut r = Reader::open(bytes, Tag::HibeMasterKey)?;
        let secret = r.source(Slot::Right)?;
        let alpha = r.scalar()?;
        let epoch = r.epoch;
        r.finish()?;
        Ok(HibeMasterKey {
            secret,
            alpha,
            epoch,
        })
    }
}

impl HibeKey {
    pub fn identity(&self) -> &HibeIdentity {
        &self.identity
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn head(&self) -> &SourceElement {
        &self.head
    }

    pub fn delegation_len(&self) -> usize {
        self.delegation.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        let mut w = Writer::new(Tag::HibeKey, self.epoch);
        w.bytes(&self.identity.to_bytes())?
            .source(&self.head)?
            .source(&self.companion)?;
        for b in &self.delegation {
            w.source(b)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HibeError> {
        let mut r = Reader::open(bytes, Tag::HibeKey)?;
        let identity = HibeIdentity::from_bytes(r.bytes()?)?;
        let head = r.source(Slot::Right)?;
        let companion = r.source(Slot::Left)?;
        let mut delegation = Vec::new();
        while !r.is_empty() {
            delegation.push(r.source(Slot::Right)?);
        }
        let epoch = r.epoch;
        r.finish()?;
        Ok(HibeKey {
            identity,
            head,
            companion,
            delegation,
            epoch,
        })
    }
}

impl HibeHeader {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn omega(&self) -> &TargetElement {
        &self.omega
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        Ok(Writer::new(Tag::HibeHeader, self.epoch)
            .u16(self.depth as u16)?
            .target(&self.omega)?
            .source(&self.c_s)?
            .source(&self.c_id)?
            .finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HibeError> {
        let mut r = Reader::open(bytes, Tag::HibeHeader)?;
        let depth = r.u16()? as usize;
        let omega = r.target()?;
        let c_s = r.source(Slot::Left)?;
        let c_id = r.source(Slot::Right)?;
        let epoch = r.epoch;
        r.finish()?;
        Ok(HibeHeader {
            omega,
            c_s,
            c_id,
            depth,
            epoch,
        })
    }
}

impl RevocationUpdate {
    fn new(pk: &HibePublicKey, beta: &Scalar) -> Self {
        RevocationUpdate {
            beta_blind_g2: pk.g2.pow(beta),
            beta_blind_g: pk.g.pow(beta),
        }
    }

    pub fn apply_to_public(&self, pk: &HibePublicKey) -> HibePublicKey {
        HibePublicKey {
            g1: pk.g1.mul(&self.beta_blind_g),
            epoch: pk.epoch + 1,
            ..pk.clone()
        }
    }

    pub fn apply_to_key(&self, key: &HibeKey) -> HibeKey {
        HibeKey {
            head: key.head.mul(&self.beta_blind_g2),
            epoch: key.epoch + 1,
            ..key.clone()
        }
    }

    pub fn apply_to_header(&self, header: &HibeHeader) -> HibeHeader {
        let blind = pair(&header.c_s, &self.beta_blind_g2).unwrap_or_else(|_| TargetElement::one());
        HibeHeader {
            omega: header.omega.mul(&blind),
            epoch: header.epoch + 1,
            ..header.clone()
        }
    }
}

pub fn setup<R: RngCore + CryptoRng + ?Sized>(
    max_depth: usize,
    ctx: &GroupContext,
    rng: &mut R,
) -> Result<(HibePublicKey, HibeMasterKey), HibeError> {
    if max_depth < 1 {
        return Err(HibeError::InvalidMaxDepth);
    }
    if max_depth > u16::MAX as usize {
        return Err(HibeError::DepthOverflow {
            depth: max_depth,
            max: u16::MAX as usize,
        });
    }
    let g = ctx.generator();
    let right = |rng: &mut R| g.pow(&Scalar::random_nonzero(rng)).right_only();
    let g2 = right(rng);
    let g3 = right(rng);
    let h = (0..max_depth).map(|_| right(rng)).collect();
    let alpha = Scalar::random_nonzero(rng);
    let pk = HibePublicKey {
        g: g.left_only(),
        g1: g.pow(&alpha).left_only(),
        g2,
        g3,
        h,
        epoch: 0,
    };
    let msk = HibeMasterKey {
        secret: g2.pow(&alpha),
        alpha,
        epoch: 0,
    };
    Ok((pk, msk))
}

pub fn derive<R: RngCore + CryptoRng + ?Sized>(
    pk: &HibePublicKey,
    msk: &HibeMasterKey,
    id: &HibeIdentity,
    rng: &mut R,
) -> Result<HibeKey, HibeError> {
    if id.is_empty() {
        return Err(HibeError::EmptyIdentity);
    }
    pk.check_depth(id.len())?;
    delegate(pk, &msk.master_view(pk), id.components(), rng)
}

/// Extends `key` to `key.identity || extension` with fresh randomness.
pub fn delegate<R: RngCore + CryptoRng + ?Sized>(
    pk: &HibePublicKey,
    key: &HibeKey,
    extension: &[Scalar],
    rng: &mut R,
) -> Result<HibeKey, HibeError> {
    if extension.is_empty() {
        return Ok(key.clone());
    }
    if extension.iter().any(Scalar::is_zero) {
        return Err(HibeError::ZeroComponent);
    }
    let k = key.identity.len();
    let new_len = k + extension.len();
    pk.check_depth(new_len)?;
    if key.delegation.len() + k < new_len {
        return Err(HibeError::DepthOverflow {
            depth: new_len,
            max: k + key.delegation.len(),
        });
    }
    let mut components = key.identity.0.clone();
    components.extend_from_slice(extension);

    let t = Scalar::random_nonzero(rng);
    let mut head = key.head;
    for (b, i) in key.delegation.iter().zip(extension) {
        head = head.mul(&b.pow(i));
    }
    head = head.mul(&pk.identity_base(&components).pow(&t));
    let companion = key.companion.mul(&pk.g.pow(&t));
    let delegation = key.delegation[extension.len()..]
        .iter()
        .zip(&pk.h[new_len..])
        .map(|(b, h)| b.mul(&h.pow(&t)))
        .collect();
    Ok(HibeKey {
        identity: HibeIdentity(components),
        head,
        companion,
        delegation,
        epoch: key.epoch,
    })
}

pub fn encap<R: RngCore + CryptoRng + ?Sized>(
    pk: &HibePublicKey,
    id: &HibeIdentity,
    rng: &mut R,
) -> Result<(TargetElement, HibeHeader), HibeError> {
    if id.is_empty() {
        return Err(HibeError::EmptyIdentity);
    }
    pk.check_depth(id.len())?;
    let s = Scalar::random_nonzero(rng);
    let z = pair(&pk.g1, &pk.g2).expect("public key slots");
    let session = z.pow(&Scalar::random(rng));
    let header = HibeHeader {
        omega: z.pow(&s).mul(&session),
        c_s: pk.g.pow(&s),
        c_id: pk.identity_base(id.components()).pow(&s),
        depth: id.len(),
        epoch: pk.epoch,
    };
    Ok((session, header))
}

/// Recovers the session when the key identity is a prefix of the header's
/// `1^depth`; any other combination yields an unrelated target value.
///
/// A shallower key is extended to the header depth without fresh randomness.
pub fn decap(key: &HibeKey, header: &HibeHeader) -> TargetElement {
    let k = key.identity.len();
    let mut head = key.head;
    if k <= header.depth && header.depth - k <= key.delegation.len() {
        for b in &key.delegation[..header.depth - k] {
            head = head.mul(b);
        }
    }
    multi_pair(&[(key.companion, header.c_id), (header.c_s.inverse(), head)])
        .map(|p| header.omega.mul(&p))
        .unwrap_or(header.omega)
}

/// Moves the system to a new epoch, updating exactly the given headers and keys.
pub fn revoke<R: RngCore + CryptoRng + ?Sized>(
    pk: &HibePublicKey,
    msk: &HibeMasterKey,
    headers: &[HibeHeader],
    keys: &[HibeKey],
    rng: &mut R,
    exec: Execution,
) -> Result<HibeRevocation, HibeError> {
    let epoch = pk.epoch;
    if msk.epoch != epoch
        || headers.iter().any(|h| h.epoch != epoch)
        || keys.iter().any(|k| k.epoch != epoch)
    {
        return Err(HibeError::EpochMismatch);
    }
    let beta = Scalar::random_nonzero(rng);
    let update = RevocationUpdate::new(pk, &beta);
    let msk = HibeMasterKey {
        secret: msk.secret.mul(&update.beta_blind_g2),
        alpha: msk.alpha + beta,
        epoch: epoch + 1,
    };
    Ok(HibeRevocation {
        pk: update.apply_to_public(pk),
        msk,
        headers: exec.map(headers, |h| update.apply_to_header(h)),
        keys: exec.map(keys, |k| update.apply_to_key(k)),
    })
}
