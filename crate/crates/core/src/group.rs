//! Bilinear-group substrate shared by the HVE and HIBE layers.
//!
//! The schemes above are written against a symmetric pairing `e: G x G -> GT`.
//! BLS12-381 is asymmetric, so a [`SourceElement`] carries up to two twins with
//! the same discrete logarithm: a left twin in G1 and a right twin in G2.
//! [`pair`] always consumes the left twin of its first argument and the right
//! twin of its second. Elements only carry the twins they are ever paired on;
//! combining elements keeps the twins both operands share.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use ark_bls12_381::{Bls12_381, Fr, G1Affine, G1Projective, G2Affine, G2Projective};
use ark_ec::pairing::{Pairing, PairingOutput};
use ark_ec::{CurveGroup, PrimeGroup};
use ark_ff::{AdditiveGroup, BigInteger, Field, PrimeField};
use ark_serialize::{CanonicalDeserialize, CanonicalSerialize};
use ark_std::UniformRand;
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256, Sha512};
use thiserror::Error;

pub const SCALAR_LEN: usize = 32;
pub const G1_LEN: usize = 48;
pub const G2_LEN: usize = 96;
pub const GT_LEN: usize = 576;
pub const NONCE_LEN: usize = 12;
pub const KEY_LEN: usize = 32;

const SLOT_LEFT: u8 = 0x01;
const SLOT_RIGHT: u8 = 0x02;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("unsupported security level: {0} bits")]
    UnsupportedSecurityLevel(u16),
    #[error("pairing slot mismatch")]
    SlotMismatch,
    #[error("key derivation label must not be empty")]
    EmptyLabel,
    #[error("malformed {0} encoding")]
    Malformed(&'static str),
}

/// The single failure value for every authenticated-decryption path.
///
/// It carries no cause, so a failed open caused by a wrong key, a corrupted
/// ciphertext, a stale epoch or a policy mismatch all look the same.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AccessDenied;

impl AccessDenied {
    pub const MESSAGE: &'static str = "access denied";

    pub fn to_bytes(self) -> Vec<u8> {
        Self::MESSAGE.as_bytes().to_vec()
    }
}

impl fmt::Display for AccessDenied {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(Self::MESSAGE)
    }
}

impl std::error::Error for AccessDenied {}

/// Integer modulo the group order.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct Scalar(pub(crate) Fr);

impl Scalar {
    pub fn zero() -> Self {
        Scalar(Fr::ZERO)
    }

    pub fn one() -> Self {
        Scalar(Fr::ONE)
    }

    pub fn from_u64(v: u64) -> Self {
        Scalar(Fr::from(v))
    }

    pub fn random<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        Scalar(Fr::rand(rng))
    }

    /// Uniform nonzero scalar.
    pub fn random_nonzero<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let s = Self::random(rng);
            if !s.is_zero() {
                return s;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0 == Fr::ZERO
    }

    pub fn inverse(&self) -> Option<Self> {
        self.0.inverse().map(Scalar)
    }

    pub fn to_bytes(&self) -> [u8; SCALAR_LEN] {
        let be = self.0.into_bigint().to_bytes_be();
        let mut out = [0u8; SCALAR_LEN];
        out[SCALAR_LEN - be.len()..].copy_from_slice(&be);
        out
    }

    /// Parses a 32-byte big-endian value, rejecting anything `>= p`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GroupError> {
        if bytes.len() != SCALAR_LEN {
            return Err(GroupError::Malformed("scalar"));
        }
        let s = Scalar(Fr::from_be_bytes_mod_order(bytes));
        if s.to_bytes()[..] != bytes[..] {
            return Err(GroupError::Malformed("scalar"));
        }
        Ok(s)
    }
}

impl Add for Scalar {
    type Output = Scalar;
    fn add(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 + rhs.0)
    }
}

impl Sub for Scalar {
    type Output = Scalar;
    fn sub(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 - rhs.0)
    }
}

impl Mul for Scalar {
    type Output = Scalar;
    fn mul(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 * rhs.0)
    }
}

impl Neg for Scalar {
    type Output = Scalar;
    fn neg(self) -> Scalar {
        Scalar(-self.0)
    }
}

/// Hashes arbitrary bytes to a scalar with a domain-separation tag.
pub fn hash_to_scalar(domain: &[u8], msg: &[u8]) -> Scalar {
    let mut h = Sha512::new();
    h.update((domain.len() as u64).to_be_bytes());
    h.update(domain);
    h.update(msg);
    Scalar(Fr::from_be_bytes_mod_order(&h.finalize()))
}

/// Big-endian bytes of the prime group order.
pub fn group_order() -> Vec<u8> {
    Fr::MODULUS.to_bytes_be()
}

/// Which twin of a [`SourceElement`] a pairing argument is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Left,
    Right,
}

/// An element of the (conceptually symmetric) source group.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SourceElement {
    left: Option<G1Projective>,
    right: Option<G2Projective>,
}

impl SourceElement {
    /// Identity carrying the same twins as `self`.
    pub fn identity_like(&self) -> Self {
        SourceElement {
            left: self.left.map(|_| G1Projective::ZERO),
            right: self.right.map(|_| G2Projective::ZERO),
        }
    }

    pub fn identity(left: bool, right: bool) -> Self {
        SourceElement {
            left: left.then_some(G1Projective::ZERO),
            right: right.then_some(G2Projective::ZERO),
        }
    }

    pub fn has(&self, slot: Slot) -> bool {
        match slot {
            Slot::Left => self.left.is_some(),
            Slot::Right => self.right.is_some(),
        }
    }

    pub fn is_mirrored(&self) -> bool {
        self.left.is_some() && self.right.is_some()
    }

    pub fn is_identity(&self) -> bool {
        self.left.is_none_or(|p| p == G1Projective::ZERO)
            && self.right.is_none_or(|p| p == G2Projective::ZERO)
    }

    /// Drops the right twin.
    pub fn left_only(&self) -> Self {
        SourceElement {
            left: self.left,
            right: None,
        }
    }

    /// Drops the left twin.
    pub fn right_only(&self) -> Self {
        SourceElement {
            left: None,
            right: self.right,
        }
    }

    /// Exponentiation `self^k`.
    pub fn pow(&self, k: &Scalar) -> Self {
        SourceElement {
            left: self.left.map(|p| p * k.0),
            right: self.right.map(|p| p * k.0),
        }
    }

    /// Group operation, written multiplicatively.
    pub fn mul(&self, other: &Self) -> Self {
        SourceElement {
            left: self.left.zip(other.left).map(|(a, b)| a + b),
            right: self.right.zip(other.right).map(|(a, b)| a + b),
        }
    }

    pub fn inverse(&self) -> Self {
        SourceElement {
            left: self.left.map(|p| -p),
            right: self.right.map(|p| -p),
        }
    }

    pub fn encoded_len(&self) -> usize {
        1 + self.left.map_or(0, |_| G1_LEN) + self.right.map_or(0, |_| G2_LEN)
    }

    /// Slot tag byte followed by the compressed twins, left first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tag = 0u8;
        if self.left.is_some() {
            tag |= SLOT_LEFT;
        }
        if self.right.is_some() {
            tag |= SLOT_RIGHT;
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(tag);
        if let Some(p) = self.left {
            p.into_affine()
                .serialize_compressed(&mut out)
                .expect("vec write");
        }
        if let Some(p) = self.right {
            p.into_affine()
                .serialize_compressed(&mut out)
                .expect("vec write");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GroupError> {
        let err = GroupError::Malformed("source element");
        let (&tag, rest) = bytes.split_first().ok_or(err.clone())?;
        if tag & !(SLOT_LEFT | SLOT_RIGHT) != 0 {
            return Err(err);
        }
        let want_left = tag & SLOT_LEFT != 0;
        let want_right = tag & SLOT_RIGHT != 0;
        let expected = usize::from(want_left) * G1_LEN + usize::from(want_right) * G2_LEN;
        if rest.len() != expected {
            return Err(err);
        }
        let (l, r) = rest.split_at(if want_left { G1_LEN } else { 0 });
        let left = if want_left {
            Some(
                G1Affine::deserialize_compressed(l)
                    .map_err(|_| err.clone())?
                    .into(),
            )
        } else {
            None
        };
        let right = if want_right {
            Some(
                G2Affine::deserialize_compressed(r)
                    .map_err(|_| err.clone())?
                    .into(),
            )
        } else {
            None
        };
        Ok(SourceElement { left, right })
    }

    /// Decodes and insists the given twin is present.
    pub fn from_bytes_with(bytes: &[u8], slot: Slot) -> Result<Self, GroupError> {
        let e = Self::from_bytes(bytes)?;
        if e.has(slot) {
            Ok(e)
        } else {
            Err(GroupError::SlotMismatch)
        }
    }
}

/// Element of the target group, written multiplicatively.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TargetElement(PairingOutput<Bls12_381>);

impl TargetElement {
    pub fn one() -> Self {
        TargetElement(PairingOutput::ZERO)
    }

    pub fn is_one(&self) -> bool {
        self.0 == PairingOutput::ZERO
    }

    pub fn mul(&self, other: &Self) -> Self {
        TargetElement(self.0 + other.0)
    }

    pub fn pow(&self, k: &Scalar) -> Self {
        TargetElement(self.0 * k.0)
    }

    pub fn inverse(&self) -> Self {
        TargetElement(-self.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(GT_LEN);
        self.0.serialize_compressed(&mut out).expect("vec write");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GroupError> {
        if bytes.len() != GT_LEN {
            return Err(GroupError::Malformed("target element"));
        }
        PairingOutput::deserialize_compressed(bytes)
            .map(TargetElement)
            .map_err(|_| GroupError::Malformed("target element"))
    }
}

/// Public description of the bilinear group in use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupContext {
    security_level: u16,
    generator: SourceElement,
}

impl GroupContext {
    pub fn security_level(&self) -> u16 {
        self.security_level
    }

    pub fn group_order(&self) -> Vec<u8> {
        group_order()
    }

    /// The generator `g`, carried with both twins.
    pub fn generator(&self) -> &SourceElement {
        &self.generator
    }

    pub fn mirrored(&self) -> bool {
        self.generator.is_mirrored()
    }

    /// `pair(g, g)`.
    pub fn gt_generator(&self) -> TargetElement {
        pair(&self.generator, &self.generator).expect("mirrored generator")
    }
}

/// Builds a group context over BLS12-381.
///
/// With a seed the generator is a deterministic multiple of the standard one;
/// otherwise it is a fresh random multiple.
pub fn group_setup(security_level: u16, seed: Option<&[u8]>) -> Result<GroupContext, GroupError> {
    if security_level != 128 {
        return Err(GroupError::UnsupportedSecurityLevel(security_level));
    }
    let k = match seed {
        Some(seed) => {
            let mut counter = 0u32;
            loop {
                let mut msg = seed.to_vec();
                msg.extend_from_slice(&counter.to_be_bytes());
                let k = hash_to_scalar(b"dbra/group-setup/v1", &msg);
                if !k.is_zero() {
                    break k;
                }
                counter += 1;
            }
        }
        None => Scalar::random_nonzero(&mut rand::rngs::OsRng),
    };
    let generator = SourceElement {
        left: Some(G1Projective::generator() * k.0),
        right: Some(G2Projective::generator() * k.0),
    };
    Ok(GroupContext {
        security_level,
        generator,
    })
}

/// `e(a, b)`, reading `a` from its left twin and `b` from its right twin.
pub fn pair(a: &SourceElement, b: &SourceElement) -> Result<TargetElement, GroupError> {
    match (a.left, b.right) {
        (Some(l), Some(r)) => Ok(TargetElement(Bls12_381::pairing(l, r))),
        _ => Err(GroupError::SlotMismatch),
    }
}

/// Product of pairings computed with one shared final exponentiation.
pub fn multi_pair(terms: &[(SourceElement, SourceElement)]) -> Result<TargetElement, GroupError> {
    let mut lefts = Vec::with_capacity(terms.len());
    let mut rights = Vec::with_capacity(terms.len());
    for (a, b) in terms {
        match (a.left, b.right) {
            (Some(l), Some(r)) => {
                lefts.push(l);
                rights.push(r);
            }
            _ => return Err(GroupError::SlotMismatch),
        }
    }
    if lefts.is_empty() {
        return Ok(TargetElement::one());
    }
    let lefts = G1Projective::normalize_batch(&lefts);
    let rights = G2Projective::normalize_batch(&rights);
    Ok(TargetElement(Bls12_381::multi_pairing(lefts, rights)))
}

/// 32 bytes of symmetric key material.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; KEY_LEN]);

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

impl SymmetricKey {
    pub fn random<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut k = [0u8; KEY_LEN];
        rng.fill_bytes(&mut k);
        SymmetricKey(k)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GroupError> {
        let k: [u8; KEY_LEN] = bytes
            .try_into()
            .map_err(|_| GroupError::Malformed("symmetric key"))?;
        Ok(SymmetricKey(k))
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

/// HKDF-SHA256 over the canonical encoding of `k`, with `label` as info.
pub fn derive_key(k: &TargetElement, label: &[u8]) -> Result<SymmetricKey, GroupError> {
    derive_key_bytes(&k.to_bytes(), label)
}

/// HKDF-SHA256 over raw input keying material.
pub fn derive_key_bytes(ikm: &[u8], label: &[u8]) -> Result<SymmetricKey, GroupError> {
    if label.is_empty() {
        return Err(GroupError::EmptyLabel);
    }
    let hk = Hkdf::<Sha256>::new(Some(b"dbra/kdf/v1"), ikm);
    let mut out = [0u8; KEY_LEN];
    hk.expand(label, &mut out)
        .expect("32 bytes is a valid length");
    Ok(SymmetricKey(out))
}

pub fn random_nonce<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut n);
    n
}

pub fn aead_seal(
    key: &SymmetricKey,
    nonce: &[u8; NONCE_LEN],
    ad: &[u8],
    plaintext: &[u8],
) -> Vec<u8> {
    ChaCha20Poly1305::new((&key.0).into())
        .encrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: plaintext,
                aad: ad,
            },
        )
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers")
}

pub fn aead_open(
    key: &SymmetricKey,
    nonce: &[u8; NONCE_LEN],
    ad: &[u8],
    ciphertext: &[u8],
) -> Result<Vec<u8>, AccessDenied> {
    ChaCha20Poly1305::new((&key.0).into())
        .decrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: ciphertext,
                aad: ad,
            },
        )
        .map_err(|_| AccessDenied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ctx() -> GroupContext {
        group_setup(128, Some(&[0u8; 32])).unwrap()
    }

    #[test]
    fn setup_is_deterministic_under_seed() {
        let a = group_setup(128, Some(&[0u8; 32])).unwrap();
        let b = group_setup(128, Some(&[0u8; 32])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.group_order(), b.group_order());
        assert_eq!(a.group_order().len(), 32);
        assert!(a.mirrored());
    }

    #[test]
    fn unseeded_setup_is_non_degenerate() {
        let c = group_setup(128, None).unwrap();
        assert!(!c.gt_generator().is_one());
    }

    #[test]
    fn unsupported_levels_rejected() {
        assert_eq!(
            group_setup(64, None),
            Err(GroupError::UnsupportedSecurityLevel(64))
        );
        assert!(group_setup(192, None).is_err());
    }

    #[test]
    fn bilinearity_small_exponents() {
        let c = ctx();
        let g = c.generator();
        let lhs = pair(&g.pow(&Scalar::from_u64(2)), &g.pow(&Scalar::from_u64(3))).unwrap();
        assert_eq!(lhs, c.gt_generator().pow(&Scalar::from_u64(6)));
    }

    #[test]
    fn pairing_with_identity_is_one() {
        let c = ctx();
        let id = c.generator().identity_like();
        assert!(pair(c.generator(), &id).unwrap().is_one());
    }

    #[test]
    fn symmetric_contract_over_random_pairs() {
        let c = ctx();
        let g = c.generator();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = Scalar::random(&mut rng);
            let b = Scalar::random(&mut rng);
            let (ga, gb) = (g.pow(&a), g.pow(&b));
            let ab = pair(&ga, &gb).unwrap();
            assert_eq!(ab, pair(&gb, &ga).unwrap());
            assert_eq!(ab, c.gt_generator().pow(&(a * b)));
        }
    }

    #[test]
    fn slot_mismatch_is_reported() {
        let c = ctx();
        let g = c.generator();
        assert_eq!(pair(&g.right_only(), g), Err(GroupError::SlotMismatch));
        assert_eq!(pair(g, &g.left_only()), Err(GroupError::SlotMismatch));
        assert_eq!(
            SourceElement::from_bytes_with(&g.left_only().to_bytes(), Slot::Right),
            Err(GroupError::SlotMismatch)
        );
    }

    #[test]
    fn multi_pair_matches_product() {
        let c = ctx();
        let g = c.generator();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let terms: Vec<_> = (0..4)
            .map(|_| {
                (
                    g.pow(&Scalar::random(&mut rng)),
                    g.pow(&Scalar::random(&mut rng)),
                )
            })
            .collect();
        let expected = terms.iter().fold(TargetElement::one(), |acc, (a, b)| {
            acc.mul(&pair(a, b).unwrap())
        });
        assert_eq!(multi_pair(&terms).unwrap(), expected);
        assert!(multi_pair(&[]).unwrap().is_one());
    }

    #[test]
    fn encodings_round_trip() {
        let c = ctx();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let s = Scalar::random(&mut rng);
        assert_eq!(Scalar::from_bytes(&s.to_bytes()).unwrap(), s);
        let e = c.generator().pow(&s);
        for el in [e, e.left_only(), e.right_only()] {
            let bytes = el.to_bytes();
            assert_eq!(bytes.len(), el.encoded_len());
            let back = SourceElement::from_bytes(&bytes).unwrap();
            assert_eq!(back, el);
            assert_eq!(back.to_bytes(), bytes);
        }
        let t = c.gt_generator().pow(&s);
        let tb = t.to_bytes();
        assert_eq!(tb.len(), GT_LEN);
        assert_eq!(TargetElement::from_bytes(&tb).unwrap(), t);
    }

    #[test]
    fn non_canonical_scalar_rejected() {
        assert!(Scalar::from_bytes(&[0xff; 32]).is_err());
        assert!(Scalar::from_bytes(&group_order()).is_err());
        assert!(Scalar::from_bytes(&[0u8; 31]).is_err());
    }

    #[test]
    fn derive_key_contract() {
        let c = ctx();
        let k = c.gt_generator();
        assert_eq!(
            derive_key(&k, b"dbra/hibe/v1").unwrap(),
            derive_key(&k, b"dbra/hibe/v1").unwrap()
        );
        assert_ne!(derive_key(&k, b"A").unwrap(), derive_key(&k, b"B").unwrap());
        assert_eq!(derive_key(&k, b""), Err(GroupError::EmptyLabel));
    }

    #[test]
    fn derive_key_no_collisions_over_random_inputs() {
        let c = ctx();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let base = c.gt_generator();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let k = base.pow(&Scalar::random(&mut rng));
            assert!(seen.insert(*derive_key(&k, b"dbra/hibe/v1").unwrap().as_bytes()));
        }
    }

    #[test]
    fn aead_round_trip_and_integrity() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let key = SymmetricKey::random(&mut rng);
        let nonce = random_nonce(&mut rng);
        let mut msg = vec![0u8; 1 << 20];
        rng.fill_bytes(&mut msg);
        let ct = aead_seal(&key, &nonce, b"ad", &msg);
        assert_eq!(aead_open(&key, &nonce, b"ad", &ct).unwrap(), msg);

        let mut flipped = ct.clone();
        flipped[17] ^= 1;
        assert_eq!(aead_open(&key, &nonce, b"ad", &flipped), Err(AccessDenied));
    }

    #[test]
    fn aead_failures_are_indistinguishable() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let key = SymmetricKey::random(&mut rng);
        let nonce = random_nonce(&mut rng);
        let ct = aead_seal(&key, &nonce, b"ad", b"payload bytes");
        let mut errors = Vec::new();
        for i in 0..100 {
            let err = match i % 4 {
                0 => aead_open(&SymmetricKey::random(&mut rng), &nonce, b"ad", &ct),
                1 => aead_open(&key, &nonce, format!("ad{i}").as_bytes(), &ct),
                2 => {
                    let mut c = ct.clone();
                    c[i % ct.len()] ^= 1 << (i % 8);
                    aead_open(&key, &nonce, b"ad", &c)
                }
                _ => aead_open(&key, &random_nonce(&mut rng), b"ad", &ct),
            }
            .unwrap_err();
            errors.push((err.to_bytes(), format!("{err:?}"), err.to_string()));
        }
        assert!(errors.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(errors[0].2, "access denied");
    }
}
