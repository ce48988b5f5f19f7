//! Hidden-vector encryption over a prime-order group, used as a KEM.
//!
//! Master exponents are `y` and per position `t_i, v_i, r_i, m_i`. A header
//! for `x` blinds the session by `Y^-s` (`Y = e(g, g)^y`) and emits, for each
//! position, `(T_i^(s - s_i), V_i^s_i)` when `x_i = 1` or
//! `(R_i^(s - s_i), M_i^s_i)` when `x_i = 0`. A key for pattern `p` splits `y`
//! into shares `a_i` over its non-wildcard positions and carries
//! `(g^(a_i / t_i), g^(a_i / v_i))` or `(g^(a_i / r_i), g^(a_i / m_i))`.
//! Each matching position contributes `e(g, g)^(a_i * s)`; a mismatched one
//! contributes an unrelated value, so the product only unblinds on a full
//! match and says nothing about where a mismatch is.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::group::{multi_pair, pair, GroupContext, Scalar, Slot, SourceElement, TargetElement};
use crate::wire::{Reader, Tag, WireError, Writer};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HveError {
    #[error("width must be at least 1")]
    InvalidWidth,
    #[error("vector of length {found} does not match width {width}")]
    WidthMismatch { found: usize, width: usize },
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Ciphertext-side bit vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitAttributeVector(pub Vec<bool>);

/// Key-side pattern; `None` is the wildcard.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitPattern(pub Vec<Option<bool>>);

impl BitPattern {
    pub fn wildcard(width: usize) -> Self {
        BitPattern(vec![None; width])
    }

    /// Positional match with wildcards.
    pub fn matches(&self, x: &BitAttributeVector) -> bool {
        self.0.len() == x.0.len()
            && self
                .0
                .iter()
                .zip(&x.0)
                .all(|(p, b)| p.is_none_or(|p| p == *b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PositionPublic {
    t: SourceElement,
    v: SourceElement,
    r: SourceElement,
    m: SourceElement,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PositionSecret {
    t: Scalar,
    v: Scalar,
    r: Scalar,
    m: Scalar,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HvePublicKey {
    blind: TargetElement,
    g: SourceElement,
    positions: Vec<PositionPublic>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HveMasterKey {
    y: Scalar,
    g: SourceElement,
    positions: Vec<PositionSecret>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct KeyComponent {
    index: usize,
    y: SourceElement,
    l: SourceElement,
}

/// Restricted key. `base` is only present for the all-wildcard pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HveKey {
    components: Vec<KeyComponent>,
    base: Option<SourceElement>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HveHeader {
    omega_h: TargetElement,
    c0: SourceElement,
    pairs: Vec<(SourceElement, SourceElement)>,
}

impl HvePublicKey {
    pub fn width(&self) -> usize {
        self.positions.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        let mut w = Writer::new(Tag::HvePublicKey, 0);
        w.u16(self.width() as u16)?
            .target(&self.blind)?
            .source(&self.g)?;
        for p in &self.positions {
            w.source(&p.t)?.source(&p.v)?.source(&p.r)?.source(&p.m)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HveError> {
        let mut r = Reader::open(bytes, Tag::HvePublicKey)?;
        let width = r.u16()? as usize;
        if width == 0 {
            return Err(HveError::InvalidWidth);
        }
        let blind = r.target()?;
        let g = r.source(Slot::Left)?;
        let positions = (0..width)
            .map(|_| {
                Ok(PositionPublic {
                    t: r.source(Slot::Left)?,
                    v: r.source(Slot::Left)?,
                    r: r.source(Slot::Left)?,
                    m: r.source(Slot::Left)?,
                })
            })
            .collect::<Result<Vec<_>, WireError>>()?;
        r.finish()?;
        Ok(HvePublicKey {
            blind,
            g,
            positions,
        })
    }
}

impl HveMasterKey {
    pub fn width(&self) -> usize {
        self.positions.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        let mut w = Writer::new(Tag::HveMasterKey, 0);
        w.u16(self.width() as u16)?
            .scalar(&self.y)?
            .source(&self.g)?;
        for p in &self.positions {
            w.scalar(&p.t)?.scalar(&p.v)?.scalar(&p.r)?.scalar(&p.m)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HveError> {
        let mut r = Reader::open(bytes, Tag::HveMasterKey)?;
        let width = r.u16()? as usize;
        if width == 0 {
            return Err(HveError::InvalidWidth);
        }
        let y = r.scalar()?;
        let g = r.source(Slot::Right)?;
        let positions = (0..width)
            .map(|_| {
                let p = PositionSecret {
                    t: r.scalar()?,
                    v: r.scalar()?,
                    r: r.scalar()?,
                    m: r.scalar()?,
                };
                if [p.t, p.v, p.r, p.m].iter().any(Scalar::is_zero) {
                    return Err(WireError::Malformed("zero exponent"));
                }
                Ok(p)
            })
            .collect::<Result<Vec<_>, WireError>>()?;
        r.finish()?;
        Ok(HveMasterKey { y, g, positions })
    }
}

impl HveKey {
    /// Non-wildcard positions, ascending.
    pub fn positions(&self) -> Vec<usize> {
        self.components.iter().map(|c| c.index).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        let mut w = Writer::new(Tag::HveKey, 0);
        let idx: Vec<u8> = self
            .components
            .iter()
            .flat_map(|c| (c.index as u16).to_be_bytes())
            .collect();
        w.bytes(&idx)?;
        match &self.base {
            Some(b) => {
                w.source(b)?;
            }
            None => {
                for c in &self.components {
                    w.source(&c.y)?.source(&c.l)?;
                }
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HveError> {
        let mut r = Reader::open(bytes, Tag::HveKey)?;
        let idx = r.bytes()?;
        if idx.len() % 2 != 0 {
            return Err(WireError::Malformed("position list").into());
        }
        let indices: Vec<usize> = idx
            .chunks(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as usize)
            .collect();
        let key = if indices.is_empty() {
            HveKey {
                components: Vec::new(),
                base: Some(r.source(Slot::Right)?),
            }
        } else {
            let components = indices
                .into_iter()
                .map(|index| {
                    Ok(KeyComponent {
                        index,
                        y: r.source(Slot::Right)?,
                        l: r.source(Slot::Right)?,
                    })
                })
                .collect::<Result<Vec<_>, WireError>>()?;
            HveKey {
                components,
                base: None,
            }
        };
        r.finish()?;
        Ok(key)
    }
}

impl HveHeader {
    pub fn width(&self) -> usize {
        self.pairs.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        let mut w = Writer::new(Tag::HveHeader, 0);
        w.u16(self.width() as u16)?
            .target(&self.omega_h)?
            .source(&self.c0)?;
        for (x, wi) in &self.pairs {
            w.source(x)?.source(wi)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HveError> {
        let mut r = Reader::open(bytes, Tag::HveHeader)?;
        let width = r.u16()? as usize;
        let omega_h = r.target()?;
        let c0 = r.source(Slot::Left)?;
        let pairs = (0..width)
            .map(|_| Ok((r.source(Slot::Left)?, r.source(Slot::Left)?)))
            .collect::<Result<Vec<_>, WireError>>()?;
        r.finish()?;
        Ok(HveHeader { omega_h, c0, pairs })
    }
}

pub fn setup<R: RngCore + CryptoRng + ?Sized>(
    width: usize,
    ctx: &GroupContext,
    rng: &mut R,
) -> Result<(HvePublicKey, HveMasterKey), HveError> {
    if width < 1 {
        return Err(HveError::InvalidWidth);
    }
    if width > u16::MAX as usize {
        return Err(HveError::WidthMismatch {
            found: width,
            width: u16::MAX as usize,
        });
    }
    let g = ctx.generator();
    let y = Scalar::random_nonzero(rng);
    let secrets: Vec<PositionSecret> = (0..width)
        .map(|_| PositionSecret {
            t: Scalar::random_nonzero(rng),
            v: Scalar::random_nonzero(rng),
            r: Scalar::random_nonzero(rng),
            m: Scalar::random_nonzero(rng),
        })
        .collect();
    let gl = g.left_only();
    let positions = secrets
        .iter()
        .map(|s| PositionPublic {
            t: gl.pow(&s.t),
            v: gl.pow(&s.v),
            r: gl.pow(&s.r),
            m: gl.pow(&s.m),
        })
        .collect();
    let pk = HvePublicKey {
        blind: ctx.gt_generator().pow(&y),
        g: gl,
        positions,
    };
    let msk = HveMasterKey {
        y,
        g: g.right_only(),
        positions: secrets,
    };
    Ok((pk, msk))
}

pub fn encap<R: RngCore + CryptoRng + ?Sized>(
    pk: &HvePublicKey,
    x: &BitAttributeVector,
    rng: &mut R,
) -> Result<(TargetElement, HveHeader), HveError> {
    if x.0.len() != pk.width() {
        return Err(HveError::WidthMismatch {
            found: x.0.len(),
            width: pk.width(),
        });
    }
    let s = Scalar::random_nonzero(rng);
    let session = pk.blind.pow(&Scalar::random(rng));
    let pairs =
        x.0.iter()
            .zip(&pk.positions)
            .map(|(&bit, p)| {
                let si = Scalar::random(rng);
                let (a, b) = if bit { (&p.t, &p.v) } else { (&p.r, &p.m) };
                (a.pow(&(s - si)), b.pow(&si))
            })
            .collect();
    let header = HveHeader {
        omega_h: session.mul(&pk.blind.pow(&-s)),
        c0: pk.g.pow(&s),
        pairs,
    };
    Ok((session, header))
}

pub fn derive<R: RngCore + CryptoRng + ?Sized>(
    msk: &HveMasterKey,
    pattern: &BitPattern,
    rng: &mut R,
) -> Result<HveKey, HveError> {
    if pattern.0.len() != msk.width() {
        return Err(HveError::WidthMismatch {
            found: pattern.0.len(),
            width: msk.width(),
        });
    }
    let fixed: Vec<(usize, bool)> = pattern
        .0
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|b| (i, b)))
        .collect();
    if fixed.is_empty() {
        return Ok(HveKey {
            components: Vec::new(),
            base: Some(msk.g.pow(&msk.y)),
        });
    }
    let mut shares: Vec<Scalar> = (1..fixed.len()).map(|_| Scalar::random(rng)).collect();
    let rest = shares.iter().fold(msk.y, |acc, a| acc - *a);
    shares.push(rest);
    let components = fixed
        .iter()
        .zip(shares)
        .map(|(&(index, bit), a)| {
            let p = &msk.positions[index];
            let (e1, e2) = if bit { (p.t, p.v) } else { (p.r, p.m) };
            let inv = |e: Scalar| e.inverse().expect("nonzero exponent");
            KeyComponent {
                index,
                y: msk.g.pow(&(a * inv(e1))),
                l: msk.g.pow(&(a * inv(e2))),
            }
        })
        .collect();
    Ok(HveKey {
        components,
        base: None,
    })
}

/// Unblinds the header's session. A non-matching key gives an unrelated value.
pub fn decap(key: &HveKey, header: &HveHeader) -> TargetElement {
    if let Some(base) = &key.base {
        return pair(&header.c0, base)
            .map(|p| header.omega_h.mul(&p))
            .unwrap_or(header.omega_h);
    }
    let mut terms = Vec::with_capacity(2 * key.components.len());
    for c in &key.components {
        let Some((x, w)) = header.pairs.get(c.index) else {
            return header.omega_h;
        };
        terms.push((*x, c.y));
        terms.push((*w, c.l));
    }
    multi_pair(&terms)
        .map(|p| header.omega_h.mul(&p))
        .unwrap_or(header.omega_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::group_setup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn fixture(width: usize) -> (HvePublicKey, HveMasterKey, ChaCha20Rng) {
        let ctx = group_setup(128, Some(b"hve-tests")).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(100 + width as u64);
        let (pk, msk) = setup(width, &ctx, &mut rng).unwrap();
        (pk, msk, rng)
    }

    fn bits(s: &str) -> BitAttributeVector {
        BitAttributeVector(s.chars().map(|c| c == '1').collect())
    }

    fn pattern(s: &str) -> BitPattern {
        BitPattern(
            s.chars()
                .map(|c| match c {
                    '1' => Some(true),
                    '0' => Some(false),
                    _ => None,
                })
                .collect(),
        )
    }

    #[test]
    fn setup_bounds() {
        let ctx = group_setup(128, Some(b"w")).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert_eq!(
            setup(0, &ctx, &mut rng).unwrap_err(),
            HveError::InvalidWidth
        );
        let (pk, msk) = setup(1, &ctx, &mut rng).unwrap();
        let (s, h) = encap(&pk, &bits("1"), &mut rng).unwrap();
        assert_eq!(
            decap(&derive(&msk, &pattern("1"), &mut rng).unwrap(), &h),
            s
        );
        assert_ne!(
            decap(&derive(&msk, &pattern("0"), &mut rng).unwrap(), &h),
            s
        );
    }

    #[test]
    fn width_four_round_trip() {
        let (pk, msk, mut rng) = fixture(4);
        let key = derive(&msk, &pattern("10*1"), &mut rng).unwrap();
        let (s, h) = encap(&pk, &bits("1001"), &mut rng).unwrap();
        assert_eq!(decap(&key, &h), s);
        assert_eq!(key.positions(), vec![0, 1, 3]);
    }

    #[test]
    fn width_mismatch_rejected() {
        let (pk, msk, mut rng) = fixture(2);
        assert!(matches!(
            encap(&pk, &bits("101"), &mut rng),
            Err(HveError::WidthMismatch { found: 3, width: 2 })
        ));
        assert!(derive(&msk, &pattern("1"), &mut rng).is_err());
    }

    #[test]
    fn exhaustive_width_two() {
        let (pk, msk, mut rng) = fixture(2);
        let key = derive(&msk, &pattern("1*"), &mut rng).unwrap();
        for (x, want) in [("10", true), ("11", true), ("00", false), ("01", false)] {
            let (s, h) = encap(&pk, &bits(x), &mut rng).unwrap();
            assert_eq!(decap(&key, &h) == s, want, "x={x}");
        }
    }

    #[test]
    fn wildcard_key_opens_everything() {
        let (pk, msk, mut rng) = fixture(3);
        let key = derive(&msk, &BitPattern::wildcard(3), &mut rng).unwrap();
        assert!(key.positions().is_empty());
        for x in ["000", "101", "111"] {
            let (s, h) = encap(&pk, &bits(x), &mut rng).unwrap();
            assert_eq!(decap(&key, &h), s);
        }
    }

    #[test]
    fn rederivation_changes_bytes_not_behaviour() {
        let (pk, msk, mut rng) = fixture(3);
        let a = derive(&msk, &pattern("1*0"), &mut rng).unwrap();
        let b = derive(&msk, &pattern("1*0"), &mut rng).unwrap();
        assert_ne!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        for x in ["100", "110", "101", "010"] {
            let (s, h) = encap(&pk, &bits(x), &mut rng).unwrap();
            assert_eq!(decap(&a, &h) == s, decap(&b, &h) == s);
            assert_eq!(decap(&a, &h) == s, pattern("1*0").matches(&bits(x)));
        }
    }

    #[test]
    fn headers_are_shape_identical_across_vectors() {
        let (pk, _, mut rng) = fixture(4);
        let encoded: Vec<Vec<u8>> = ["0000", "1111", "1010", "0110"]
            .iter()
            .map(|x| {
                encap(&pk, &bits(x), &mut rng)
                    .unwrap()
                    .1
                    .to_bytes()
                    .unwrap()
            })
            .collect();
        let lens: Vec<usize> = encoded.iter().map(Vec::len).collect();
        assert!(lens.windows(2).all(|w| w[0] == w[1]));
        // Same field boundaries in every header.
        let layout = |b: &[u8]| {
            let mut r = Reader::open(b, Tag::HveHeader).unwrap();
            let mut sizes = Vec::new();
            while !r.is_empty() {
                sizes.push(r.bytes().unwrap().len());
            }
            sizes
        };
        let first = layout(&encoded[0]);
        assert!(encoded.iter().all(|b| layout(b) == first));
    }

    #[test]
    fn serialization_round_trips() {
        let (pk, msk, mut rng) = fixture(3);
        assert_eq!(
            HvePublicKey::from_bytes(&pk.to_bytes().unwrap()).unwrap(),
            pk
        );
        assert_eq!(
            HveMasterKey::from_bytes(&msk.to_bytes().unwrap()).unwrap(),
            msk
        );
        for p in ["1*0", "***"] {
            let key = derive(&msk, &pattern(p), &mut rng).unwrap();
            assert_eq!(HveKey::from_bytes(&key.to_bytes().unwrap()).unwrap(), key);
        }
        let (_, h) = encap(&pk, &bits("011"), &mut rng).unwrap();
        assert_eq!(HveHeader::from_bytes(&h.to_bytes().unwrap()).unwrap(), h);
    }
}
