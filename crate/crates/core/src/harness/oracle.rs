//! Truth tables by direct enumeration, with no cryptography involved.

use crate::scheme::{AttributeSchema, KeyPattern, PolicyPair, SchemeError};

pub const MAX_ROWS: u128 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleRow {
    pub pair: PolicyPair,
    pub pattern: KeyPattern,
    pub matched: bool,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("search space of {0} rows exceeds {MAX_ROWS}")]
    TooLarge(u128),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

/// Every attribute vector of the schema, in lexicographic order.
pub fn all_vectors(arities: &[u32]) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for &a in arities {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..a).map(move |s| {
                    let mut v = prefix.clone();
                    v.push(s);
                    v
                })
            })
            .collect();
    }
    out
}

/// Every pattern: each position is a symbol or the wildcard.
pub fn all_patterns(arities: &[u32]) -> Vec<Vec<Option<u32>>> {
    let mut out = vec![vec![]];
    for &a in arities {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..a).map(Some).chain([None]).map(move |s| {
                    let mut v = prefix.clone();
                    v.push(s);
                    v
                })
            })
            .collect();
    }
    out
}

fn matches(x: &[u32], y: &[Option<u32>], d_ct: u32, d_key: u32) -> bool {
    if d_key > d_ct {
        return false;
    }
    for i in 0..x.len() {
        if let Some(s) = y[i] {
            if s != x[i] {
                return false;
            }
        }
    }
    true
}

/// All `(x, d_ct, y, d_key)` with distances in `1..=d_max`.
pub fn brute_oracle(schema: &AttributeSchema, d_max: u32) -> Result<Vec<OracleRow>, OracleError> {
    let arities: Vec<u32> = schema.dimensions().iter().map(|d| d.arity).collect();
    let xs: u128 = arities.iter().map(|&a| a as u128).product();
    let ys: u128 = arities.iter().map(|&a| a as u128 + 1).product();
    let total = xs * ys * (d_max as u128) * (d_max as u128);
    if total > MAX_ROWS {
        return Err(OracleError::TooLarge(total));
    }
    AttributeSchema::new(schema.dimensions().to_vec(), d_max)?;
    let vectors = all_vectors(&arities);
    let patterns = all_patterns(&arities);
    let mut rows = Vec::with_capacity(total as usize);
    for x in &vectors {
        for d_ct in 1..=d_max {
            for y in &patterns {
                for d_key in 1..=d_max {
                    rows.push(OracleRow {
                        pair: PolicyPair::new(x.clone(), d_ct),
                        pattern: KeyPattern::new(y.clone(), d_key),
                        matched: matches(x, y, d_ct, d_key),
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::{match_oracle, Dimension};

    #[test]
    fn one_binary_dimension() {
        let rows = brute_oracle(&AttributeSchema::binary(1, 1).unwrap(), 1).unwrap();
        assert_eq!(rows.len(), 6);
        // x=0: y in {0,*}; x=1: y in {1,*}.
        assert_eq!(rows.iter().filter(|r| r.matched).count(), 4);
    }

    #[test]
    fn two_binary_dimensions() {
        let schema = AttributeSchema::binary(2, 3).unwrap();
        let rows = brute_oracle(&schema, 3).unwrap();
        assert_eq!(rows.len(), 324);
        for r in &rows {
            assert_eq!(
                match_oracle(&schema, &r.pair, &r.pattern).unwrap(),
                r.matched
            );
            if r.pattern.y.iter().all(Option::is_none) {
                assert_eq!(r.matched, r.pattern.d <= r.pair.d);
            }
        }
    }

    #[test]
    fn relabeling_symbols_preserves_the_table() {
        let schema = AttributeSchema::new(
            vec![Dimension {
                name: "a".into(),
                arity: 3,
            }],
            2,
        )
        .unwrap();
        let rows = brute_oracle(&schema, 2).unwrap();
        let perm = [2u32, 0, 1];
        for r in &rows {
            let x: Vec<u32> = r.pair.x.iter().map(|&s| perm[s as usize]).collect();
            let y: Vec<Option<u32>> = r
                .pattern
                .y
                .iter()
                .map(|s| s.map(|s| perm[s as usize]))
                .collect();
            let twin = rows
                .iter()
                .find(|t| {
                    t.pair.x == x
                        && t.pattern.y == y
                        && t.pair.d == r.pair.d
                        && t.pattern.d == r.pattern.d
                })
                .unwrap();
            assert_eq!(twin.matched, r.matched);
        }
    }

    #[test]
    fn refuses_large_spaces() {
        let schema = AttributeSchema::binary(8, 3).unwrap();
        assert!(matches!(
            brute_oracle(&schema, 3),
            Err(OracleError::TooLarge(_))
        ));
    }
}
