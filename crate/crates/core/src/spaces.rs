//! Points, norms and inner products for the model spaces.
//!
//! Every point is a [`SeqVector`]: a finitely supported map `ℤ → ℝ` stored
//! as a sorted list of `(index, coefficient)` pairs with no explicit zeros.
//! The same representation serves `ℝ^d` (support inside `1..=d`), truncated
//! `ℓ²(ℕ)` and `ℓ¹(ℤ)`. The basepoint of every space is the zero vector.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpaceError {
    #[error("index {index} lies outside the support 1..={dim} of euclidean({dim})")]
    Inadmissible { index: i64, dim: usize },
    #[error("non-finite coefficient {value} at index {index}")]
    NonFinite { index: i64, value: f64 },
}

/// Finitely supported real sequence indexed by `ℤ`, kept in canonical form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeqVector {
    entries: Vec<(i64, f64)>,
}

impl SeqVector {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Unit vector `e_index`.
    pub fn basis(index: i64) -> Self {
        Self {
            entries: vec![(index, 1.0)],
        }
    }

    /// Builds a vector from arbitrary `(index, value)` pairs. Repeated
    /// indices are summed and exact zeros dropped.
    pub fn from_pairs<I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (i64, f64)>,
    {
        let mut acc: BTreeMap<i64, f64> = BTreeMap::new();
        for (i, v) in pairs {
            *acc.entry(i).or_insert(0.0) += v;
        }
        Self {
            entries: acc.into_iter().filter(|&(_, v)| v != 0.0).collect(),
        }
    }

    /// Dense slice placed at indices `first, first + 1, …`.
    pub fn from_dense(first: i64, values: &[f64]) -> Self {
        Self {
            entries: values
                .iter()
                .enumerate()
                .filter(|&(_, &v)| v != 0.0)
                .map(|(k, &v)| (first + k as i64, v))
                .collect(),
        }
    }

    /// Assumes `entries` is strictly increasing in index; zeros are dropped.
    pub(crate) fn from_sorted_unchecked(mut entries: Vec<(i64, f64)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        entries.retain(|&(_, v)| v != 0.0);
        Self { entries }
    }

    pub fn get(&self, index: i64) -> f64 {
        match self.entries.binary_search_by_key(&index, |&(i, _)| i) {
            Ok(k) => self.entries[k].1,
            Err(_) => 0.0,
        }
    }

    pub fn entries(&self) -> &[(i64, f64)] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn support(&self) -> impl Iterator<Item = i64> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    pub fn support_len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    /// Smallest and largest index of the support.
    pub fn support_bounds(&self) -> Option<(i64, i64)> {
        Some((self.entries.first()?.0, self.entries.last()?.0))
    }

    /// Dense copy of coordinates `1..=dim`.
    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &(i, v) in &self.entries {
            if i >= 1 && (i as usize) <= dim {
                out[i as usize - 1] = v;
            }
        }
        out
    }

    pub fn norm1(&self) -> f64 {
        self.entries.iter().fold(0.0, |a, &(_, v)| a + v.abs())
    }

    pub fn norm2(&self) -> f64 {
        self.entries
            .iter()
            .fold(0.0, |a: f64, &(_, v)| a + v * v)
            .sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, &(_, v)| m.max(v.abs()))
    }

    pub fn scale(&self, c: f64) -> Self {
        if c == 0.0 {
            return Self::zero();
        }
        Self::from_sorted_unchecked(self.entries.iter().map(|&(i, v)| (i, c * v)).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        self.lincomb(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.lincomb(1.0, other, -1.0)
    }

    /// `a·self + b·other` in a single merge pass.
    pub fn lincomb(&self, a: f64, other: &Self, b: f64) -> Self {
        let mut out = Vec::with_capacity(self.entries.len() + other.entries.len());
        merge(&self.entries, &other.entries, |i, x, y| {
            out.push((i, a * x + b * y));
        });
        Self::from_sorted_unchecked(out)
    }

    /// Moves every coordinate from index `s` to `s + by`.
    pub fn shifted(&self, by: i64) -> Self {
        Self {
            entries: self.entries.iter().map(|&(i, v)| (i + by, v)).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<(), SpaceError> {
        match self.entries.iter().find(|(_, v)| !v.is_finite()) {
            Some(&(index, value)) => Err(SpaceError::NonFinite { index, value }),
            None => Ok(()),
        }
    }
}

/// Visits the union of two sorted supports, passing 0 for missing entries.
pub(crate) fn merge<F>(a: &[(i64, f64)], b: &[(i64, f64)], mut f: F)
where
    F: FnMut(i64, f64, f64),
{
    let (mut p, mut q) = (0, 0);
    while p < a.len() || q < b.len() {
        match (a.get(p), b.get(q)) {
            (Some(&(i, x)), Some(&(j, y))) if i == j => {
                f(i, x, y);
                p += 1;
                q += 1;
            }
            (Some(&(i, x)), Some(&(j, _))) if i < j => {
                f(i, x, 0.0);
                p += 1;
            }
            (Some(&(i, x)), None) => {
                f(i, x, 0.0);
                p += 1;
            }
            (_, Some(&(j, y))) => {
                f(j, 0.0, y);
                q += 1;
            }
            (None, None) => unreachable!(),
        }
    }
}

/// `Σ_s x_s y_s` over the common support.
pub fn inner(x: &SeqVector, y: &SeqVector) -> f64 {
    let (a, b) = (&x.entries, &y.entries);
    let (mut p, mut q) = (0, 0);
    let mut acc = 0.0;
    while p < a.len() && q < b.len() {
        let (i, u) = a[p];
        let (j, v) = b[q];
        if i == j {
            acc += u * v;
            p += 1;
            q += 1;
        } else if i < j {
            p += 1;
        } else {
            q += 1;
        }
    }
    acc
}

impl fmt::Display for SeqVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, (i, v)) in self.iter().enumerate() {
            if k > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{i}: {v}")?;
        }
        write!(f, "}}")
    }
}

impl Serialize for SeqVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.entries.len()))?;
        for &(i, v) in &self.entries {
            map.serialize_entry(&i.to_string(), &v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for SeqVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct SeqVisitor;

        impl<'de> Visitor<'de> for SeqVisitor {
            type Value = SeqVector;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object mapping decimal index strings to numbers")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<SeqVector, A::Error> {
                let mut acc = BTreeMap::new();
                while let Some((key, value)) = access.next_entry::<String, f64>()? {
                    let index: i64 = key
                        .trim()
                        .parse()
                        .map_err(|_| de::Error::custom(format!("invalid index {key:?}")))?;
                    if !value.is_finite() {
                        return Err(de::Error::custom(format!("non-finite value at {index}")));
                    }
                    if acc.insert(index, value).is_some() {
                        return Err(de::Error::custom(format!("duplicate index {index}")));
                    }
                }
                Ok(SeqVector::from_pairs(acc))
            }
        }

        deserializer.deserialize_map(SeqVisitor)
    }
}

/// Which model space a point lives in. The basepoint is always zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpaceTag {
    /// `ℝ^d` with the Euclidean norm; support must lie in `1..=dim`.
    Euclidean { dim: usize },
    /// Finitely supported part of `ℓ²`.
    L2Seq,
    /// Finitely supported part of `ℓ¹(ℤ)`.
    L1Seq,
}

impl SpaceTag {
    pub fn is_hilbert(self) -> bool {
        !matches!(self, SpaceTag::L1Seq)
    }

    pub fn check(self, x: &SeqVector) -> Result<(), SpaceError> {
        if let SpaceTag::Euclidean { dim } = self {
            if let Some((lo, hi)) = x.support_bounds() {
                if lo < 1 {
                    return Err(SpaceError::Inadmissible { index: lo, dim });
                }
                if hi > dim as i64 {
                    return Err(SpaceError::Inadmissible { index: hi, dim });
                }
            }
        }
        Ok(())
    }

    /// Norm without the admissibility check.
    pub fn norm_unchecked(self, x: &SeqVector) -> f64 {
        match self {
            SpaceTag::L1Seq => x.norm1(),
            _ => x.norm2(),
        }
    }

    /// `‖x − y‖` computed without materialising the difference.
    pub fn dist(self, x: &SeqVector, y: &SeqVector) -> f64 {
        let mut acc = 0.0;
        match self {
            SpaceTag::L1Seq => {
                merge(&x.entries, &y.entries, |_, a, b| acc += (a - b).abs());
                acc
            }
            _ => {
                merge(&x.entries, &y.entries, |_, a, b| acc += (a - b) * (a - b));
                acc.sqrt()
            }
        }
    }
}

impl fmt::Display for SpaceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpaceTag::Euclidean { dim } => write!(f, "euclidean({dim})"),
            SpaceTag::L2Seq => f.write_str("l2_seq"),
            SpaceTag::L1Seq => f.write_str("l1_seq"),
        }
    }
}

/// `‖x‖` in the given space.
pub fn norm(x: &SeqVector, space: SpaceTag) -> Result<f64, SpaceError> {
    space.check(x)?;
    Ok(space.norm_unchecked(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(pairs: &[(i64, f64)]) -> SeqVector {
        SeqVector::from_pairs(pairs.iter().copied())
    }

    #[test]
    fn norm_examples() {
        assert_eq!(norm(&SeqVector::zero(), SpaceTag::L1Seq).unwrap(), 0.0);
        assert_eq!(norm(&SeqVector::zero(), SpaceTag::L2Seq).unwrap(), 0.0);
        assert_eq!(
            norm(&sv(&[(1, 1.0), (2, -2.0)]), SpaceTag::L1Seq).unwrap(),
            3.0
        );
        let e2 = SpaceTag::Euclidean { dim: 2 };
        assert_eq!(norm(&sv(&[(1, 3.0), (2, 4.0)]), e2).unwrap(), 5.0);
    }

    #[test]
    fn euclidean_rejects_outside_support() {
        let e2 = SpaceTag::Euclidean { dim: 2 };
        assert_eq!(
            norm(&SeqVector::basis(3), e2),
            Err(SpaceError::Inadmissible { index: 3, dim: 2 })
        );
        assert!(norm(&SeqVector::basis(0), e2).is_err());
        assert!(norm(&SeqVector::basis(-4), SpaceTag::L1Seq).is_ok());
    }

    #[test]
    fn inner_examples() {
        assert_eq!(inner(&sv(&[(1, 1.0)]), &sv(&[(2, 1.0)])), 0.0);
        assert_eq!(
            inner(&sv(&[(1, 2.0), (2, 3.0)]), &sv(&[(1, 1.0), (2, 1.0)])),
            5.0
        );
        let x = sv(&[(1, 1.0), (2, 1.0)]);
        assert_eq!(inner(&x, &x), 2.0);
    }

    #[test]
    fn arithmetic_examples() {
        assert!(sv(&[(1, 1.0)]).add(&sv(&[(1, -1.0)])).is_zero());
        assert!(sv(&[(5, 7.0)]).scale(0.0).is_zero());
        assert_eq!(
            sv(&[(1, 2.0)]).sub(&sv(&[(2, 1.0)])),
            sv(&[(1, 2.0), (2, -1.0)])
        );
    }

    #[test]
    fn tiny_coefficients_survive() {
        let x = sv(&[(1, 1e-310)]);
        assert_eq!(x.support_len(), 1);
        assert_eq!(x.scale(1.0).get(1), 1e-310);
    }

    #[test]
    fn json_round_trip_and_format() {
        let x = sv(&[(1, 1.0), (-3, 2.5)]);
        let text = serde_json::to_string(&x).unwrap();
        assert_eq!(text, r#"{"-3":2.5,"1":1.0}"#);
        let back: SeqVector = serde_json::from_str(r#"{"1": 1.0, "-3": 2.5, "7": 0}"#).unwrap();
        assert_eq!(back, x);
        assert!(serde_json::from_str::<SeqVector>(r#"{"x": 1.0}"#).is_err());
    }

    #[test]
    fn space_tag_json() {
        let t: SpaceTag = serde_json::from_str(r#"{"kind":"euclidean","dim":3}"#).unwrap();
        assert_eq!(t, SpaceTag::Euclidean { dim: 3 });
        assert_eq!(
            serde_json::to_string(&SpaceTag::L1Seq).unwrap(),
            r#"{"kind":"l1_seq"}"#
        );
    }

    fn arb_vec() -> impl Strategy<Value = SeqVector> {
        prop::collection::vec((-20i64..20, -10.0f64..10.0), 0..12).prop_map(SeqVector::from_pairs)
    }

    proptest! {
        #[test]
        fn outputs_are_canonical(x in arb_vec(), y in arb_vec(), c in -3.0f64..3.0) {
            for z in [x.add(&y), x.sub(&y), x.scale(c), x.sub(&x)] {
                prop_assert!(z.iter().all(|(_, v)| v != 0.0));
                prop_assert!(z.entries().windows(2).all(|w| w[0].0 < w[1].0));
            }
            prop_assert!(x.sub(&x).is_zero());
        }

        #[test]
        fn norm_axioms(x in arb_vec(), y in arb_vec(), c in -5.0f64..5.0) {
            for space in [SpaceTag::L1Seq, SpaceTag::L2Seq] {
                let nx = space.norm_unchecked(&x);
                let ny = space.norm_unchecked(&y);
                let nxy = space.norm_unchecked(&x.add(&y));
                prop_assert!(nxy <= (nx + ny) * (1.0 + 1e-12) + 1e-300);
                let ncx = space.norm_unchecked(&x.scale(c));
                prop_assert!((ncx - c.abs() * nx).abs() <= 1e-12 * (1.0 + ncx));
                prop_assert!((space.dist(&x, &y) - space.norm_unchecked(&x.sub(&y))).abs() <= 1e-12 * (1.0 + nx + ny));
            }
        }

        #[test]
        fn cauchy_schwarz(x in arb_vec(), y in arb_vec()) {
            prop_assert!(inner(&x, &y).abs() <= x.norm2() * y.norm2() * (1.0 + 1e-12));
        }

        #[test]
        fn json_round_trip(x in arb_vec()) {
            let back: SeqVector = serde_json::from_str(&serde_json::to_string(&x).unwrap()).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
