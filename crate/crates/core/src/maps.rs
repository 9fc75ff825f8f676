//! The map zoo and the empirical checkers for (firm) nonexpansiveness.
//!
//! Maps are built for a fixed [`SpaceTag`] from a serialisable
//! [`MapConfig`]; plugin maps are looked up by name in a [`PluginRegistry`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spaces::{SeqVector, SpaceError, SpaceTag};
use crate::verdict::Verdict;

/// Slack above 1 tolerated by the nonexpansiveness checker.
pub const NONEXPANSIVE_SLACK: f64 = 1e-9;
/// Slack below 0 tolerated by the firmness checker.
pub const FIRM_SLACK: f64 = 1e-9;
/// A dense operator whose power-iteration norm exceeds `1 + this` is rejected.
pub const OPERATOR_NORM_REJECT: f64 = 1e-6;
pub const POWER_ITERATIONS: usize = 200;
/// Default support window `|s| ≤ 10⁶` for plugin outputs and orbits.
pub const DEFAULT_SUPPORT_WINDOW: i64 = 1_000_000;
pub const DEFAULT_T_GRID: [f64; 8] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("operator norm estimate {estimate} exceeds 1")]
    NotNonexpansive { estimate: f64 },
    #[error(
        "dense operator must be square {dim}x{dim}, got a row of length {row_len} ({rows} rows)"
    )]
    DenseShape {
        dim: usize,
        rows: usize,
        row_len: usize,
    },
    #[error("{what} is not supported on {space}")]
    Unsupported { what: String, space: SpaceTag },
    #[error("index {0} appears in more than one block")]
    OverlappingBlocks(i64),
    #[error("diagonal coefficient {0} has modulus above 1")]
    DiagonalTooLarge(f64),
    #[error("shift map expects support in 1, 2, …; found index {0}")]
    ShiftDomain(i64),
    #[error("averaging weight must lie in (0, 1), got {0}")]
    BadWeight(f64),
    #[error("edelstein map needs 1 ≤ planes ≤ 170, got {0}")]
    BadPlaneCount(usize),
    #[error("unknown plugin map {0:?}")]
    UnknownPlugin(String),
    #[error("support index {index} outside window |s| ≤ {window}")]
    SupportOverflow { index: i64, window: i64 },
    #[error("map produced a non-finite coefficient")]
    NonFinite,
    #[error("no sample pair with distinct points")]
    NoSamples,
    #[error("empty t grid")]
    EmptyGrid,
}

/// Planar rotation acting on the coordinate pair `(first, second)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationBlock {
    pub first: i64,
    pub second: i64,
    pub angle: f64,
}

/// Linear part of an affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LinearOp {
    Identity,
    /// Row-major `d×d` matrix on `euclidean(d)`.
    Dense {
        rows: Vec<Vec<f64>>,
    },
    /// `x_s ↦ d_s x_s`; indices not listed use `default`.
    Diagonal {
        #[serde(with = "index_map")]
        entries: BTreeMap<i64, f64>,
        default: f64,
    },
    /// Coordinate `s` moves to `s + by`.
    Shift {
        by: i64,
    },
    Rotations {
        blocks: Vec<RotationBlock>,
    },
    /// Exchanges the coordinates of each pair.
    Swap {
        pairs: Vec<(i64, i64)>,
    },
}

mod index_map {
    use std::collections::BTreeMap;

    use serde::ser::SerializeMap;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<i64, f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(m.len()))?;
        for (k, v) in m {
            map.serialize_entry(&k.to_string(), v)?;
        }
        map.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<i64, f64>, D::Error> {
        let raw = BTreeMap::<String, f64>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                k.trim()
                    .parse::<i64>()
                    .map(|i| (i, v))
                    .map_err(|_| serde::de::Error::custom(format!("invalid index {k:?}")))
            })
            .collect()
    }
}

impl LinearOp {
    /// Dense `d×d` matrix of the operator on `euclidean(d)`, if it fits.
    #[allow(clippy::needless_range_loop)] // fills column j
    pub fn to_dense(&self, dim: usize) -> Option<Vec<Vec<f64>>> {
        match self {
            LinearOp::Dense { rows } => (rows.len() == dim).then(|| rows.clone()),
            LinearOp::Shift { .. } => None,
            _ => {
                let mut m = vec![vec![0.0; dim]; dim];
                for j in 0..dim {
                    let col = self.apply_structured(&SeqVector::basis(j as i64 + 1));
                    for (i, v) in col.iter() {
                        if i < 1 || i > dim as i64 {
                            return None;
                        }
                        m[i as usize - 1][j] = v;
                    }
                }
                Some(m)
            }
        }
    }

    fn apply_structured(&self, x: &SeqVector) -> SeqVector {
        match self {
            LinearOp::Identity => x.clone(),
            LinearOp::Dense { rows } => {
                let d = rows.len();
                let xd = x.to_dense(d);
                let y: Vec<f64> = rows
                    .iter()
                    .map(|row| row.iter().zip(&xd).map(|(a, b)| a * b).sum())
                    .collect();
                SeqVector::from_dense(1, &y)
            }
            LinearOp::Diagonal { entries, default } => SeqVector::from_sorted_unchecked(
                x.iter()
                    .map(|(s, v)| (s, entries.get(&s).copied().unwrap_or(*default) * v))
                    .collect(),
            ),
            LinearOp::Shift { by } => x.shifted(*by),
            LinearOp::Rotations { blocks } => {
                let mut out: BTreeMap<i64, f64> = x.iter().collect();
                for b in blocks {
                    let (a, c) = (x.get(b.first), x.get(b.second));
                    let (sin, cos) = b.angle.sin_cos();
                    out.insert(b.first, cos * a - sin * c);
                    out.insert(b.second, sin * a + cos * c);
                }
                SeqVector::from_pairs(out)
            }
            LinearOp::Swap { pairs } => {
                let mut out: BTreeMap<i64, f64> = x.iter().collect();
                for &(i, j) in pairs {
                    out.insert(i, x.get(j));
                    out.insert(j, x.get(i));
                }
                SeqVector::from_pairs(out)
            }
        }
    }

    fn touched_indices(&self) -> Vec<i64> {
        match self {
            LinearOp::Rotations { blocks } => {
                blocks.iter().flat_map(|b| [b.first, b.second]).collect()
            }
            LinearOp::Swap { pairs } => pairs.iter().flat_map(|&(i, j)| [i, j]).collect(),
            LinearOp::Diagonal { entries, .. } => entries.keys().copied().collect(),
            _ => Vec::new(),
        }
    }
}

/// Largest singular value of a square matrix by power iteration on `AᵀA`.
///
/// The iterate starts from a fixed non-symmetric vector so the estimate is
/// reproducible; it is a lower bound that is tight once converged.
pub fn power_iteration_norm(rows: &[Vec<f64>], iterations: usize) -> f64 {
    let d = rows.len();
    if d == 0 {
        return 0.0;
    }
    let matvec = |v: &[f64]| -> Vec<f64> {
        rows.iter()
            .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    };
    let tmatvec = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for (r, &vi) in rows.iter().zip(v) {
            for (o, a) in out.iter_mut().zip(r) {
                *o += a * vi;
            }
        }
        out
    };
    let l2 = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut v: Vec<f64> = (0..d)
        .map(|i| 1.0 + (i as f64 + 1.0).sqrt() * 0.1)
        .collect();
    let n = l2(&v);
    v.iter_mut().for_each(|a| *a /= n);
    let mut estimate = l2(&matvec(&v));
    for _ in 0..iterations {
        let w = tmatvec(&matvec(&v));
        let n = l2(&w);
        if n == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|a| a / n).collect();
        estimate = l2(&matvec(&v));
    }
    estimate
}

/// `x ↦ Ux + v` with `‖U‖ ≤ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    op: LinearOp,
    translation: SeqVector,
    space: SpaceTag,
    norm_estimate: f64,
}

impl AffineMap {
    pub fn new(op: LinearOp, translation: SeqVector, space: SpaceTag) -> Result<Self, MapError> {
        let map = Self::new_unchecked(op, translation, space)?;
        if map.norm_estimate > 1.0 + OPERATOR_NORM_REJECT {
            return Err(MapError::NotNonexpansive {
                estimate: map.norm_estimate,
            });
        }
        Ok(map)
    }

    /// Validates shapes and supports but skips the operator-norm bound.
    pub fn new_unchecked(
        op: LinearOp,
        translation: SeqVector,
        space: SpaceTag,
    ) -> Result<Self, MapError> {
        space.check(&translation)?;
        translation.check_finite()?;
        let unsupported = |what: &str| MapError::Unsupported {
            what: what.into(),
            space,
        };
        let norm_estimate = match &op {
            LinearOp::Identity => 1.0,
            LinearOp::Dense { rows } => {
                let SpaceTag::Euclidean { dim } = space else {
                    return Err(unsupported("dense operator"));
                };
                for row in rows {
                    if row.len() != dim || rows.len() != dim {
                        return Err(MapError::DenseShape {
                            dim,
                            rows: rows.len(),
                            row_len: row.len(),
                        });
                    }
                    if row.iter().any(|a| !a.is_finite()) {
                        return Err(MapError::NonFinite);
                    }
                }
                if rows.len() != dim {
                    return Err(MapError::DenseShape {
                        dim,
                        rows: rows.len(),
                        row_len: dim,
                    });
                }
                power_iteration_norm(rows, POWER_ITERATIONS)
            }
            LinearOp::Diagonal { entries, default } => {
                let worst = entries.values().fold(default.abs(), |m, d| m.max(d.abs()));
                if !worst.is_finite() {
                    return Err(MapError::NonFinite);
                }
                worst
            }
            LinearOp::Shift { .. } => {
                if matches!(space, SpaceTag::Euclidean { .. }) {
                    return Err(unsupported("coordinate shift"));
                }
                1.0
            }
            LinearOp::Rotations { blocks } => {
                if !space.is_hilbert() {
                    return Err(unsupported("rotation"));
                }
                if blocks.iter().any(|b| !b.angle.is_finite()) {
                    return Err(MapError::NonFinite);
                }
                1.0
            }
            LinearOp::Swap { .. } => 1.0,
        };
        let mut seen = BTreeSet::new();
        if !matches!(op, LinearOp::Diagonal { .. }) {
            for i in op.touched_indices() {
                if !seen.insert(i) {
                    return Err(MapError::OverlappingBlocks(i));
                }
            }
        }
        for i in op.touched_indices() {
            space.check(&SeqVector::basis(i))?;
        }
        Ok(Self {
            op,
            translation,
            space,
            norm_estimate,
        })
    }

    /// Pure translation `x ↦ x + v`.
    pub fn translation(v: SeqVector, space: SpaceTag) -> Result<Self, MapError> {
        Self::new(LinearOp::Identity, v, space)
    }

    pub fn op(&self) -> &LinearOp {
        &self.op
    }

    pub fn translation_vector(&self) -> &SeqVector {
        &self.translation
    }

    pub fn space(&self) -> SpaceTag {
        self.space
    }

    pub fn norm_estimate(&self) -> f64 {
        self.norm_estimate
    }

    /// `Ux` without the translation.
    pub fn apply_linear(&self, x: &SeqVector) -> SeqVector {
        self.op.apply_structured(x)
    }

    /// Dense matrix of `U` when the space is euclidean.
    pub fn dense(&self) -> Option<Vec<Vec<f64>>> {
        match self.space {
            SpaceTag::Euclidean { dim } => self.op.to_dense(dim),
            _ => None,
        }
    }

    fn apply(&self, x: &SeqVector) -> SeqVector {
        self.op.apply_structured(x).add(&self.translation)
    }
}

/// `(x₁, x₂, …) ↦ (1, x₁, x₂, …)` on sequences indexed from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftMap {
    space: SpaceTag,
}

impl ShiftMap {
    pub fn new(space: SpaceTag) -> Result<Self, MapError> {
        if matches!(space, SpaceTag::Euclidean { .. }) {
            return Err(MapError::Unsupported {
                what: "shift map".into(),
                space,
            });
        }
        Ok(Self { space })
    }

    fn apply(&self, x: &SeqVector) -> Result<SeqVector, MapError> {
        if let Some((lo, _)) = x.support_bounds() {
            if lo < 1 {
                return Err(MapError::ShiftDomain(lo));
            }
        }
        let mut entries = Vec::with_capacity(x.support_len() + 1);
        entries.push((1, 1.0));
        entries.extend(x.iter().map(|(s, v)| (s + 1, v)));
        Ok(SeqVector::from_sorted_unchecked(entries))
    }
}

/// Product of rotations by `2π/n!` about `(1, 0)` in the planes
/// `(2n − 1, 2n)`, `n = 1…N`; the identity on every other coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct EdelsteinIsometry {
    planes: usize,
    space: SpaceTag,
    cos_sin: Vec<(f64, f64)>,
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

impl EdelsteinIsometry {
    pub fn new(planes: usize, space: SpaceTag) -> Result<Self, MapError> {
        if planes == 0 || planes > 170 {
            return Err(MapError::BadPlaneCount(planes));
        }
        match space {
            SpaceTag::L2Seq => {}
            SpaceTag::Euclidean { dim } if dim >= 2 * planes => {}
            _ => {
                return Err(MapError::Unsupported {
                    what: format!("edelstein isometry with {planes} planes"),
                    space,
                })
            }
        }
        let cos_sin = (1..=planes)
            .map(|n| match n {
                // 2π and π: use the exact values
                1 => (1.0, 0.0),
                2 => (-1.0, 0.0),
                _ => {
                    let (s, c) = (2.0 * PI / factorial(n)).sin_cos();
                    (c, s)
                }
            })
            .collect();
        Ok(Self {
            planes,
            space,
            cos_sin,
        })
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    fn apply(&self, x: &SeqVector) -> SeqVector {
        let top = 2 * self.planes as i64;
        let mut out: Vec<(i64, f64)> = x.iter().filter(|&(s, _)| s < 1 || s > top).collect();
        for (k, &(c, s)) in self.cos_sin.iter().enumerate() {
            let (i, j) = (2 * k as i64 + 1, 2 * k as i64 + 2);
            let (a, b) = (x.get(i) - 1.0, x.get(j));
            out.push((i, 1.0 + c * a - s * b));
            out.push((j, s * a + c * b));
        }
        SeqVector::from_pairs(out)
    }

    /// Norm of the plane-`n` component of `T^k 0`: `2|sin(πk/n!)|`.
    pub fn plane_norm_closed_form(n: usize, k: u64) -> f64 {
        2.0 * (PI * k as f64 / factorial(n)).sin().abs()
    }

    /// `‖T^k 0‖² = Σ_n 4 sin²(πk/n!)` over the stored planes.
    pub fn orbit_norm_sq_closed_form(&self, k: u64) -> f64 {
        (1..=self.planes)
            .map(|n| Self::plane_norm_closed_form(n, k).powi(2))
            .sum()
    }

    /// Contribution `Σ_{n > N} 4 sin²(πk/n!)` the truncation discards,
    /// summed until terms drop below `1e-300`.
    pub fn truncation_tail_sq(&self, k: u64) -> f64 {
        let mut acc = 0.0;
        for n in self.planes + 1..=170 {
            let term = Self::plane_norm_closed_form(n, k).powi(2);
            acc += term;
            if term < 1e-300 {
                break;
            }
        }
        acc
    }
}

/// `x ↦ (1 − λ)x + λ S(x)`.
#[derive(Debug, Clone)]
pub struct AveragedMap {
    inner: Box<Map>,
    weight: f64,
}

impl AveragedMap {
    pub fn new(inner: Map, weight: f64) -> Result<Self, MapError> {
        if !(weight > 0.0 && weight < 1.0) {
            return Err(MapError::BadWeight(weight));
        }
        Ok(Self {
            inner: Box::new(inner),
            weight,
        })
    }

    pub fn half(inner: Map) -> Self {
        Self::new(inner, 0.5).expect("0.5 is a valid weight")
    }

    pub fn inner(&self) -> &Map {
        &self.inner
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }
}

pub type PluginRule = Arc<dyn Fn(&SeqVector) -> SeqVector + Send + Sync>;

/// Externally supplied point map, audited only empirically.
#[derive(Clone)]
pub struct PluginMap {
    name: String,
    rule: PluginRule,
    space: SpaceTag,
    window: i64,
}

impl fmt::Debug for PluginMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PluginMap")
            .field("name", &self.name)
            .field("space", &self.space)
            .field("window", &self.window)
            .finish()
    }
}

impl PluginMap {
    pub fn new(name: impl Into<String>, space: SpaceTag, rule: PluginRule) -> Self {
        Self {
            name: name.into(),
            rule,
            space,
            window: DEFAULT_SUPPORT_WINDOW,
        }
    }

    pub fn with_window(mut self, window: i64) -> Self {
        self.window = window;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn apply(&self, x: &SeqVector) -> Result<SeqVector, MapError> {
        let y = (self.rule)(x);
        check_window(&y, self.window)?;
        Ok(y)
    }
}

pub(crate) fn check_window(x: &SeqVector, window: i64) -> Result<(), MapError> {
    if let Some((lo, hi)) = x.support_bounds() {
        for index in [lo, hi] {
            if index.abs() > window {
                return Err(MapError::SupportOverflow { index, window });
            }
        }
    }
    Ok(())
}

/// Plugin maps addressable by name from configs.
#[derive(Debug, Clone, Default)]
pub struct PluginRegistry {
    maps: HashMap<String, PluginMap>,
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, map: PluginMap) {
        self.maps.insert(map.name.clone(), map);
    }

    pub fn get(&self, name: &str) -> Option<&PluginMap> {
        self.maps.get(name)
    }
}

/// A member of the zoo.
#[derive(Debug, Clone)]
pub enum Map {
    Affine(AffineMap),
    Shift(ShiftMap),
    Edelstein(EdelsteinIsometry),
    Averaged(AveragedMap),
    Plugin(PluginMap),
}

impl Map {
    pub fn space(&self) -> SpaceTag {
        match self {
            Map::Affine(m) => m.space,
            Map::Shift(m) => m.space,
            Map::Edelstein(m) => m.space,
            Map::Averaged(m) => m.inner.space(),
            Map::Plugin(m) => m.space,
        }
    }

    /// One application of the map; the output is canonical and finite.
    pub fn apply(&self, x: &SeqVector) -> Result<SeqVector, MapError> {
        self.space().check(x)?;
        let y = match self {
            Map::Affine(m) => m.apply(x),
            Map::Shift(m) => m.apply(x)?,
            Map::Edelstein(m) => m.apply(x),
            Map::Averaged(m) => {
                let s = m.inner.apply(x)?;
                x.lincomb(1.0 - m.weight, &s, m.weight)
            }
            Map::Plugin(m) => m.apply(x)?,
        };
        y.check_finite().map_err(|_| MapError::NonFinite)?;
        self.space().check(&y)?;
        Ok(y)
    }

    /// Structural maps carry a proof of nonexpansiveness; plugins do not.
    pub fn is_certified(&self) -> bool {
        match self {
            Map::Plugin(_) => false,
            Map::Averaged(m) => m.inner.is_certified(),
            Map::Affine(m) => m.norm_estimate <= 1.0 + OPERATOR_NORM_REJECT,
            _ => true,
        }
    }

    /// Half-average of a certified map on a Hilbert space.
    pub fn is_firm_by_construction(&self) -> bool {
        match self {
            Map::Averaged(m) => {
                m.weight <= 0.5 && m.inner.is_certified() && self.space().is_hilbert()
            }
            _ => false,
        }
    }

    pub fn to_config(&self) -> MapConfig {
        match self {
            Map::Affine(m) => MapConfig::Affine {
                op: m.op.clone(),
                translation: m.translation.clone(),
            },
            Map::Shift(_) => MapConfig::Shift,
            Map::Edelstein(m) => MapConfig::Edelstein { planes: m.planes },
            Map::Averaged(m) => MapConfig::Averaged {
                inner: Box::new(m.inner.to_config()),
                weight: m.weight,
            },
            Map::Plugin(m) => MapConfig::Plugin {
                name: m.name.clone(),
            },
        }
    }
}

fn default_weight() -> f64 {
    0.5
}

/// Serialised form of a [`Map`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapConfig {
    Affine {
        op: LinearOp,
        #[serde(default)]
        translation: SeqVector,
    },
    Shift,
    Edelstein {
        planes: usize,
    },
    Averaged {
        inner: Box<MapConfig>,
        #[serde(default = "default_weight")]
        weight: f64,
    },
    Plugin {
        name: String,
    },
}

impl MapConfig {
    pub fn build(&self, space: SpaceTag, plugins: &PluginRegistry) -> Result<Map, MapError> {
        Ok(match self {
            MapConfig::Affine { op, translation } => {
                Map::Affine(AffineMap::new(op.clone(), translation.clone(), space)?)
            }
            MapConfig::Shift => Map::Shift(ShiftMap::new(space)?),
            MapConfig::Edelstein { planes } => {
                Map::Edelstein(EdelsteinIsometry::new(*planes, space)?)
            }
            MapConfig::Averaged { inner, weight } => {
                Map::Averaged(AveragedMap::new(inner.build(space, plugins)?, *weight)?)
            }
            MapConfig::Plugin { name } => {
                let p = plugins
                    .get(name)
                    .ok_or_else(|| MapError::UnknownPlugin(name.clone()))?;
                if p.space != space {
                    return Err(MapError::Unsupported {
                        what: format!("plugin {name:?} declared on {}", p.space),
                        space,
                    });
                }
                Map::Plugin(p.clone())
            }
        })
    }
}

/// Largest observed expansion `‖Tx − Ty‖ / ‖x − y‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonexpansiveReport {
    pub max_ratio: f64,
    pub pairs_used: usize,
    pub verdict: Verdict,
}

pub fn check_nonexpansive(
    map: &Map,
    samples: &[(SeqVector, SeqVector)],
) -> Result<NonexpansiveReport, MapError> {
    let space = map.space();
    let mut max_ratio: f64 = 0.0;
    let mut pairs_used = 0;
    for (x, y) in samples {
        let d = space.dist(x, y);
        if d == 0.0 {
            continue;
        }
        let (tx, ty) = (map.apply(x)?, map.apply(y)?);
        max_ratio = max_ratio.max(space.dist(&tx, &ty) / d);
        pairs_used += 1;
    }
    if pairs_used == 0 {
        return Err(MapError::NoSamples);
    }
    Ok(NonexpansiveReport {
        max_ratio,
        pairs_used,
        verdict: Verdict::from_pass(max_ratio <= 1.0 + NONEXPANSIVE_SLACK),
    })
}

/// Smallest `‖(1−t)(Tx−Ty) + t(x−y)‖ − ‖Tx−Ty‖` and where it occurred.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirmReport {
    pub worst_margin: f64,
    pub worst_pair: usize,
    pub worst_t: f64,
    pub verdict: Verdict,
}

pub fn check_firm(
    map: &Map,
    samples: &[(SeqVector, SeqVector)],
    t_grid: &[f64],
) -> Result<FirmReport, MapError> {
    if t_grid.is_empty() {
        return Err(MapError::EmptyGrid);
    }
    if samples.is_empty() {
        return Err(MapError::NoSamples);
    }
    let space = map.space();
    let mut worst = FirmReport {
        worst_margin: f64::INFINITY,
        worst_pair: 0,
        worst_t: t_grid[0],
        verdict: Verdict::Pass,
    };
    for (k, (x, y)) in samples.iter().enumerate() {
        let dt = map.apply(x)?.sub(&map.apply(y)?);
        let dx = x.sub(y);
        let base = space.norm_unchecked(&dt);
        for &t in t_grid {
            let margin = space.norm_unchecked(&dt.lincomb(1.0 - t, &dx, t)) - base;
            if margin < worst.worst_margin {
                worst.worst_margin = margin;
                worst.worst_pair = k;
                worst.worst_t = t;
            }
        }
    }
    worst.verdict = Verdict::from_pass(worst.worst_margin >= -FIRM_SLACK);
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::Sampler;

    const E2: SpaceTag = SpaceTag::Euclidean { dim: 2 };

    fn rotation(angle: f64, v: SeqVector) -> Map {
        let (s, c) = angle.sin_cos();
        Map::Affine(
            AffineMap::new(
                LinearOp::Dense {
                    rows: vec![vec![c, -s], vec![s, c]],
                },
                v,
                E2,
            )
            .unwrap(),
        )
    }

    fn identity(space: SpaceTag) -> Map {
        Map::Affine(AffineMap::new(LinearOp::Identity, SeqVector::zero(), space).unwrap())
    }

    #[test]
    fn apply_examples() {
        let shift = Map::Shift(ShiftMap::new(SpaceTag::L1Seq).unwrap());
        assert_eq!(
            shift.apply(&SeqVector::zero()).unwrap(),
            SeqVector::basis(1)
        );
        let x = SeqVector::from_pairs([(1, 0.5), (2, -3.0)]);
        assert_eq!(identity(E2).apply(&x).unwrap(), x);

        let ed = EdelsteinIsometry::new(3, SpaceTag::L2Seq).unwrap();
        let y = Map::Edelstein(ed).apply(&SeqVector::zero()).unwrap();
        let plane = |n: i64| (y.get(2 * n - 1).powi(2) + y.get(2 * n).powi(2)).sqrt();
        assert_eq!(plane(1), 0.0);
        assert_eq!(plane(2), 2.0);
        assert!((plane(3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shift_rejects_nonpositive_indices() {
        let shift = Map::Shift(ShiftMap::new(SpaceTag::L1Seq).unwrap());
        assert_eq!(
            shift.apply(&SeqVector::basis(0)),
            Err(MapError::ShiftDomain(0))
        );
        assert!(ShiftMap::new(E2).is_err());
    }

    #[test]
    fn shift_orbit_closed_form() {
        let shift = Map::Shift(ShiftMap::new(SpaceTag::L1Seq).unwrap());
        let mut x = SeqVector::zero();
        for n in 1..=10_000i64 {
            x = shift.apply(&x).unwrap();
            if n % 997 == 0 || n == 10_000 {
                assert_eq!(x.support_len(), n as usize);
                assert!(x
                    .iter()
                    .enumerate()
                    .all(|(k, (s, v))| s == k as i64 + 1 && v == 1.0));
            }
        }
    }

    #[test]
    fn dense_norm_check_rejects_expansion() {
        let e1 = SpaceTag::Euclidean { dim: 1 };
        let op = LinearOp::Dense {
            rows: vec![vec![2.0]],
        };
        assert!(matches!(
            AffineMap::new(op.clone(), SeqVector::zero(), e1),
            Err(MapError::NotNonexpansive { .. })
        ));
        let m = Map::Affine(AffineMap::new_unchecked(op, SeqVector::zero(), e1).unwrap());
        let pairs = Sampler::new(1, e1).pairs(100);
        let rep = check_nonexpansive(&m, &pairs).unwrap();
        assert!((rep.max_ratio - 2.0).abs() < 1e-12);
        assert_eq!(rep.verdict, Verdict::Fail);
    }

    #[test]
    fn power_iteration_matches_known_norms() {
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.3, 0.0],
            vec![0.0, 0.0, 0.3],
        ];
        assert!((power_iteration_norm(&rows, 200) - 1.0).abs() < 1e-12);
        let rows = vec![vec![0.0, -1.0], vec![1.0, 0.0]];
        assert!((power_iteration_norm(&rows, 200) - 1.0).abs() < 1e-12);
        let rows = vec![vec![1.0, 1.0], vec![0.0, 1.0]];
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((power_iteration_norm(&rows, 200) - golden).abs() < 1e-9);
    }

    #[test]
    fn nonexpansive_examples() {
        let shift = Map::Shift(ShiftMap::new(SpaceTag::L1Seq).unwrap());
        let pairs = Sampler::new(5, SpaceTag::L1Seq).pairs(1000);
        let rep = check_nonexpansive(&shift, &pairs).unwrap();
        assert!((rep.max_ratio - 1.0).abs() <= 1e-12);
        assert_eq!(rep.verdict, Verdict::Pass);

        let e1 = SpaceTag::Euclidean { dim: 1 };
        let neg = Map::Affine(
            AffineMap::new(
                LinearOp::Dense {
                    rows: vec![vec![-1.0]],
                },
                SeqVector::zero(),
                e1,
            )
            .unwrap(),
        );
        let avg = Map::Averaged(AveragedMap::half(neg));
        let rep = check_nonexpansive(&avg, &Sampler::new(2, e1).pairs(50)).unwrap();
        assert_eq!(rep.max_ratio, 0.0);
    }

    #[test]
    fn every_certified_zoo_map_is_nonexpansive() {
        let maps: Vec<Map> = vec![
            Map::Shift(ShiftMap::new(SpaceTag::L1Seq).unwrap()),
            Map::Shift(ShiftMap::new(SpaceTag::L2Seq).unwrap()),
            Map::Edelstein(EdelsteinIsometry::new(6, SpaceTag::L2Seq).unwrap()),
            rotation(0.7, SeqVector::basis(1)),
            Map::Affine(
                AffineMap::new(
                    LinearOp::Rotations {
                        blocks: vec![RotationBlock {
                            first: 3,
                            second: 8,
                            angle: 1.1,
                        }],
                    },
                    SeqVector::basis(2),
                    SpaceTag::L2Seq,
                )
                .unwrap(),
            ),
            Map::Affine(
                AffineMap::new(
                    LinearOp::Diagonal {
                        entries: BTreeMap::from([(1, -0.5), (4, 0.9)]),
                        default: 1.0,
                    },
                    SeqVector::basis(3),
                    SpaceTag::L1Seq,
                )
                .unwrap(),
            ),
            Map::Affine(
                AffineMap::new(
                    LinearOp::Swap {
                        pairs: vec![(1, 2)],
                    },
                    SeqVector::zero(),
                    SpaceTag::L1Seq,
                )
                .unwrap(),
            ),
            Map::Affine(
                AffineMap::new(
                    LinearOp::Shift { by: 3 },
                    SeqVector::basis(-1),
                    SpaceTag::L1Seq,
                )
                .unwrap(),
            ),
            Map::Averaged(AveragedMap::new(rotation(2.0, SeqVector::zero()), 0.3).unwrap()),
        ];
        for (k, m) in maps.iter().enumerate() {
            let pairs = Sampler::new(k as u64, m.space()).pairs(10_000);
            let rep = check_nonexpansive(m, &pairs).unwrap();
            assert!(rep.max_ratio <= 1.0 + 1e-9, "map {k}: {}", rep.max_ratio);
        }
    }

    #[test]
    fn rotation_rejected_on_l1() {
        let op = LinearOp::Rotations {
            blocks: vec![RotationBlock {
                first: 1,
                second: 2,
                angle: 0.3,
            }],
        };
        assert!(AffineMap::new(op, SeqVector::zero(), SpaceTag::L1Seq).is_err());
        let op = LinearOp::Swap {
            pairs: vec![(1, 2), (2, 3)],
        };
        assert_eq!(
            AffineMap::new(op, SeqVector::zero(), SpaceTag::L1Seq),
            Err(MapError::OverlappingBlocks(2))
        );
    }

    #[test]
    fn firm_examples() {
        let pairs = Sampler::new(3, E2).pairs(200);
        let id = check_firm(&identity(E2), &pairs, &DEFAULT_T_GRID).unwrap();
        assert!(id.worst_margin.abs() < 1e-15);
        assert_eq!(id.verdict, Verdict::Pass);

        let rot = rotation(PI / 2.0, SeqVector::zero());
        let witness = [(SeqVector::basis(1), SeqVector::zero())];
        let rep = check_firm(&rot, &witness, &[0.5]).unwrap();
        assert!((rep.worst_margin - (0.5f64.sqrt() - 1.0)).abs() < 1e-12);
        assert_eq!(rep.verdict, Verdict::Fail);

        let avg = Map::Averaged(AveragedMap::half(rot));
        let rep = check_firm(&avg, &witness, &DEFAULT_T_GRID).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass);
    }

    #[test]
    fn half_average_of_nonexpansive_is_firm() {
        for (k, angle) in [0.3, 1.0, PI / 2.0, 2.5, PI].into_iter().enumerate() {
            let s = rotation(angle, SeqVector::from_pairs([(1, 0.2), (2, -1.0)]));
            let pairs = Sampler::new(100 + k as u64, E2).pairs(2000);
            assert_eq!(
                check_nonexpansive(&s, &pairs).unwrap().verdict,
                Verdict::Pass
            );
            let avg = Map::Averaged(AveragedMap::half(s));
            assert!(avg.is_firm_by_construction());
            assert_eq!(
                check_firm(&avg, &pairs, &DEFAULT_T_GRID).unwrap().verdict,
                Verdict::Pass
            );
        }
    }

    #[test]
    fn edelstein_matches_closed_form() {
        let ed = EdelsteinIsometry::new(6, SpaceTag::L2Seq).unwrap();
        let map = Map::Edelstein(ed.clone());
        let mut x = SeqVector::zero();
        for k in 1..=720u64 {
            x = map.apply(&x).unwrap();
            for n in 1..=6usize {
                let (i, j) = (2 * n as i64 - 1, 2 * n as i64);
                let got = (x.get(i).powi(2) + x.get(j).powi(2)).sqrt();
                let want = EdelsteinIsometry::plane_norm_closed_form(n, k);
                assert!((got - want).abs() < 1e-9, "k={k} n={n}");
            }
        }
        // plane 7 alone contributes 4 sin²(πk/7!)
        let p7 = |k: f64| 4.0 * (PI * k / 5040.0).sin().powi(2);
        assert!((ed.truncation_tail_sq(1) - p7(1.0)).abs() < 0.02 * p7(1.0));
        assert!(ed.truncation_tail_sq(720) >= p7(720.0));
        assert!(EdelsteinIsometry::new(4, SpaceTag::Euclidean { dim: 7 }).is_err());
    }

    #[test]
    fn plugin_window_overflow() {
        let rule: PluginRule = Arc::new(|x: &SeqVector| x.shifted(5));
        let p = PluginMap::new("far", SpaceTag::L1Seq, rule).with_window(10);
        let m = Map::Plugin(p.clone());
        assert!(m.apply(&SeqVector::basis(4)).is_ok());
        assert_eq!(
            m.apply(&SeqVector::basis(6)),
            Err(MapError::SupportOverflow {
                index: 11,
                window: 10
            })
        );
        let mut reg = PluginRegistry::new();
        reg.register(p);
        let cfg = MapConfig::Plugin { name: "far".into() };
        assert!(cfg.build(SpaceTag::L1Seq, &reg).is_ok());
        assert!(cfg.build(SpaceTag::L2Seq, &reg).is_err());
        assert!(MapConfig::Plugin {
            name: "nope".into()
        }
        .build(SpaceTag::L1Seq, &reg)
        .is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let text = r#"{"kind":"averaged","inner":{"kind":"affine","op":{"type":"dense","rows":[[0.0,-1.0],[1.0,0.0]]},"translation":{"1":1.0}},"weight":0.5}"#;
        let cfg: MapConfig = serde_json::from_str(text).unwrap();
        let map = cfg.build(E2, &PluginRegistry::new()).unwrap();
        assert_eq!(serde_json::to_string(&map.to_config()).unwrap(), text);
        let diag: MapConfig = serde_json::from_str(
            r#"{"kind":"affine","op":{"type":"diagonal","entries":{"10":0.5,"2":-1.0},"default":1.0}}"#,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&diag).unwrap(),
            r#"{"kind":"affine","op":{"type":"diagonal","entries":{"2":-1.0,"10":0.5},"default":1.0},"translation":{}}"#
        );
    }

    #[test]
    fn structured_ops_densify() {
        let op = LinearOp::Diagonal {
            entries: BTreeMap::from([(2, 0.5)]),
            default: 1.0,
        };
        assert_eq!(
            op.to_dense(2).unwrap(),
            vec![vec![1.0, 0.0], vec![0.0, 0.5]]
        );
        let op = LinearOp::Swap {
            pairs: vec![(1, 2)],
        };
        assert_eq!(
            op.to_dense(2).unwrap(),
            vec![vec![0.0, 1.0], vec![1.0, 0.0]]
        );
    }
}
