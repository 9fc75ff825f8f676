//! Metric functionals: the internal points `h_y(x) = ‖x − y‖ − ‖y‖`, the
//! four Hilbert-space forms, the coordinatewise `ℓ¹` forms, linear
//! minorants beneath them, and numerical fitting of orbit limits.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spaces::{inner, SeqVector, SpaceTag};

/// Slack on the unit-norm constraint of a ray direction.
pub const RAY_UNIT_TOL: f64 = 1e-9;
/// Relative residual gap under which two Hilbert forms count as a tie.
pub const AMBIGUITY_RATIO: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FunctionalError {
    #[error("radius must lie in (0, ∞), got {0}")]
    BadRadius(f64),
    #[error("ball direction needs ‖v‖ < 1, got {0}")]
    BallDirection(f64),
    #[error("ray direction needs ‖v‖ = 1 (±{RAY_UNIT_TOL}), got {0}")]
    RayDirection(f64),
    #[error("linear direction needs ‖v‖ ≤ 1, got {0}")]
    LinearDirection(f64),
    #[error("eps must be -1 or +1, got {0}")]
    BadSign(i8),
    #[error("coefficient bound violated: dual norm {norm} exceeds 1")]
    DualNorm { norm: f64 },
    #[error("a 2-norm pairing cannot carry a nonzero default coefficient")]
    DefaultInHilbertDual,
    #[error("non-finite parameter")]
    NonFinite,
    #[error("invalid index {0:?}")]
    BadIndex(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("orbit is empty")]
    EmptyOrbit,
    #[error("no probes supplied")]
    NoProbes,
    #[error("not converged: probe {probe} oscillates by {oscillation:e} over the last quarter (tol {tol:e})")]
    NotConverged {
        probe: usize,
        oscillation: f64,
        tol: f64,
    },
    #[error("coordinate {index} neither settles nor escapes over the last quarter")]
    CoordinateUnsettled { index: i64 },
    #[error("ambiguous fit: {first} (residual {first_residual:e}) vs {second} (residual {second_residual:e})")]
    AmbiguousFit {
        first: String,
        first_residual: f64,
        second: String,
        second_residual: f64,
    },
}

/// Per-coordinate rule of an `ℓ¹` metric functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CoordSpec {
    /// Linear term `ε·x_s`.
    #[serde(rename = "eps")]
    Eps(i8),
    /// Centred term `|x_s − z| − |z|`.
    #[serde(rename = "z")]
    Center(f64),
}

impl CoordSpec {
    #[inline]
    fn eval(self, xs: f64) -> f64 {
        match self {
            CoordSpec::Eps(e) => f64::from(e) * xs,
            CoordSpec::Center(z) => (xs - z).abs() - z.abs(),
        }
    }

    /// Slope of a linear minorant of the coordinate term.
    fn minorant_slope(self) -> f64 {
        match self {
            CoordSpec::Eps(e) => f64::from(e),
            CoordSpec::Center(z) if z > 0.0 => -1.0,
            CoordSpec::Center(z) if z < 0.0 => 1.0,
            CoordSpec::Center(_) => 0.0,
        }
    }

    fn validate(self) -> Result<Self, FunctionalError> {
        match self {
            CoordSpec::Eps(e) if e != 1 && e != -1 => Err(FunctionalError::BadSign(e)),
            CoordSpec::Center(z) if !z.is_finite() => Err(FunctionalError::NonFinite),
            other => Ok(other),
        }
    }
}

/// `h(x) = Σ_{EPS} ε_s x_s + Σ_{CENTER} (|x_s − z_s| − |z_s|)`.
///
/// Finitely many indices carry an explicit rule; every other index uses
/// `default`. On a finitely supported `x` only the rules on `supp(x)` are
/// read, so the sum is finite and `h(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawL1")]
pub struct L1Functional {
    overrides: BTreeMap<i64, CoordSpec>,
    default: CoordSpec,
}

#[derive(Deserialize)]
struct RawL1 {
    #[serde(default)]
    overrides: BTreeMap<String, CoordSpec>,
    default: CoordSpec,
}

impl TryFrom<RawL1> for L1Functional {
    type Error = FunctionalError;

    fn try_from(raw: RawL1) -> Result<Self, FunctionalError> {
        L1Functional::new(parse_keys(raw.overrides)?, raw.default)
    }
}

fn parse_keys<V>(raw: BTreeMap<String, V>) -> Result<BTreeMap<i64, V>, FunctionalError> {
    raw.into_iter()
        .map(|(k, v)| {
            k.trim()
                .parse::<i64>()
                .map(|s| (s, v))
                .map_err(|_| FunctionalError::BadIndex(k))
        })
        .collect()
}

impl L1Functional {
    pub fn new(
        overrides: BTreeMap<i64, CoordSpec>,
        default: CoordSpec,
    ) -> Result<Self, FunctionalError> {
        default.validate()?;
        for spec in overrides.values() {
            spec.validate()?;
        }
        Ok(Self { overrides, default })
    }

    /// Same rule on every index.
    pub fn uniform(spec: CoordSpec) -> Result<Self, FunctionalError> {
        Self::new(BTreeMap::new(), spec)
    }

    /// The norm `‖x‖₁`, i.e. every coordinate `CENTER(0)`.
    pub fn norm() -> Self {
        Self {
            overrides: BTreeMap::new(),
            default: CoordSpec::Center(0.0),
        }
    }

    pub fn spec(&self, s: i64) -> CoordSpec {
        self.overrides.get(&s).copied().unwrap_or(self.default)
    }

    pub fn overrides(&self) -> &BTreeMap<i64, CoordSpec> {
        &self.overrides
    }

    pub fn default_spec(&self) -> CoordSpec {
        self.default
    }

    /// True when every rule is `CENTER(0)`, so `h = ‖·‖₁`.
    pub fn is_norm(&self) -> bool {
        let zero = |c: &CoordSpec| matches!(c, CoordSpec::Center(z) if *z == 0.0);
        zero(&self.default) && self.overrides.values().all(zero)
    }

    pub fn eval(&self, x: &SeqVector) -> f64 {
        x.iter().fold(0.0, |a, (s, xs)| a + self.spec(s).eval(xs))
    }
}

/// Norm in which a [`LinearFunctional`] is asserted to have norm ≤ 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualNorm {
    /// Coefficient bound `sup |c_s| ≤ 1`, the dual of `ℓ¹`.
    Inf,
    /// `Σ c_s² ≤ 1`, the Hilbert dual.
    Two,
}

/// Continuous linear functional `x ↦ Σ_s c_s x_s`.
///
/// Indices without an explicit coefficient use `default`; this lets a
/// bounded `ℓ^∞` pairing such as `x ↦ Σ_s x_s` be stored finitely.
/// Explicit zero coefficients are kept so they can override the default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLinear")]
pub struct LinearFunctional {
    coeffs: BTreeMap<i64, f64>,
    default: f64,
    dual_norm: DualNorm,
}

#[derive(Deserialize)]
struct RawLinear {
    #[serde(default)]
    coeffs: BTreeMap<String, f64>,
    #[serde(default)]
    default: f64,
    dual_norm: DualNorm,
}

impl TryFrom<RawLinear> for LinearFunctional {
    type Error = FunctionalError;

    fn try_from(raw: RawLinear) -> Result<Self, FunctionalError> {
        LinearFunctional::new(parse_keys(raw.coeffs)?, raw.default, raw.dual_norm)
    }
}

impl LinearFunctional {
    pub fn new(
        coeffs: BTreeMap<i64, f64>,
        default: f64,
        dual_norm: DualNorm,
    ) -> Result<Self, FunctionalError> {
        if !default.is_finite() || coeffs.values().any(|c| !c.is_finite()) {
            return Err(FunctionalError::NonFinite);
        }
        if dual_norm == DualNorm::Two && default != 0.0 {
            return Err(FunctionalError::DefaultInHilbertDual);
        }
        let f = Self {
            coeffs,
            default,
            dual_norm,
        };
        let n = f.dual_norm_value();
        if n > 1.0 + 1e-12 {
            return Err(FunctionalError::DualNorm { norm: n });
        }
        Ok(f)
    }

    /// Hilbert pairing `x ↦ (x, q)`.
    pub fn from_vector(q: &SeqVector) -> Result<Self, FunctionalError> {
        Self::new(q.iter().collect(), 0.0, DualNorm::Two)
    }

    pub fn zero(dual_norm: DualNorm) -> Self {
        Self {
            coeffs: BTreeMap::new(),
            default: 0.0,
            dual_norm,
        }
    }

    pub fn coefficient(&self, s: i64) -> f64 {
        self.coeffs.get(&s).copied().unwrap_or(self.default)
    }

    pub fn coeffs(&self) -> &BTreeMap<i64, f64> {
        &self.coeffs
    }

    pub fn default_coefficient(&self) -> f64 {
        self.default
    }

    pub fn dual_norm(&self) -> DualNorm {
        self.dual_norm
    }

    pub fn dual_norm_value(&self) -> f64 {
        match self.dual_norm {
            DualNorm::Inf => self
                .coeffs
                .values()
                .fold(self.default.abs(), |m, c| m.max(c.abs())),
            DualNorm::Two => self.coeffs.values().fold(0.0, |a: f64, c| a + c * c).sqrt(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.default == 0.0 && self.coeffs.values().all(|&c| c == 0.0)
    }

    pub fn eval(&self, x: &SeqVector) -> f64 {
        x.iter()
            .fold(0.0, |a, (s, xs)| a + self.coefficient(s) * xs)
    }

    /// `−f`.
    pub fn negated(&self) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|(&s, &c)| (s, -c)).collect(),
            default: -self.default,
            dual_norm: self.dual_norm,
        }
    }
}

/// A metric functional from one of the catalogs, or an internal point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase", try_from = "RawFunctional")]
pub enum MetricFunctional {
    /// `h(x) = ‖x‖`.
    Norm,
    /// `h(x) = √(‖x‖² − 2(x, rv) + r²) − r` with `‖v‖ < 1`.
    Ball { r: f64, v: SeqVector },
    /// `h(x) = ‖x − rv‖ − r` with `‖v‖ = 1`.
    Ray { r: f64, v: SeqVector },
    /// `h(x) = −(x, v)` with `‖v‖ ≤ 1`.
    Linear { v: SeqVector },
    /// Coordinatewise `ℓ¹` form.
    L1(L1Functional),
    /// `h_y(x) = ‖x − y‖ − ‖y‖`.
    Internal { y: SeqVector, space: SpaceTag },
}

#[derive(Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
enum RawFunctional {
    Norm,
    Ball { r: f64, v: SeqVector },
    Ray { r: f64, v: SeqVector },
    Linear { v: SeqVector },
    L1(L1Functional),
    Internal { y: SeqVector, space: SpaceTag },
}

impl TryFrom<RawFunctional> for MetricFunctional {
    type Error = FunctionalError;

    fn try_from(raw: RawFunctional) -> Result<Self, FunctionalError> {
        match raw {
            RawFunctional::Norm => Ok(Self::Norm),
            RawFunctional::Ball { r, v } => Self::ball(r, v),
            RawFunctional::Ray { r, v } => Self::ray(r, v),
            RawFunctional::Linear { v } => Self::linear(v),
            RawFunctional::L1(h) => Ok(Self::L1(h)),
            RawFunctional::Internal { y, space } => Ok(phi(y, space)),
        }
    }
}

fn check_radius(r: f64) -> Result<(), FunctionalError> {
    if r.is_finite() && r > 0.0 {
        Ok(())
    } else {
        Err(FunctionalError::BadRadius(r))
    }
}

impl MetricFunctional {
    pub fn ball(r: f64, v: SeqVector) -> Result<Self, FunctionalError> {
        check_radius(r)?;
        let n = v.norm2();
        if n.is_nan() || n >= 1.0 {
            return Err(FunctionalError::BallDirection(n));
        }
        Ok(Self::Ball { r, v })
    }

    /// The direction is renormalised to exactly unit length after the
    /// tolerance check.
    pub fn ray(r: f64, v: SeqVector) -> Result<Self, FunctionalError> {
        check_radius(r)?;
        let n = v.norm2();
        if n.is_nan() || (n - 1.0).abs() > RAY_UNIT_TOL {
            return Err(FunctionalError::RayDirection(n));
        }
        Ok(Self::Ray {
            r,
            v: v.scale(1.0 / n),
        })
    }

    pub fn linear(v: SeqVector) -> Result<Self, FunctionalError> {
        let n = v.norm2();
        if n.is_nan() || n > 1.0 + 1e-12 {
            return Err(FunctionalError::LinearDirection(n));
        }
        Ok(Self::Linear { v })
    }

    /// Short tag used in reports.
    pub fn form_name(&self) -> &'static str {
        match self {
            Self::Norm => "norm",
            Self::Ball { .. } => "ball",
            Self::Ray { .. } => "ray",
            Self::Linear { .. } => "linear",
            Self::L1(_) => "l1",
            Self::Internal { .. } => "internal",
        }
    }

    /// Norm against which the functional is 1-Lipschitz.
    pub fn natural_space(&self) -> SpaceTag {
        match self {
            Self::L1(_) => SpaceTag::L1Seq,
            Self::Internal { space, .. } => *space,
            _ => SpaceTag::L2Seq,
        }
    }

    pub fn eval(&self, x: &SeqVector) -> f64 {
        match self {
            Self::Norm => x.norm2(),
            Self::Ball { r, v } | Self::Ray { r, v } => centred_sphere(*r, v, x),
            Self::Linear { v } => -inner(x, v),
            Self::L1(h) => h.eval(x),
            Self::Internal { y, space } => internal_value(y, x, *space),
        }
    }
}

/// `√(‖x‖² − 2r(x,v) + r²) − r`, rewritten to avoid cancellation at large r.
fn centred_sphere(r: f64, v: &SeqVector, x: &SeqVector) -> f64 {
    let xx = inner(x, x);
    let num = xx - 2.0 * r * inner(x, v);
    let root = (num + r * r).max(0.0).sqrt();
    let den = root + r;
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `‖x − y‖ − ‖y‖`. In `ℓ¹` the sum is localised to `supp(x)`.
pub fn internal_value(y: &SeqVector, x: &SeqVector, space: SpaceTag) -> f64 {
    match space {
        SpaceTag::L1Seq => x.iter().fold(0.0, |a, (s, xs)| {
            let ys = y.get(s);
            a + ((xs - ys).abs() - ys.abs())
        }),
        _ => space.dist(x, y) - space.norm_unchecked(y),
    }
}

/// The embedding `y ↦ h_y`.
pub fn phi(y: SeqVector, space: SpaceTag) -> MetricFunctional {
    MetricFunctional::Internal { y, space }
}

/// Coordinatewise subgradient minorant `g ≤ h` with `‖g‖_∞ ≤ 1`.
///
/// Uses `|x − z| − |z| ≥ −sign(z)·x` on centred coordinates; linear
/// coordinates are copied.
pub fn linear_minorant(h: &L1Functional) -> LinearFunctional {
    LinearFunctional {
        coeffs: h
            .overrides
            .iter()
            .map(|(&s, spec)| (s, spec.minorant_slope()))
            .collect(),
        default: h.default.minorant_slope(),
        dual_norm: DualNorm::Inf,
    }
}

/// Maximum `|h(x) − h(y)| / ‖x − y‖` over sample pairs, plus `h(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzAudit {
    pub max_ratio: f64,
    pub value_at_zero: f64,
    pub pairs_used: usize,
    pub pass: bool,
}

pub fn lipschitz_audit(
    h: &MetricFunctional,
    samples: &[(SeqVector, SeqVector)],
    space: SpaceTag,
) -> LipschitzAudit {
    let mut max_ratio: f64 = 0.0;
    let mut pairs_used = 0;
    for (x, y) in samples {
        let d = space.dist(x, y);
        if d == 0.0 {
            continue;
        }
        pairs_used += 1;
        max_ratio = max_ratio.max((h.eval(x) - h.eval(y)).abs() / d);
    }
    let value_at_zero = h.eval(&SeqVector::zero());
    LipschitzAudit {
        max_ratio,
        value_at_zero,
        pairs_used,
        pass: max_ratio <= 1.0 + 1e-9 && value_at_zero.abs() <= 1e-12,
    }
}

/// Residual of one candidate Hilbert form against the observed limit values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormResidual {
    pub form: String,
    pub residual: f64,
}

/// Result of fitting the pointwise limit of `h_{T^n x}` along an orbit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitFit {
    pub functional: MetricFunctional,
    /// Largest last-quarter oscillation over all probes.
    pub max_oscillation: f64,
    /// Probes actually evaluated (the supplied ones plus coordinate probes in `ℓ¹`).
    pub probes: Vec<SeqVector>,
    /// `h_{orbit[last]}(p)` for each probe.
    pub limit_values: Vec<f64>,
    /// Largest `|h_fit(p) − limit(p)|`.
    pub max_residual: f64,
    /// Hilbert candidates ranked by RMS residual; empty in `ℓ¹`.
    pub candidates: Vec<FormResidual>,
    /// `ℓ¹` only: the common rule of all probed coordinates was promoted to the default.
    pub default_extrapolated: bool,
}

/// Start of the last quarter of a sequence of length `len`.
pub fn tail_start(len: usize) -> usize {
    len - len.div_ceil(4).max(1)
}

/// Fits the pointwise limit of `h_{orbit[n]}` on the probes.
///
/// Convergence is declared when every probe value oscillates by less than
/// `tol` over the last quarter of the orbit. In `ℓ¹` every coordinate in the
/// probes' support is classified from its orbit coordinate (settled → CENTER,
/// escaping → EPS); in Hilbert spaces the four catalog forms are fitted by
/// least squares and ties within 10% are reported as ambiguous.
pub fn fit_limit(
    orbit: &[SeqVector],
    space: SpaceTag,
    probes: &[SeqVector],
    tol: f64,
) -> Result<LimitFit, FitError> {
    if orbit.is_empty() {
        return Err(FitError::EmptyOrbit);
    }
    if probes.is_empty() {
        return Err(FitError::NoProbes);
    }
    let tail = &orbit[tail_start(orbit.len())..];
    let last = orbit.last().expect("nonempty");

    let mut all_probes: Vec<SeqVector> = probes.to_vec();
    let mut coords: Vec<i64> = probes.iter().flat_map(|p| p.support()).collect();
    coords.sort_unstable();
    coords.dedup();
    if space == SpaceTag::L1Seq {
        for &s in &coords {
            for t in [1.0, 2.0, -1.0, -2.0] {
                let p = SeqVector::from_pairs([(s, t)]);
                if !all_probes.contains(&p) {
                    all_probes.push(p);
                }
            }
        }
    }

    let mut max_oscillation: f64 = 0.0;
    let mut limit_values = Vec::with_capacity(all_probes.len());
    for (k, p) in all_probes.iter().enumerate() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in tail {
            let v = internal_value(y, p, space);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let osc = hi - lo;
        if osc.is_nan() || osc >= tol {
            return Err(FitError::NotConverged {
                probe: k,
                oscillation: osc,
                tol,
            });
        }
        max_oscillation = max_oscillation.max(osc);
        limit_values.push(internal_value(last, p, space));
    }

    let (functional, candidates, default_extrapolated) = if space == SpaceTag::L1Seq {
        let (h, extrapolated) = classify_l1(tail, &coords, tol)?;
        (MetricFunctional::L1(h), Vec::new(), extrapolated)
    } else {
        let (h, cands) = fit_hilbert(tail, &all_probes, &limit_values)?;
        (h, cands, false)
    };

    let max_residual = all_probes
        .iter()
        .zip(&limit_values)
        .map(|(p, l)| (functional.eval(p) - l).abs())
        .fold(0.0, f64::max);

    Ok(LimitFit {
        functional,
        max_oscillation,
        probes: all_probes,
        limit_values,
        max_residual,
        candidates,
        default_extrapolated,
    })
}

fn classify_l1(
    tail: &[SeqVector],
    coords: &[i64],
    tol: f64,
) -> Result<(L1Functional, bool), FitError> {
    let mut overrides = BTreeMap::new();
    for &s in coords {
        let first = tail[0].get(s);
        let last = tail[tail.len() - 1].get(s);
        let (lo, hi) = tail
            .iter()
            .map(|y| y.get(s))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                (lo.min(c), hi.max(c))
            });
        let spec = if hi - lo < tol {
            CoordSpec::Center(last)
        } else if last.abs() > 2.0 && last.abs() > first.abs() {
            // the coordinate escapes: |t − y| − |y| → −sign(y)·t
            CoordSpec::Eps(if last > 0.0 { -1 } else { 1 })
        } else {
            return Err(FitError::CoordinateUnsettled { index: s });
        };
        overrides.insert(s, spec);
    }
    let mut specs = overrides.values();
    let uniform = match specs.next() {
        Some(first) if overrides.len() >= 2 && specs.all(|c| c == first) => Some(*first),
        _ => None,
    };
    let default = uniform.unwrap_or(CoordSpec::Center(0.0));
    let h = L1Functional::new(overrides, default).expect("specs built valid");
    Ok((h, uniform.is_some()))
}

fn rms(pred: impl Iterator<Item = f64>, target: &[f64]) -> f64 {
    let sum: f64 = pred.zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    (sum / target.len() as f64).sqrt()
}

fn lstsq(a: DMatrix<f64>, b: DVector<f64>) -> DVector<f64> {
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (smax * 1e-12).max(f64::MIN_POSITIVE);
    svd.solve(&b, eps).expect("both factors computed")
}

fn fit_hilbert(
    tail: &[SeqVector],
    probes: &[SeqVector],
    limit: &[f64],
) -> Result<(MetricFunctional, Vec<FormResidual>), FitError> {
    let last = &tail[tail.len() - 1];
    let score = |h: &MetricFunctional| rms(probes.iter().map(|p| h.eval(p)), limit);

    if tail.iter().all(|y| y == last) {
        // eventually constant: the limit is h_y itself
        let h = if last.is_zero() {
            MetricFunctional::Norm
        } else {
            let r = last.norm2();
            MetricFunctional::ray(r, last.scale(1.0 / r)).expect("unit direction")
        };
        let res = score(&h);
        let cands = vec![FormResidual {
            form: h.form_name().into(),
            residual: res,
        }];
        return Ok((h, cands));
    }

    let mut coords: Vec<i64> = probes.iter().flat_map(|p| p.support()).collect();
    coords.sort_unstable();
    coords.dedup();
    let m = probes.len();
    let d = coords.len();
    let to_vec = |sol: &DVector<f64>, offset: usize| {
        SeqVector::from_pairs(
            coords
                .iter()
                .enumerate()
                .map(|(j, &s)| (s, sol[offset + j])),
        )
    };

    let mut cands: Vec<MetricFunctional> = vec![MetricFunctional::Norm];

    // −(p, v) = L(p)
    let pm = DMatrix::from_fn(m, d, |i, j| probes[i].get(coords[j]));
    let v = to_vec(&lstsq(pm.clone(), DVector::from_fn(m, |i, _| -limit[i])), 0);
    let n = v.norm2();
    let v = if n > 1.0 { v.scale(1.0 / n) } else { v };
    cands.push(MetricFunctional::Linear { v });

    // (L + r)² = ‖p‖² − 2(p, w) + r²  ⇔  L² − ‖p‖² = −2rL − 2(p, w), w = rv
    let a = DMatrix::from_fn(m, d + 1, |i, j| {
        if j == 0 {
            -2.0 * limit[i]
        } else {
            -2.0 * pm[(i, j - 1)]
        }
    });
    let b = DVector::from_fn(m, |i, _| {
        limit[i] * limit[i] - inner(&probes[i], &probes[i])
    });
    let sol = lstsq(a, b);
    let r = sol[0];
    if r.is_finite() && r > 1e-12 {
        let w = to_vec(&sol, 1);
        let v = w.scale(1.0 / r);
        let n = v.norm2();
        if n < 1.0 - RAY_UNIT_TOL {
            cands.push(MetricFunctional::Ball { r, v });
        } else if n > 0.0 {
            cands.push(MetricFunctional::Ray {
                r,
                v: v.scale(1.0 / n),
            });
        }
    }

    let mut ranked: Vec<(MetricFunctional, f64)> = cands
        .into_iter()
        .map(|h| {
            let s = score(&h);
            (h, if s.is_finite() { s } else { f64::INFINITY })
        })
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    let residuals: Vec<FormResidual> = ranked
        .iter()
        .map(|(h, s)| FormResidual {
            form: h.form_name().into(),
            residual: *s,
        })
        .collect();
    if let [(best, r0), (second, r1), ..] = ranked.as_slice() {
        if r1 - r0 <= AMBIGUITY_RATIO * r1 {
            return Err(FitError::AmbiguousFit {
                first: best.form_name().into(),
                first_residual: *r0,
                second: second.form_name().into(),
                second_residual: *r1,
            });
        }
    }
    let best = ranked.swap_remove(0).0;
    Ok((best, residuals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sv(pairs: &[(i64, f64)]) -> SeqVector {
        SeqVector::from_pairs(pairs.iter().copied())
    }

    fn shift_center_one() -> L1Functional {
        L1Functional::uniform(CoordSpec::Center(1.0)).unwrap()
    }

    fn random_point(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> SeqVector {
        let k = rng.gen_range(1..=8);
        SeqVector::from_pairs((0..k).map(|_| (rng.gen_range(lo..=hi), rng.gen_range(-3.0..3.0))))
    }

    #[test]
    fn eval_examples() {
        assert_eq!(MetricFunctional::Norm.eval(&SeqVector::zero()), 0.0);
        let h = MetricFunctional::L1(shift_center_one());
        assert_eq!(h.eval(&SeqVector::basis(1)), -1.0);
        let ball = MetricFunctional::ball(1.0, SeqVector::zero()).unwrap();
        let x = sv(&[(1, 0.6), (2, 0.8)]);
        assert!((ball.eval(&x) - (2f64.sqrt() - 1.0)).abs() < 1e-15);
        assert!((ball.eval(&x) - 0.4142135624).abs() < 1e-10);
        let lin = MetricFunctional::linear(SeqVector::basis(1)).unwrap();
        assert_eq!(lin.eval(&SeqVector::basis(1).scale(-1.0)), 1.0);
    }

    #[test]
    fn constructors_enforce_parameter_ranges() {
        assert!(MetricFunctional::ball(0.0, SeqVector::zero()).is_err());
        assert!(MetricFunctional::ball(1.0, SeqVector::basis(1)).is_err());
        assert!(MetricFunctional::ray(1.0, sv(&[(1, 1.0 + 1e-10)])).is_ok());
        assert!(MetricFunctional::ray(1.0, sv(&[(1, 1.0 + 1e-8)])).is_err());
        assert!(MetricFunctional::linear(sv(&[(1, 0.8), (2, 0.7)])).is_err());
        assert!(L1Functional::uniform(CoordSpec::Eps(0)).is_err());
        assert!(LinearFunctional::new(BTreeMap::from([(1, 1.5)]), 0.0, DualNorm::Inf).is_err());
        assert!(LinearFunctional::new(BTreeMap::new(), 0.5, DualNorm::Two).is_err());
    }

    #[test]
    fn phi_examples() {
        let x = sv(&[(1, 0.3), (4, -2.0)]);
        for space in [SpaceTag::L1Seq, SpaceTag::L2Seq] {
            let h0 = phi(SeqVector::zero(), space);
            assert_eq!(h0.eval(&x), space.norm_unchecked(&x));
            let y = sv(&[(1, 1.0), (2, -2.0)]);
            let hy = phi(y.clone(), space);
            assert_eq!(hy.eval(&y), -space.norm_unchecked(&y));
            assert_eq!(hy.eval(&SeqVector::zero()), 0.0);
        }
        assert_eq!(
            MetricFunctional::Norm.eval(&x),
            phi(SeqVector::zero(), SpaceTag::L2Seq).eval(&x)
        );
    }

    #[test]
    fn phi_is_injective_on_witnesses() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for space in [SpaceTag::L1Seq, SpaceTag::L2Seq] {
            for _ in 0..200 {
                let y = random_point(&mut rng, -5, 5);
                let z = random_point(&mut rng, -5, 5);
                if y == z {
                    continue;
                }
                let (hy, hz) = (phi(y.clone(), space), phi(z.clone(), space));
                let differ = hy.eval(&y) != hz.eval(&y) || hy.eval(&z) != hz.eval(&z);
                assert!(differ, "{y} vs {z}");
            }
        }
    }

    #[test]
    fn minorant_examples() {
        let g = linear_minorant(&shift_center_one());
        assert_eq!(g.default_coefficient(), -1.0);
        let x = sv(&[(1, 2.0), (3, -0.5), (9, 1.0)]);
        assert_eq!(g.eval(&x), -2.5);

        let g0 = linear_minorant(&L1Functional::norm());
        assert!(g0.is_zero());

        let h = L1Functional::new(
            BTreeMap::from([(0, CoordSpec::Eps(-1))]),
            CoordSpec::Center(0.0),
        )
        .unwrap();
        let g = linear_minorant(&h);
        assert_eq!(g.coefficient(0), -1.0);
        assert_eq!(g.coefficient(5), 0.0);
        for t in [-3.0, -0.5, 0.0, 2.0] {
            let x = sv(&[(0, t)]);
            assert_eq!(g.eval(&x), h.eval(&x));
        }
    }

    #[test]
    fn minorant_keeps_zero_override_under_nonzero_default() {
        let h = L1Functional::new(
            BTreeMap::from([(3, CoordSpec::Center(0.0))]),
            CoordSpec::Center(1.0),
        )
        .unwrap();
        let g = linear_minorant(&h);
        assert_eq!(g.coefficient(3), 0.0);
        assert_eq!(g.coefficient(4), -1.0);
    }

    #[test]
    fn lipschitz_examples() {
        let v = SeqVector::basis(2);
        let lin = MetricFunctional::linear(v.clone()).unwrap();
        let pairs: Vec<_> = (1..10)
            .map(|k| (v.scale(k as f64), v.scale(-(k as f64) / 3.0)))
            .collect();
        let audit = lipschitz_audit(&lin, &pairs, SpaceTag::L2Seq);
        assert!((audit.max_ratio - 1.0).abs() < 1e-15);

        let y = sv(&[(1, 2.0), (3, -1.0)]);
        for space in [SpaceTag::L1Seq, SpaceTag::L2Seq] {
            let audit = lipschitz_audit(
                &phi(y.clone(), space),
                &[(y.clone(), SeqVector::zero())],
                space,
            );
            assert_eq!(audit.max_ratio, 1.0);
            assert!(audit.pass);
        }
    }

    #[test]
    fn ray_approaches_linear_for_large_radius() {
        let v = sv(&[(1, 0.6), (2, 0.8)]);
        let ray = MetricFunctional::ray(1e6, v.clone()).unwrap();
        let lin = MetricFunctional::linear(v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = random_point(&mut rng, 1, 4);
            let x = x.scale(1.0 / x.norm2().max(1.0));
            assert!((ray.eval(&x) - lin.eval(&x)).abs() < 1e-4);
        }
    }

    fn unit_probes(range: std::ops::RangeInclusive<i64>) -> Vec<SeqVector> {
        range
            .flat_map(|s| [SeqVector::basis(s), SeqVector::basis(s).scale(-1.0)])
            .collect()
    }

    #[test]
    fn fit_shift_orbit() {
        // T^n 0 = ones at 1..=n
        let orbit: Vec<SeqVector> = (0..=200)
            .map(|n| SeqVector::from_pairs((1..=n).map(|s| (s, 1.0))))
            .collect();
        let fit = fit_limit(&orbit, SpaceTag::L1Seq, &unit_probes(1..=10), 1e-9).unwrap();
        let MetricFunctional::L1(h) = &fit.functional else {
            panic!("expected l1 form")
        };
        for s in 1..=10 {
            assert_eq!(h.spec(s), CoordSpec::Center(1.0));
        }
        assert!(fit.default_extrapolated);
        assert_eq!(fit.max_residual, 0.0);
    }

    #[test]
    fn fit_constant_zero_orbit_is_norm() {
        let orbit = vec![SeqVector::zero(); 40];
        let e2 = SpaceTag::Euclidean { dim: 2 };
        let fit = fit_limit(&orbit, e2, &unit_probes(1..=2), 1e-9).unwrap();
        assert_eq!(fit.functional, MetricFunctional::Norm);
        let fit = fit_limit(&orbit, SpaceTag::L1Seq, &unit_probes(1..=3), 1e-9).unwrap();
        let MetricFunctional::L1(h) = fit.functional else {
            panic!()
        };
        assert!(h.is_norm());
    }

    #[test]
    fn fit_escaping_ray() {
        let n_max = 1000;
        let e2 = SpaceTag::Euclidean { dim: 2 };
        let orbit: Vec<SeqVector> = (0..=n_max)
            .map(|n| SeqVector::basis(1).scale(n as f64))
            .collect();
        let mut probes = unit_probes(1..=2);
        probes.push(sv(&[(1, 0.5), (2, 0.5)]));
        probes.push(sv(&[(1, -1.0), (2, 2.0)]));
        let fit = fit_limit(&orbit, e2, &probes, 1e-3).unwrap();
        let MetricFunctional::Ray { r, v } = &fit.functional else {
            panic!("expected ray, got {:?}", fit.functional)
        };
        assert!((v.get(1) - 1.0).abs() < 1e-9 && v.get(2).abs() < 1e-9);
        assert!((r - n_max as f64).abs() < 1e-6 * n_max as f64);
        assert_eq!(fit.candidates[0].form, "ray");
        // oracle: direct evaluation of h_{n e1} at n = 1e6 is close to the linear limit −x₁
        let far = phi(SeqVector::basis(1).scale(1e6), e2);
        for p in &probes {
            assert!((far.eval(p) + p.get(1)).abs() < 1e-5);
        }
    }

    #[test]
    fn fit_reports_non_convergence() {
        let orbit: Vec<SeqVector> = (0..40)
            .map(|n| SeqVector::basis(1).scale(if n % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
        let err = fit_limit(&orbit, SpaceTag::L2Seq, &unit_probes(1..=1), 1e-6).unwrap_err();
        assert!(matches!(err, FitError::NotConverged { .. }));
    }

    #[test]
    fn fit_translation_in_l1_marks_escaping_coordinate() {
        let orbit: Vec<SeqVector> = (0..=100)
            .map(|n| SeqVector::basis(0).scale(n as f64))
            .collect();
        let fit = fit_limit(&orbit, SpaceTag::L1Seq, &unit_probes(-2..=2), 1e-9).unwrap();
        let MetricFunctional::L1(h) = &fit.functional else {
            panic!()
        };
        assert_eq!(h.spec(0), CoordSpec::Eps(-1));
        assert_eq!(h.spec(1), CoordSpec::Center(0.0));
        assert!(!fit.default_extrapolated);
        let g = linear_minorant(h);
        assert_eq!(g.coefficient(0), -1.0);
        assert_eq!(g.coefficient(7), 0.0);
    }

    #[test]
    fn fit_eventually_constant_matches_phi() {
        let y = sv(&[(1, 0.7), (2, -1.3), (3, 2.0)]);
        let mut orbit: Vec<SeqVector> = (0..10)
            .map(|k| SeqVector::basis(2).scale(k as f64))
            .collect();
        orbit.extend(std::iter::repeat_n(y.clone(), 60));
        let mut probes = unit_probes(1..=3);
        probes.push(sv(&[(1, 0.3), (3, -0.4)]));
        for space in [
            SpaceTag::L1Seq,
            SpaceTag::L2Seq,
            SpaceTag::Euclidean { dim: 3 },
        ] {
            let fit = fit_limit(&orbit, space, &probes, 1e-9).unwrap();
            let target = phi(y.clone(), space);
            for p in &fit.probes {
                assert!(
                    (fit.functional.eval(p) - target.eval(p)).abs() <= 1e-12,
                    "{space}"
                );
            }
        }
    }

    #[test]
    fn functional_json_forms() {
        let h = MetricFunctional::L1(
            L1Functional::new(
                BTreeMap::from([(2, CoordSpec::Eps(-1))]),
                CoordSpec::Center(0.0),
            )
            .unwrap(),
        );
        let text = serde_json::to_string(&h).unwrap();
        assert_eq!(
            text,
            r#"{"form":"l1","overrides":{"2":{"eps":-1}},"default":{"z":0.0}}"#
        );
        let back: MetricFunctional = serde_json::from_str(&text).unwrap();
        assert_eq!(back, h);
        let ray: MetricFunctional =
            serde_json::from_str(r#"{"form":"ray","r":2.0,"v":{"1":1.0}}"#).unwrap();
        assert_eq!(ray.form_name(), "ray");
        assert!(serde_json::from_str::<MetricFunctional>(
            r#"{"form":"ball","r":2.0,"v":{"1":1.0}}"#
        )
        .is_err());
        assert_eq!(
            serde_json::to_string(&MetricFunctional::Norm).unwrap(),
            r#"{"form":"norm"}"#
        );
    }

    fn arb_l1() -> impl Strategy<Value = L1Functional> {
        let spec = prop_oneof![
            Just(CoordSpec::Eps(1)),
            Just(CoordSpec::Eps(-1)),
            (-4.0f64..4.0).prop_map(CoordSpec::Center),
        ];
        (
            prop::collection::btree_map(-6i64..6, spec.clone(), 0..8),
            spec,
        )
            .prop_map(|(o, d)| L1Functional::new(o, d).unwrap())
    }

    fn arb_point() -> impl Strategy<Value = SeqVector> {
        prop::collection::vec((-8i64..8, -5.0f64..5.0), 0..10).prop_map(SeqVector::from_pairs)
    }

    proptest! {
        #[test]
        fn l1_forms_are_normalised_and_nonexpansive(h in arb_l1(), x in arb_point(), y in arb_point()) {
            prop_assert_eq!(h.eval(&SeqVector::zero()), 0.0);
            let d = SpaceTag::L1Seq.dist(&x, &y);
            prop_assert!((h.eval(&x) - h.eval(&y)).abs() <= d * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn minorant_lies_below(h in arb_l1(), x in arb_point()) {
            let g = linear_minorant(&h);
            prop_assert!(g.dual_norm_value() <= 1.0);
            prop_assert!(g.eval(&x) <= h.eval(&x) + 1e-12);
        }
    }
}
