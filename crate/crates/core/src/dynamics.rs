//! Orbits and the asymptotic diagnostics computed from them.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::functionals::MetricFunctional;
use crate::maps::{check_window, AffineMap, Map, MapError, DEFAULT_SUPPORT_WINDOW};
use crate::spaces::{SeqVector, SpaceTag};
use crate::verdict::Verdict;

pub const MIN_DIAGNOSTIC_LEN: usize = 16;
/// Agreement required between the last three escape-rate checkpoints.
pub const TAU_TOL: f64 = 1e-3;
/// Below this, escape-rate agreement is measured absolutely.
pub const TAU_RELATIVE_FLOOR: f64 = 0.01;
pub const STEP_NORM_THRESHOLD: f64 = 1e-2;
pub const COSMIC_CAUCHY_TOL: f64 = 1e-3;
pub const COSMIC_ZERO_LIMIT: f64 = 1e-6;
/// An orbit whose norms stay below `BOUNDED_FACTOR·(‖x₀‖ + 1)` is treated as bounded.
pub const BOUNDED_FACTOR: f64 = 10.0;
pub const NULL_SPACE_THRESHOLD: f64 = 1e-10;
pub const MONOTONE_SLACK: f64 = 1e-9;
const MAX_TRACKED: usize = 64;
/// Step ratios above this are treated as non-settling.
const AITKEN_MAX_RATIO: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("iteration {iteration}: {source}")]
    Map { iteration: usize, source: MapError },
    #[error("trajectory has {len} points, need at least {MIN_DIAGNOSTIC_LEN}")]
    TooShort { len: usize },
    #[error("mean-ergodic averaging needs a euclidean affine map")]
    NotEuclidean,
    #[error("operator has {rows} rows but the vector lives in dimension {dim}")]
    Shape { rows: usize, dim: usize },
}

/// The orbit `x, Tx, …, T^n x` with its norms and step norms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub points: Vec<SeqVector>,
    pub norms: Vec<f64>,
    /// `‖T^{k+1}x − T^k x‖` for `k = 0…n−1`.
    pub step_norms: Vec<f64>,
    pub space: SpaceTag,
}

impl Trajectory {
    pub fn from_points(points: Vec<SeqVector>, space: SpaceTag) -> Self {
        let norms = points.iter().map(|p| space.norm_unchecked(p)).collect();
        let step_norms = points
            .windows(2)
            .map(|w| space.dist(&w[1], &w[0]))
            .collect();
        Self {
            points,
            norms,
            step_norms,
            space,
        }
    }

    /// Number of map applications.
    pub fn steps(&self) -> usize {
        self.points.len().saturating_sub(1)
    }

    pub fn start(&self) -> &SeqVector {
        &self.points[0]
    }

    pub fn last(&self) -> &SeqVector {
        self.points.last().expect("trajectories are nonempty")
    }

    /// Largest increase between consecutive step norms; `≤ 0` for a
    /// nonexpansive map up to rounding.
    pub fn step_increase(&self) -> f64 {
        self.step_norms
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV with columns `n,norm,step_norm` and one `x_s` column per index
    /// of `window`. `step_norm` at row `n` is `‖T^n x − T^{n−1} x‖`.
    pub fn to_csv(&self, window: Option<(i64, i64)>) -> String {
        let mut out = String::from("n,norm,step_norm");
        if let Some((lo, hi)) = window {
            for s in lo..=hi {
                let _ = write!(out, ",x_{s}");
            }
        }
        out.push('\n');
        for (n, p) in self.points.iter().enumerate() {
            let _ = write!(out, "{n},{}", self.norms[n]);
            match n.checked_sub(1).map(|k| self.step_norms[k]) {
                Some(s) => {
                    let _ = write!(out, ",{s}");
                }
                None => out.push(','),
            }
            if let Some((lo, hi)) = window {
                for s in lo..=hi {
                    let _ = write!(out, ",{}", p.get(s));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Iterates `map` `n` times from `x0` with the default support window.
pub fn iterate(map: &Map, x0: &SeqVector, n: usize) -> Result<Trajectory, DynamicsError> {
    iterate_with_window(map, x0, n, DEFAULT_SUPPORT_WINDOW)
}

pub fn iterate_with_window(
    map: &Map,
    x0: &SeqVector,
    n: usize,
    window: i64,
) -> Result<Trajectory, DynamicsError> {
    let space = map.space();
    let wrap = |iteration: usize| move |source: MapError| DynamicsError::Map { iteration, source };
    space.check(x0).map_err(|e| wrap(0)(e.into()))?;
    check_window(x0, window).map_err(wrap(0))?;
    let mut points = Vec::with_capacity(n + 1);
    let mut norms = Vec::with_capacity(n + 1);
    let mut step_norms = Vec::with_capacity(n);
    points.push(x0.clone());
    norms.push(space.norm_unchecked(x0));
    for k in 1..=n {
        let next = map.apply(&points[k - 1]).map_err(wrap(k))?;
        check_window(&next, window).map_err(wrap(k))?;
        norms.push(space.norm_unchecked(&next));
        step_norms.push(space.dist(&next, &points[k - 1]));
        points.push(next);
    }
    Ok(Trajectory {
        points,
        norms,
        step_norms,
        space,
    })
}

/// Escape-rate estimates `‖T^k x‖ / k` at logarithmic checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EscapeReport {
    pub checkpoints: Vec<usize>,
    pub tau_estimates: Vec<f64>,
    /// `min_{j ≤ k} ‖T^j x − x‖ / j` at the same checkpoints.
    pub displacement_estimates: Vec<f64>,
    pub tau_final: f64,
    /// `min_{j ≤ n} ‖T^j x − x‖ / j`, an upper bound on τ.
    pub tau_subadditive: f64,
    pub converged: bool,
}

/// Powers of two below `n/4`, then `n/4, n/2, n`.
pub fn log_checkpoints(n: usize) -> Vec<usize> {
    let mut out: Vec<usize> = std::iter::successors(Some(1usize), |k| k.checked_mul(2))
        .take_while(|&k| k < n / 4)
        .collect();
    for k in [n / 4, n / 2, n] {
        if k >= 1 && out.last() != Some(&k) {
            out.push(k);
        }
    }
    out
}

fn agree(values: &[f64], tol: f64) -> bool {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = values.last().copied().unwrap_or(0.0).abs();
    let spread = hi - lo;
    if scale > TAU_RELATIVE_FLOOR {
        spread <= tol * scale
    } else {
        spread <= tol
    }
}

pub fn escape_rate(traj: &Trajectory) -> Result<EscapeReport, DynamicsError> {
    let len = traj.points.len();
    if len < MIN_DIAGNOSTIC_LEN {
        return Err(DynamicsError::TooShort { len });
    }
    let n = traj.steps();
    let checkpoints = log_checkpoints(n);
    let x0 = traj.start();
    let tau_estimates: Vec<f64> = checkpoints
        .iter()
        .map(|&k| traj.norms[k] / k as f64)
        .collect();
    // ‖T^j x − x‖ is subadditive in j, so τ = inf_j ‖T^j x − x‖/j; the
    // running infimum is immune to the start-point offset of ‖T^k x‖/k.
    let mut running = f64::INFINITY;
    let mut infimum = Vec::with_capacity(n + 1);
    infimum.push(f64::INFINITY);
    for k in 1..=n {
        running = running.min(traj.space.dist(&traj.points[k], x0) / k as f64);
        infimum.push(running);
    }
    let displacement_estimates: Vec<f64> = checkpoints.iter().map(|&k| infimum[k]).collect();
    let tail = &displacement_estimates[displacement_estimates.len().saturating_sub(3)..];
    Ok(EscapeReport {
        tau_final: traj.norms[n] / n as f64,
        tau_subadditive: infimum[n],
        converged: tail_converged(tail),
        checkpoints,
        tau_estimates,
        displacement_estimates,
    })
}

/// The three estimates agree, or agree once a common `c/k` term is removed
/// by Richardson extrapolation along the doubling checkpoints.
fn tail_converged(tail: &[f64]) -> bool {
    if agree(tail, TAU_TOL) {
        return true;
    }
    match *tail {
        [a, b, c] => {
            let (r1, r2) = (2.0 * b - a, 2.0 * c - b);
            r2 >= -TAU_TOL && agree(&[r1, r2], TAU_TOL)
        }
        _ => false,
    }
}

/// Final step norm compared with the escape rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepNormReport {
    pub last_step: f64,
    pub tau: f64,
    pub defect: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

pub fn step_norm_check(
    traj: &Trajectory,
    tau: f64,
    threshold: f64,
) -> Result<StepNormReport, DynamicsError> {
    let len = traj.points.len();
    if len < MIN_DIAGNOSTIC_LEN {
        return Err(DynamicsError::TooShort { len });
    }
    let last_step = *traj.step_norms.last().expect("len ≥ 16");
    let defect = (last_step - tau).abs();
    Ok(StepNormReport {
        last_step,
        tau,
        defect,
        threshold,
        verdict: Verdict::from_pass(defect < threshold),
    })
}

/// Behaviour of the normalised orbit `T^n x / ‖T^n x‖`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CosmicReport {
    /// `N, N/2, N/4, …` in increasing order.
    pub checkpoints: Vec<usize>,
    pub direction_norms: Vec<f64>,
    /// `‖d_{2k} − d_k‖` for consecutive checkpoints, indexed by the larger one.
    pub doubling_defects: Vec<(usize, f64)>,
    /// `‖d_N − d_{N/2}‖`, the finest doubling lag.
    pub strong_cauchy_defect: f64,
    pub tracked: Vec<i64>,
    /// Coordinate limits extrapolated from `d_{N/4}, d_{N/2}, d_N` by Aitken's Δ².
    pub coordinatewise_limit: Vec<(i64, f64)>,
    pub coordinates_converge: bool,
    pub final_direction: Option<SeqVector>,
    pub verdict: Verdict,
    pub note: String,
}

#[derive(Debug, Clone, Default)]
pub struct CosmicOptions {
    /// Coordinates whose limits are estimated; default is the support of the
    /// direction at `N/4` (at most 64 indices).
    pub tracked: Option<Vec<i64>>,
}

pub fn cosmic_diagnose(traj: &Trajectory, opts: &CosmicOptions) -> CosmicReport {
    let space = traj.space;
    let n = traj.steps();
    let cutoff = BOUNDED_FACTOR * (traj.norms[0] + 1.0);
    let mut checkpoints: Vec<usize> = std::iter::successors(Some(n), |&k| Some(k / 2))
        .take_while(|&k| k >= 1)
        .collect();
    checkpoints.reverse();

    let mut report = CosmicReport {
        checkpoints: checkpoints.clone(),
        direction_norms: Vec::new(),
        doubling_defects: Vec::new(),
        strong_cauchy_defect: f64::NAN,
        tracked: Vec::new(),
        coordinatewise_limit: Vec::new(),
        coordinates_converge: false,
        final_direction: None,
        verdict: Verdict::UndefinedBoundedOrbit,
        note: String::new(),
    };
    if n < 4 || traj.norms.iter().all(|&r| r < cutoff) {
        report.note = format!("all norms stay below {cutoff}; directions are not meaningful");
        return report;
    }

    let directions: Vec<Option<SeqVector>> = checkpoints
        .iter()
        .map(|&k| (traj.norms[k] > 0.0).then(|| traj.points[k].scale(1.0 / traj.norms[k])))
        .collect();
    report.direction_norms = directions
        .iter()
        .map(|d| d.as_ref().map_or(0.0, |d| space.norm_unchecked(d)))
        .collect();
    for (j, pair) in directions.windows(2).enumerate() {
        if let [Some(a), Some(b)] = pair {
            report
                .doubling_defects
                .push((checkpoints[j + 1], space.dist(a, b)));
        }
    }
    let m = directions.len();
    let (d_quarter, d_half, d_last) = (&directions[m - 3], &directions[m - 2], &directions[m - 1]);
    let (Some(d_quarter), Some(d_half), Some(d_last)) = (d_quarter, d_half, d_last) else {
        report.verdict = Verdict::None;
        report.note = "orbit passes through the origin at a tail checkpoint".into();
        return report;
    };
    report.strong_cauchy_defect = space.dist(d_half, d_last);
    report.final_direction = Some(d_last.clone());

    report.tracked = opts
        .tracked
        .clone()
        .unwrap_or_else(|| d_quarter.support().take(MAX_TRACKED).collect());
    let estimates: Vec<(i64, f64, bool)> = report
        .tracked
        .iter()
        .map(|&s| {
            let (limit, settled) = aitken(d_quarter.get(s), d_half.get(s), d_last.get(s));
            (s, limit, settled)
        })
        .collect();
    report.coordinatewise_limit = estimates.iter().map(|&(s, l, _)| (s, l)).collect();
    report.coordinates_converge = estimates.iter().all(|&(_, _, ok)| ok);
    let zero_limit = !report.tracked.is_empty()
        && report
            .coordinatewise_limit
            .iter()
            .all(|&(_, v)| v.abs() <= COSMIC_ZERO_LIMIT);

    (report.verdict, report.note) = if report.strong_cauchy_defect < COSMIC_CAUCHY_TOL {
        (
            Verdict::Strong,
            "directions are Cauchy along doubling lags".into(),
        )
    } else if report.coordinates_converge && zero_limit {
        if space == SpaceTag::L1Seq {
            (
                Verdict::None,
                "coordinates vanish while directions keep unit l1 norm; by the Schur property of l1 there is no weak limit".into(),
            )
        } else {
            (
                Verdict::WeakOnlyCandidate,
                "coordinates vanish while directions keep unit norm: weak limit 0 candidate".into(),
            )
        }
    } else if report.coordinates_converge {
        (
            Verdict::WeakOnlyCandidate,
            "coordinates settle but directions are not norm-Cauchy".into(),
        )
    } else {
        (Verdict::None, "tracked coordinates do not settle".into())
    };
    report
}

/// Limit of `a, b, c` sampled at `k, 2k, 4k` by Aitken's Δ², and whether the
/// samples settle: either the last step is below tolerance or successive
/// steps shrink geometrically (as for any power-law approach to a limit).
fn aitken(a: f64, b: f64, c: f64) -> (f64, bool) {
    let (d1, d2) = (b - a, c - b);
    if d2.abs() < COSMIC_CAUCHY_TOL * 1e-6 || d1 == 0.0 {
        return (c, d2.abs() < COSMIC_CAUCHY_TOL);
    }
    let q = d2 / d1;
    if q > 0.0 && q < AITKEN_MAX_RATIO {
        (c + d2 * q / (1.0 - q), true)
    } else {
        (c, d2.abs() < COSMIC_CAUCHY_TOL)
    }
}

/// Cesàro average of `U^k v` against the projection onto `ker(I − U)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanErgodicReport {
    pub n: usize,
    pub average: SeqVector,
    pub projection: SeqVector,
    pub gap: f64,
    pub fixed_space_dim: usize,
    /// `‖T^n 0 / n − average‖`.
    pub orbit_identity_defect: f64,
}

/// Orthonormal basis of `{x : ‖Ax‖ = 0}` from the SVD of a square matrix.
pub(crate) fn null_space(a: &DMatrix<f64>, threshold: f64) -> Vec<Vec<f64>> {
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested");
    svd.singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= threshold)
        .map(|(k, _)| v_t.row(k).iter().copied().collect())
        .collect()
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |i, j| rows[i][j])
}

fn matvec(rows: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    rows.iter()
        .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Projection of `v` onto the fixed space of `U`.
pub fn fixed_space_projection(rows: &[Vec<f64>], v: &[f64]) -> (Vec<f64>, usize) {
    let d = rows.len();
    let a = DMatrix::identity(d, d) - rows_to_matrix(rows);
    let basis = null_space(&a, NULL_SPACE_THRESHOLD);
    let mut proj = vec![0.0; d];
    for b in &basis {
        let c: f64 = b.iter().zip(v).map(|(x, y)| x * y).sum();
        for (p, bi) in proj.iter_mut().zip(b) {
            *p += c * bi;
        }
    }
    (proj, basis.len())
}

pub fn mean_ergodic(
    rows: &[Vec<f64>],
    v: &SeqVector,
    n: usize,
) -> Result<MeanErgodicReport, DynamicsError> {
    let d = rows.len();
    let space = SpaceTag::Euclidean { dim: d };
    space.check(v).map_err(|_| DynamicsError::Shape {
        rows: d,
        dim: v.support_bounds().map_or(0, |b| b.1 as usize),
    })?;
    let vd = v.to_dense(d);

    let mut sum = vec![0.0; d];
    let mut w = vd.clone();
    for _ in 0..n {
        sum.iter_mut().zip(&w).for_each(|(s, x)| *s += x);
        w = matvec(rows, &w);
    }
    let average: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();

    let mut x = vec![0.0; d];
    for _ in 0..n {
        x = matvec(rows, &x)
            .iter()
            .zip(&vd)
            .map(|(a, b)| a + b)
            .collect();
    }
    let orbit_avg: Vec<f64> = x.iter().map(|a| a / n as f64).collect();

    let (projection, fixed_space_dim) = fixed_space_projection(rows, &vd);
    let average = SeqVector::from_dense(1, &average);
    let projection = SeqVector::from_dense(1, &projection);
    Ok(MeanErgodicReport {
        n,
        gap: space.dist(&average, &projection),
        orbit_identity_defect: space.dist(&SeqVector::from_dense(1, &orbit_avg), &average),
        average,
        projection,
        fixed_space_dim,
    })
}

/// Mean-ergodic report for the linear part and translation of an affine map.
pub fn mean_ergodic_for(map: &AffineMap, n: usize) -> Result<MeanErgodicReport, DynamicsError> {
    let rows = map.dense().ok_or(DynamicsError::NotEuclidean)?;
    mean_ergodic(&rows, map.translation_vector(), n)
}

/// Worst `h(Tx) − h(x)` over the samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotoneReport {
    pub worst: f64,
    /// Bound the worst value is compared with: `0`, or `−τ` when strengthened.
    pub bound: f64,
    pub verdict: Verdict,
}

pub fn monotone_functional_check(
    map: &Map,
    h: &MetricFunctional,
    samples: &[SeqVector],
    strengthen_with_tau: Option<f64>,
) -> Result<MonotoneReport, MapError> {
    let mut worst = f64::NEG_INFINITY;
    for x in samples {
        let tx = map.apply(x)?;
        worst = worst.max(h.eval(&tx) - h.eval(x));
    }
    let bound = strengthen_with_tau.map_or(0.0, |t| -t);
    Ok(MonotoneReport {
        worst,
        bound,
        verdict: Verdict::from_pass(worst <= bound + MONOTONE_SLACK),
    })
}
