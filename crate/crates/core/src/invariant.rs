//! Invariant half-spaces: the linear functional behind a positive escape
//! rate for affine maps, and half-space containment of `ℓ¹` orbits.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{
    fixed_space_projection, iterate, rows_to_matrix, DynamicsError, NULL_SPACE_THRESHOLD,
};
use crate::functionals::{
    fit_limit, linear_minorant, DualNorm, FitError, L1Functional, LinearFunctional,
    MetricFunctional,
};
use crate::maps::{AffineMap, Map};
use crate::sampling::Sampler;
use crate::spaces::{SeqVector, SpaceTag};
use crate::verdict::Verdict;

pub const HYPOTHESIS_TOL: f64 = 1e-9;
pub const DEGENERATE_TOL: f64 = 1e-9;
pub const MARGIN_SLACK: f64 = 1e-9;
pub const KERNEL_TOL: f64 = 1e-8;
pub const ORTHO_TOL: f64 = 1e-12;
pub const HALF_SPACE_SLACK: f64 = 1e-9;
pub const DEFAULT_FIT_TOL: f64 = 1e-6;
pub const DEFAULT_INVARIANCE_SAMPLES: usize = 1000;
const DEFAULT_PROBE_COUNT: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvariantError {
    #[error("{0} requires a euclidean affine map")]
    NotEuclidean(&'static str),
    #[error("half-space containment is only implemented on l1 sequences, got {0}")]
    NotL1(SpaceTag),
    #[error("0 lies in the closure of Im(I − T): distance {distance:e}")]
    HypothesisFails { distance: f64 },
    #[error("distance {distance:e} is positive but the fixed-space projection of v has norm {projection_norm:e}")]
    Degenerate { distance: f64, projection_norm: f64 },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

impl InvariantError {
    /// Verdict label for errors that are outcomes rather than faults.
    pub fn verdict(&self) -> Option<Verdict> {
        match self {
            InvariantError::HypothesisFails { .. } => Some(Verdict::HypothesisFails),
            InvariantError::Degenerate { .. } => Some(Verdict::Degenerate),
            InvariantError::Fit(FitError::NotConverged { .. }) => Some(Verdict::NotConverged),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HypothesisReport {
    /// `min_x ‖(I − U)x − v‖`.
    pub distance: f64,
    pub holds: bool,
}

fn euclidean_parts(
    map: &AffineMap,
    what: &'static str,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), InvariantError> {
    let rows = map.dense().ok_or(InvariantError::NotEuclidean(what))?;
    let v = map.translation_vector().to_dense(rows.len());
    Ok((rows, v))
}

/// Distance from `v` to the range of `I − U`, as a least-squares residual.
pub fn hypothesis_test(map: &AffineMap) -> Result<HypothesisReport, InvariantError> {
    let (rows, v) = euclidean_parts(map, "hypothesis test")?;
    let d = rows.len();
    let a = DMatrix::identity(d, d) - rows_to_matrix(&rows);
    let svd = a.svd(true, false);
    let u = svd.u.expect("requested");
    let v = DVector::from_vec(v);
    let mut residual = v.clone();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > NULL_SPACE_THRESHOLD {
            let col = u.column(k);
            residual -= col * col.dot(&v);
        }
    }
    let distance = residual.norm();
    Ok(HypothesisReport {
        distance,
        holds: distance > HYPOTHESIS_TOL,
    })
}

/// Orthonormal basis of `q⊥` by Gram–Schmidt with re-orthogonalisation.
pub fn orthonormal_complement(q: &[f64]) -> Vec<Vec<f64>> {
    let d = q.len();
    let mut basis: Vec<DVector<f64>> = vec![DVector::from_column_slice(q).normalize()];
    for i in 0..d {
        if basis.len() == d {
            break;
        }
        let mut w = DVector::from_fn(d, |j, _| if i == j { 1.0 } else { 0.0 });
        for _ in 0..2 {
            for b in &basis {
                w -= b * b.dot(&w);
            }
        }
        let n = w.norm();
        if n > ORTHO_TOL {
            basis.push(w / n);
        }
    }
    basis
        .into_iter()
        .skip(1)
        .map(|b| b.iter().copied().collect())
        .collect()
}

/// The functional `f(x) = (x, q)` with `f(Tx) ≥ f(x)` and its checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub q: LinearFunctional,
    pub q_norm: f64,
    /// `min (Tx − x, q)` over the samples.
    pub monotone_margin: f64,
    pub samples: usize,
    /// `max |(U w, q)|` over an orthonormal basis of `q⊥`.
    pub kernel_residual: f64,
    /// `‖Uᵀq − q‖`.
    pub adjoint_defect: f64,
    pub hypothesis_distance: f64,
    pub projection_norm: f64,
    pub verdict: Verdict,
}

pub fn extract_functional(
    map: &AffineMap,
    samples: usize,
    seed: u64,
) -> Result<InvarianceReport, InvariantError> {
    let (rows, v) = euclidean_parts(map, "functional extraction")?;
    let d = rows.len();
    let hyp = hypothesis_test(map)?;
    if !hyp.holds {
        return Err(InvariantError::HypothesisFails {
            distance: hyp.distance,
        });
    }
    let (proj, _) = fixed_space_projection(&rows, &v);
    let projection_norm = proj.iter().map(|x| x * x).sum::<f64>().sqrt();
    if projection_norm <= DEGENERATE_TOL {
        return Err(InvariantError::Degenerate {
            distance: hyp.distance,
            projection_norm,
        });
    }
    let q: Vec<f64> = proj.iter().map(|x| x / projection_norm).collect();
    let q_norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let u_apply = |x: &[f64]| -> Vec<f64> { rows.iter().map(|r| dot(r, x)).collect() };

    // (Tx − x, q) = ((U − I)x, q) + (v, q)
    let vq = dot(&v, &q);
    let mut sampler = Sampler::new(seed, SpaceTag::Euclidean { dim: d });
    let mut monotone_margin = f64::INFINITY;
    for _ in 0..samples {
        let x = sampler.point().to_dense(d);
        let ux = u_apply(&x);
        let step: Vec<f64> = ux.iter().zip(&x).map(|(a, b)| a - b).collect();
        monotone_margin = monotone_margin.min(dot(&step, &q) + vq);
    }

    let kernel_residual = orthonormal_complement(&q)
        .iter()
        .map(|w| dot(&u_apply(w), &q).abs())
        .fold(0.0, f64::max);
    let adjoint_defect = (0..d)
        .map(|j| {
            let col: f64 = (0..d).map(|i| rows[i][j] * q[i]).sum();
            (col - q[j]).powi(2)
        })
        .sum::<f64>()
        .sqrt();

    let pass = (q_norm - 1.0).abs() <= 1e-9
        && monotone_margin >= -MARGIN_SLACK
        && kernel_residual <= KERNEL_TOL;
    Ok(InvarianceReport {
        q: LinearFunctional::from_vector(&SeqVector::from_dense(1, &q))
            .expect("unit vector has dual norm 1"),
        q_norm,
        monotone_margin,
        samples,
        kernel_residual,
        adjoint_defect,
        hypothesis_distance: hyp.distance,
        projection_norm,
        verdict: Verdict::from_pass(pass),
    })
}

/// Containment of `(T^n 0)` in the half-space `{f ≥ 0}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalfSpaceReport {
    pub f: LinearFunctional,
    pub orbit_values: Vec<f64>,
    pub min_value: f64,
    pub source_functional: L1Functional,
    pub default_extrapolated: bool,
    pub fit_oscillation: f64,
    pub verdict: Verdict,
}

/// `e_s` for the lowest indices of `last`'s support, or `e_1…e_10` when it is empty.
pub fn default_probes(last: &SeqVector) -> Vec<SeqVector> {
    let support: Vec<i64> = last.support().take(DEFAULT_PROBE_COUNT).collect();
    let indices = if support.is_empty() {
        (1..=DEFAULT_PROBE_COUNT as i64).collect()
    } else {
        support
    };
    indices.into_iter().map(SeqVector::basis).collect()
}

pub fn half_space(
    map: &Map,
    orbit_length: usize,
    probes: Option<&[SeqVector]>,
    tol: f64,
) -> Result<HalfSpaceReport, InvariantError> {
    let traj = iterate(map, &SeqVector::zero(), orbit_length)?;
    half_space_from_orbit(&traj.points, map.space(), probes, tol)
}

/// As [`half_space`], on an orbit `T^n 0` that has already been computed.
pub fn half_space_from_orbit(
    orbit: &[SeqVector],
    space: SpaceTag,
    probes: Option<&[SeqVector]>,
    tol: f64,
) -> Result<HalfSpaceReport, InvariantError> {
    if space != SpaceTag::L1Seq {
        return Err(InvariantError::NotL1(space));
    }
    let last = orbit.last().ok_or(FitError::EmptyOrbit)?;
    let probes = match probes {
        Some(p) => p.to_vec(),
        None => default_probes(last),
    };
    let fit = fit_limit(orbit, space, &probes, tol)?;
    let MetricFunctional::L1(h) = fit.functional else {
        unreachable!("l1 fits produce l1 functionals")
    };
    let (f, fixed) = if h.is_norm() {
        (LinearFunctional::zero(DualNorm::Inf), true)
    } else {
        (linear_minorant(&h).negated(), false)
    };
    let orbit_values: Vec<f64> = orbit.iter().map(|x| f.eval(x)).collect();
    let min_value = orbit_values.iter().copied().fold(f64::INFINITY, f64::min);
    let verdict = if fixed {
        Verdict::FixedPoint
    } else {
        Verdict::from_pass(min_value >= -HALF_SPACE_SLACK && f.dual_norm_value() <= 1.0 + 1e-12)
    };
    Ok(HalfSpaceReport {
        f,
        orbit_values,
        min_value,
        source_functional: h,
        default_extrapolated: fit.default_extrapolated,
        fit_oscillation: fit.max_oscillation,
        verdict,
    })
}
