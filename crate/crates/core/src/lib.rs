//! Numerical laboratory for the asymptotics of nonexpansive maps.
//!
//! Orbits of maps on `ℝ^d`, `ℓ²` and `ℓ¹(ℤ)` are iterated exactly as
//! finitely supported sequences; the diagnostics estimate escape rates,
//! normalised (cosmic) directions, metric-functional limits, invariant
//! subspaces of affine maps and half-space containments of `ℓ¹` orbits.

pub mod dynamics;
pub mod experiment;
pub mod functionals;
pub mod invariant;
pub mod maps;
pub mod sampling;
pub mod spaces;
pub mod verdict;

pub use dynamics::{iterate, Trajectory};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport};
pub use functionals::{
    fit_limit, linear_minorant, lipschitz_audit, phi, CoordSpec, DualNorm, L1Functional, LimitFit,
    LinearFunctional, MetricFunctional,
};
pub use maps::{Map, MapConfig, MapError, PluginRegistry};
pub use spaces::{inner, norm, SeqVector, SpaceTag};
pub use verdict::Verdict;
