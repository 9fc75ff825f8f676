//! Config-driven experiment runs: one shared orbit, a list of diagnostics,
//! and a deterministic JSON report with plot-ready series.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    cosmic_diagnose, escape_rate, iterate_with_window, mean_ergodic_for, step_norm_check,
    CosmicOptions, CosmicReport, DynamicsError, EscapeReport, MeanErgodicReport, StepNormReport,
    Trajectory, STEP_NORM_THRESHOLD,
};
use crate::functionals::{fit_limit, FitError, FormResidual, MetricFunctional};
use crate::invariant::{
    extract_functional, half_space_from_orbit, hypothesis_test, HalfSpaceReport, HypothesisReport,
    InvarianceReport, DEFAULT_FIT_TOL,
};
use crate::maps::{
    check_firm, check_nonexpansive, FirmReport, Map, MapConfig, NonexpansiveReport, PluginRegistry,
    DEFAULT_SUPPORT_WINDOW, DEFAULT_T_GRID,
};
use crate::sampling::{Sampler, DEFAULT_WINDOW};
use crate::spaces::{SeqVector, SpaceTag};
use crate::verdict::Verdict;

pub const MIN_ITERATIONS: usize = 16;
pub const DEFAULT_SAMPLES: usize = 1000;
const PROBE_INDICES: usize = 10;
/// Mean-ergodic orbit identity `T^n 0 = Σ U^k v` must hold to this.
pub const ORBIT_IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExperimentKind {
    EscapeRate,
    Cosmic,
    MetricLimit,
    FirmCheck,
    MeanErgodic,
    InvariantSubspace,
    HalfSpace,
    StepNorms,
    Nonexpansive,
}

impl ExperimentKind {
    fn seed_offset(self) -> u64 {
        self as u64
    }
}

fn default_fit_tol() -> f64 {
    DEFAULT_FIT_TOL
}
fn default_step_norm() -> f64 {
    STEP_NORM_THRESHOLD
}
fn default_support_window() -> i64 {
    DEFAULT_SUPPORT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Tail oscillation allowed when fitting a limit functional.
    #[serde(default = "default_fit_tol")]
    pub fit: f64,
    /// Threshold on `|last step norm − τ|`.
    #[serde(default = "default_step_norm")]
    pub step_norm: f64,
    /// Largest admissible `|s|` in any orbit point.
    #[serde(default = "default_support_window")]
    pub support_window: i64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            fit: DEFAULT_FIT_TOL,
            step_norm: STEP_NORM_THRESHOLD,
            support_window: DEFAULT_SUPPORT_WINDOW,
        }
    }
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}
fn default_sample_window() -> (i64, i64) {
    DEFAULT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub space: SpaceTag,
    pub map: MapConfig,
    #[serde(default)]
    pub start: SeqVector,
    pub iterations: usize,
    pub experiments: Vec<ExperimentKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<Vec<SeqVector>>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
    /// Random points (or pairs) drawn for each sampled check.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Index window `[lo, hi]` of random sample supports (sequence spaces).
    #[serde(default = "default_sample_window")]
    pub sample_window: (i64, i64),
    /// Orbit indices whose norms are recorded individually.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid config:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
pub struct ValidationError(pub Vec<FieldError>);

impl ValidationError {
    fn single(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("orbit computation failed at {0}")]
    Orbit(DynamicsError),
    #[error("{experiment:?}: {message}")]
    Experiment {
        experiment: ExperimentKind,
        message: String,
    },
}

impl ExperimentConfig {
    /// Parses JSON, reporting the path of the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self, ValidationError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".into() } else { path };
            ValidationError::single(field, e.into_inner().to_string())
        })
    }

    /// Checks every field and builds the map; all problems are reported at once.
    pub fn validate(&self, plugins: &PluginRegistry) -> Result<Map, ValidationError> {
        let mut errs = Vec::new();
        let mut push = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.into(),
                message,
            })
        };
        if self.iterations < MIN_ITERATIONS {
            push(
                "iterations",
                format!("must be at least {MIN_ITERATIONS}, got {}", self.iterations),
            );
        }
        if self.experiments.is_empty() {
            push("experiments", "at least one experiment is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.experiments {
            if !seen.insert(*e) {
                push("experiments", format!("{e:?} listed twice"));
            }
        }
        if let Err(e) = self
            .space
            .check(&self.start)
            .and_then(|_| self.start.check_finite())
        {
            push("start", e.to_string());
        }
        if let Some(probes) = &self.probes {
            if probes.is_empty() {
                push("probes", "must be nonempty when given".into());
            }
            for (k, p) in probes.iter().enumerate() {
                if let Err(e) = self.space.check(p).and_then(|_| p.check_finite()) {
                    push(&format!("probes[{k}]"), e.to_string());
                }
            }
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("tolerances.fit", t.fit),
            ("tolerances.step_norm", t.step_norm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                push(name, format!("must be positive and finite, got {v}"));
            }
        }
        if t.support_window < 1 {
            push("tolerances.support_window", "must be at least 1".into());
        }
        if self.samples == 0 {
            push("samples", "must be at least 1".into());
        }
        if self.sample_window.0 > self.sample_window.1 {
            push("sample_window", "lower bound exceeds upper bound".into());
        }
        for &k in &self.checkpoints {
            if k > self.iterations {
                push(
                    "checkpoints",
                    format!("{k} exceeds iterations {}", self.iterations),
                );
            }
        }
        let map = match self.map.build(self.space, plugins) {
            Ok(m) => Some(m),
            Err(e) => {
                push("map", e.to_string());
                None
            }
        };
        for e in &self.experiments {
            match e {
                ExperimentKind::HalfSpace => {
                    if self.space != SpaceTag::L1Seq {
                        push(
                            "experiments",
                            format!("HALF_SPACE requires l1_seq, space is {}", self.space),
                        );
                    }
                    if !self.start.is_zero() {
                        push(
                            "start",
                            "HALF_SPACE examines the orbit of 0; start must be {}".into(),
                        );
                    }
                }
                ExperimentKind::InvariantSubspace | ExperimentKind::MeanErgodic => {
                    let euclid = matches!(self.space, SpaceTag::Euclidean { .. });
                    let affine = matches!(self.map, MapConfig::Affine { .. });
                    if !euclid || !affine {
                        push(
                            "experiments",
                            format!("{e:?} requires an affine map on a euclidean space"),
                        );
                    }
                }
                _ => {}
            }
        }
        match (errs.is_empty(), map) {
            (true, Some(m)) => Ok(m),
            _ => Err(ValidationError(errs)),
        }
    }
}

/// Norm of `T^n x` at a configured index, with the closed form when known.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointRecord {
    pub n: usize,
    pub norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrbitSummary {
    pub iterations: usize,
    pub final_norm: f64,
    pub max_norm: f64,
    /// Largest increase between consecutive step norms.
    pub step_increase: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<CheckpointRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricLimitRecord {
    pub functional: MetricFunctional,
    pub probes: usize,
    pub max_oscillation: f64,
    pub max_residual: f64,
    pub default_extrapolated: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<FormResidual>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepNormRecord {
    #[serde(flatten)]
    pub check: StepNormReport,
    pub firm_by_construction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirmRecord {
    #[serde(flatten)]
    pub check: FirmReport,
    pub pairs: usize,
    pub t_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanErgodicRecord {
    #[serde(flatten)]
    pub report: MeanErgodicReport,
    /// `2‖v‖/n`, a bound on the gap when the fixed space is trivial and `U` is periodic.
    pub cesaro_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantRecord {
    pub hypothesis: HypothesisReport,
    #[serde(flatten)]
    pub report: InvarianceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Detail {
    Escape(EscapeReport),
    Cosmic(CosmicReport),
    MetricLimit(MetricLimitRecord),
    Firm(FirmRecord),
    MeanErgodic(MeanErgodicRecord),
    Invariant(Box<InvariantRecord>),
    HalfSpace(Box<HalfSpaceReport>),
    StepNorms(StepNormRecord),
    Nonexpansive(NonexpansiveReport),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRecord {
    pub experiment: ExperimentKind,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<Detail>,
}

/// Everything a run produces. Key order is fixed, so equal inputs give
/// byte-identical JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub config: ExperimentConfig,
    pub orbit: OrbitSummary,
    pub results: Vec<ResultRecord>,
    pub series: BTreeMap<String, Vec<(usize, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

/// Index window for per-coordinate trajectory columns.
pub fn csv_window(cfg: &ExperimentConfig) -> (i64, i64) {
    match cfg.space {
        SpaceTag::Euclidean { dim } => (1, dim as i64),
        _ => cfg.sample_window,
    }
}

impl ExperimentReport {
    pub fn result(&self, kind: ExperimentKind) -> Option<&ResultRecord> {
        self.results.iter().find(|r| r.experiment == kind)
    }

    pub fn any_fail(&self) -> bool {
        self.results.iter().any(|r| r.verdict == Verdict::Fail)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

/// Probes for limit fitting: `e_s` at the lowest indices of the final
/// point's support (or `1…10`); Hilbert spaces also get `−e_s, ±2e_s`.
pub fn default_probes(last: &SeqVector, space: SpaceTag) -> Vec<SeqVector> {
    let mut idx: Vec<i64> = last.support().take(PROBE_INDICES).collect();
    if idx.is_empty() {
        let hi = match space {
            SpaceTag::Euclidean { dim } => dim.min(PROBE_INDICES) as i64,
            _ => PROBE_INDICES as i64,
        };
        idx = (1..=hi).collect();
    }
    let scales: &[f64] = if space.is_hilbert() {
        &[1.0, -1.0, 2.0, -2.0]
    } else {
        &[1.0]
    };
    idx.iter()
        .flat_map(|&s| scales.iter().map(move |&c| SeqVector::basis(s).scale(c)))
        .collect()
}

fn record(kind: ExperimentKind, verdict: Verdict, detail: Detail) -> ResultRecord {
    ResultRecord {
        experiment: kind,
        verdict,
        message: None,
        detail: Some(detail),
    }
}

fn outcome(kind: ExperimentKind, verdict: Verdict, message: String) -> ResultRecord {
    ResultRecord {
        experiment: kind,
        verdict,
        message: Some(message),
        detail: None,
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    map: &'a Map,
    traj: &'a Trajectory,
    series: BTreeMap<String, Vec<(usize, f64)>>,
}

impl Ctx<'_> {
    fn sampler(&self, kind: ExperimentKind) -> Sampler {
        Sampler::with_window(
            self.cfg.seed.wrapping_add(kind.seed_offset()),
            self.cfg.space,
            self.cfg.sample_window,
        )
    }

    fn fail(kind: ExperimentKind, e: impl fmt::Display) -> RunError {
        RunError::Experiment {
            experiment: kind,
            message: e.to_string(),
        }
    }

    fn probes(&self) -> Vec<SeqVector> {
        self.cfg
            .probes
            .clone()
            .unwrap_or_else(|| default_probes(self.traj.last(), self.cfg.space))
    }

    fn run(&mut self, kind: ExperimentKind) -> Result<ResultRecord, RunError> {
        use ExperimentKind as K;
        let traj = self.traj;
        Ok(match kind {
            K::EscapeRate => {
                let rep = escape_rate(traj).map_err(|e| Self::fail(kind, e))?;
                let v = if rep.converged {
                    Verdict::Pass
                } else {
                    Verdict::NotConverged
                };
                record(kind, v, Detail::Escape(rep))
            }
            K::StepNorms => {
                let tau = escape_rate(traj)
                    .map_err(|e| Self::fail(kind, e))?
                    .tau_subadditive;
                let check = step_norm_check(traj, tau, self.cfg.tolerances.step_norm)
                    .map_err(|e| Self::fail(kind, e))?;
                let rec = StepNormRecord {
                    check,
                    firm_by_construction: self.map.is_firm_by_construction(),
                };
                record(kind, check.verdict, Detail::StepNorms(rec))
            }
            K::Cosmic => {
                let rep = cosmic_diagnose(traj, &CosmicOptions::default());
                self.series
                    .insert("direction_defects".into(), rep.doubling_defects.clone());
                record(kind, rep.verdict, Detail::Cosmic(rep))
            }
            K::MetricLimit => {
                let probes = self.probes();
                match fit_limit(
                    &traj.points,
                    self.cfg.space,
                    &probes,
                    self.cfg.tolerances.fit,
                ) {
                    Ok(fit) => record(
                        kind,
                        Verdict::Pass,
                        Detail::MetricLimit(MetricLimitRecord {
                            functional: fit.functional,
                            probes: fit.probes.len(),
                            max_oscillation: fit.max_oscillation,
                            max_residual: fit.max_residual,
                            default_extrapolated: fit.default_extrapolated,
                            candidates: fit.candidates,
                        }),
                    ),
                    Err(e @ FitError::NotConverged { .. }) => {
                        outcome(kind, Verdict::NotConverged, e.to_string())
                    }
                    Err(e @ FitError::AmbiguousFit { .. }) => {
                        outcome(kind, Verdict::NotConverged, e.to_string())
                    }
                    Err(e) => return Err(Self::fail(kind, e)),
                }
            }
            K::FirmCheck => {
                let pairs = self.sampler(kind).pairs(self.cfg.samples);
                let check = check_firm(self.map, &pairs, &DEFAULT_T_GRID)
                    .map_err(|e| Self::fail(kind, e))?;
                let rec = FirmRecord {
                    check,
                    pairs: pairs.len(),
                    t_grid: DEFAULT_T_GRID.to_vec(),
                };
                record(kind, check.verdict, Detail::Firm(rec))
            }
            K::Nonexpansive => {
                let pairs = self.sampler(kind).pairs(self.cfg.samples);
                let rep = check_nonexpansive(self.map, &pairs).map_err(|e| Self::fail(kind, e))?;
                record(kind, rep.verdict, Detail::Nonexpansive(rep))
            }
            K::MeanErgodic => {
                let Map::Affine(affine) = self.map else {
                    unreachable!("validated")
                };
                let report = mean_ergodic_for(affine, self.cfg.iterations)
                    .map_err(|e| Self::fail(kind, e))?;
                let v = Verdict::from_pass(report.orbit_identity_defect <= ORBIT_IDENTITY_TOL);
                let cesaro_bound =
                    2.0 * affine.translation_vector().norm2() / self.cfg.iterations as f64;
                record(
                    kind,
                    v,
                    Detail::MeanErgodic(MeanErgodicRecord {
                        report,
                        cesaro_bound,
                    }),
                )
            }
            K::InvariantSubspace => {
                let Map::Affine(affine) = self.map else {
                    unreachable!("validated")
                };
                let hypothesis = hypothesis_test(affine).map_err(|e| Self::fail(kind, e))?;
                match extract_functional(
                    affine,
                    self.cfg.samples,
                    self.cfg.seed.wrapping_add(kind.seed_offset()),
                ) {
                    Ok(report) => record(
                        kind,
                        report.verdict,
                        Detail::Invariant(Box::new(InvariantRecord { hypothesis, report })),
                    ),
                    Err(e) => match e.verdict() {
                        Some(v) => outcome(kind, v, e.to_string()),
                        None => return Err(Self::fail(kind, e)),
                    },
                }
            }
            K::HalfSpace => {
                let probes = self.cfg.probes.as_deref();
                match half_space_from_orbit(
                    &traj.points,
                    self.cfg.space,
                    probes,
                    self.cfg.tolerances.fit,
                ) {
                    Ok(rep) => {
                        self.series.insert(
                            "halfspace".into(),
                            rep.orbit_values.iter().copied().enumerate().collect(),
                        );
                        record(kind, rep.verdict, Detail::HalfSpace(Box::new(rep)))
                    }
                    Err(e) => match e.verdict() {
                        Some(v) => outcome(kind, v, e.to_string()),
                        None => return Err(Self::fail(kind, e)),
                    },
                }
            }
        })
    }
}

fn checkpoint_oracle(map: &Map, n: usize) -> Option<f64> {
    match map {
        Map::Edelstein(e) => Some(e.orbit_norm_sq_closed_form(n as u64).sqrt()),
        Map::Shift(_) => Some(n as f64),
        _ => None,
    }
}

/// Validates `cfg`, iterates once and runs every requested diagnostic in order.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    plugins: &PluginRegistry,
) -> Result<ExperimentReport, RunError> {
    run_with_trajectory(cfg, plugins).map(|(report, _)| report)
}

/// As [`run_experiment`], also returning the shared orbit.
pub fn run_with_trajectory(
    cfg: &ExperimentConfig,
    plugins: &PluginRegistry,
) -> Result<(ExperimentReport, Trajectory), RunError> {
    let map = cfg.validate(plugins)?;
    let traj = iterate_with_window(
        &map,
        &cfg.start,
        cfg.iterations,
        cfg.tolerances.support_window,
    )
    .map_err(RunError::Orbit)?;
    let from_zero = cfg.start.is_zero();

    let orbit = OrbitSummary {
        iterations: cfg.iterations,
        final_norm: *traj.norms.last().expect("nonempty"),
        max_norm: traj.norms.iter().copied().fold(0.0, f64::max),
        step_increase: traj.step_increase(),
        checkpoints: cfg
            .checkpoints
            .iter()
            .map(|&n| CheckpointRecord {
                n,
                norm: traj.norms[n],
                oracle: from_zero.then(|| checkpoint_oracle(&map, n)).flatten(),
            })
            .collect(),
    };

    let mut series = BTreeMap::new();
    series.insert(
        "norms".to_string(),
        traj.norms.iter().copied().enumerate().collect(),
    );
    series.insert(
        "step_norms".to_string(),
        traj.step_norms
            .iter()
            .enumerate()
            .map(|(k, &s)| (k + 1, s))
            .collect(),
    );
    series.insert(
        "tau".to_string(),
        traj.norms
            .iter()
            .enumerate()
            .skip(1)
            .map(|(n, &r)| (n, r / n as f64))
            .collect(),
    );

    let mut ctx = Ctx {
        cfg,
        map: &map,
        traj: &traj,
        series,
    };
    let mut results = Vec::with_capacity(cfg.experiments.len());
    for &kind in &cfg.experiments {
        results.push(ctx.run(kind)?);
    }
    let report = ExperimentReport {
        tool: "horolab",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg.clone(),
        orbit,
        results,
        series: ctx.series,
        wall_time_ms: None,
    };
    Ok((report, traj))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SeriesError {
    #[error("report is not valid JSON: {0}")]
    BadReport(String),
    #[error("unknown series {name:?}; available: {}", .available.join(", "))]
    Unknown {
        name: String,
        available: Vec<String>,
    },
}

/// Extracts a series from a serialised report as `n,value` CSV.
pub fn emit_series(report_json: &str, name: &str) -> Result<String, SeriesError> {
    let value: serde_json::Value =
        serde_json::from_str(report_json).map_err(|e| SeriesError::BadReport(e.to_string()))?;
    let series = value
        .get("series")
        .and_then(|s| s.as_object())
        .ok_or_else(|| SeriesError::BadReport("missing \"series\" object".into()))?;
    let rows: Vec<(usize, Option<f64>)> = match series.get(name) {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| SeriesError::BadReport(format!("series {name:?}: {e}")))?,
        None => {
            return Err(SeriesError::Unknown {
                name: name.into(),
                available: series.keys().cloned().collect(),
            })
        }
    };
    let mut out = String::from("n,value\n");
    for (n, v) in rows {
        match v {
            Some(v) => out.push_str(&format!("{n},{v}\n")),
            None => out.push_str(&format!("{n},\n")),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::CoordSpec;

    fn shift_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "space": {"kind": "l1_seq"},
                "map": {"kind": "shift"},
                "iterations": 1000,
                "experiments": ["ESCAPE_RATE", "COSMIC", "METRIC_LIMIT", "HALF_SPACE", "STEP_NORMS"],
                "seed": 7
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn shift_run() {
        let rep = run_experiment(&shift_config(), &PluginRegistry::new()).unwrap();
        let verdicts: Vec<Verdict> = rep.results.iter().map(|r| r.verdict).collect();
        assert_eq!(
            verdicts,
            [
                Verdict::Pass,
                Verdict::None,
                Verdict::Pass,
                Verdict::Pass,
                Verdict::Pass
            ]
        );
        let Some(Detail::MetricLimit(m)) = &rep.result(ExperimentKind::MetricLimit).unwrap().detail
        else {
            panic!()
        };
        let MetricFunctional::L1(h) = &m.functional else {
            panic!()
        };
        for s in 1..=10 {
            assert_eq!(h.spec(s), CoordSpec::Center(1.0));
        }
        assert!(rep.series["tau"].iter().all(|&(_, t)| t == 1.0));
        assert!(rep.series["halfspace"].iter().all(|&(n, v)| v == n as f64));
    }

    #[test]
    fn deterministic_json() {
        let cfg = shift_config();
        let a = run_experiment(&cfg, &PluginRegistry::new())
            .unwrap()
            .to_json();
        let b = run_experiment(&cfg, &PluginRegistry::new())
            .unwrap()
            .to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn echo_round_trips() {
        let rep = run_experiment(&shift_config(), &PluginRegistry::new()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        let echo: ExperimentConfig = serde_json::from_value(v["config"].clone()).unwrap();
        assert_eq!(echo, rep.config);
    }

    #[test]
    fn validation_reports_fields() {
        let mut cfg = shift_config();
        cfg.iterations = 8;
        cfg.space = SpaceTag::Euclidean { dim: 2 };
        cfg.experiments.push(ExperimentKind::InvariantSubspace);
        let err = cfg.validate(&PluginRegistry::new()).unwrap_err();
        let fields: Vec<&str> = err.0.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains(&"iterations"));
        assert!(fields.contains(&"map"));
        assert!(fields.contains(&"experiments"));
    }

    #[test]
    fn parse_errors_name_the_field() {
        let err = ExperimentConfig::from_json(
            r#"{"space": {"kind": "l1_seq"}, "map": {"kind": "shift"}, "iterations": "many", "experiments": []}"#,
        )
        .unwrap_err();
        assert_eq!(err.0[0].field, "iterations");
        let err = ExperimentConfig::from_json(
            r#"{"space": {"kind": "l1_seq"}, "map": {"kind": "shift"}, "iterations": 20, "experiments": ["BOGUS"]}"#,
        )
        .unwrap_err();
        assert!(err.0[0].field.starts_with("experiments"));
    }

    #[test]
    fn overflow_surfaces_iteration() {
        let mut cfg = shift_config();
        cfg.tolerances.support_window = 50;
        match run_experiment(&cfg, &PluginRegistry::new()) {
            Err(RunError::Orbit(DynamicsError::Map { iteration, .. })) => assert_eq!(iteration, 51),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn series_extraction() {
        let json = run_experiment(&shift_config(), &PluginRegistry::new())
            .unwrap()
            .to_json();
        let csv = emit_series(&json, "halfspace").unwrap();
        assert!(
            csv.starts_with("n,value\n0,0\n1,1\n2,2\n"),
            "{}",
            &csv[..40]
        );
        match emit_series(&json, "bogus") {
            Err(SeriesError::Unknown { available, .. }) => {
                assert_eq!(
                    available,
                    [
                        "direction_defects",
                        "halfspace",
                        "norms",
                        "step_norms",
                        "tau"
                    ]
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hypothesis_failure_is_a_verdict() {
        let cfg = ExperimentConfig::from_json(
            r#"{
                "space": {"kind": "euclidean", "dim": 2},
                "map": {"kind": "affine", "op": {"type": "dense", "rows": [[0.0, -1.0], [1.0, 0.0]]},
                        "translation": {"1": 1.0}},
                "iterations": 400,
                "experiments": ["MEAN_ERGODIC", "INVARIANT_SUBSPACE", "COSMIC"]
            }"#,
        )
        .unwrap();
        let rep = run_experiment(&cfg, &PluginRegistry::new()).unwrap();
        assert_eq!(rep.results[0].verdict, Verdict::Pass);
        assert_eq!(rep.results[1].verdict, Verdict::HypothesisFails);
        assert_eq!(rep.results[2].verdict, Verdict::UndefinedBoundedOrbit);
    }
}
