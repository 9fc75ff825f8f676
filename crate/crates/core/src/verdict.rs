use std::fmt;

use serde::{Deserialize, Serialize};

/// Outcome label attached to every diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
    FixedPoint,
    NotConverged,
    Degenerate,
    HypothesisFails,
    UndefinedBoundedOrbit,
    None,
    Strong,
    WeakOnlyCandidate,
}

impl Verdict {
    pub fn from_pass(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::FixedPoint => "FIXED_POINT",
            Verdict::NotConverged => "NOT_CONVERGED",
            Verdict::Degenerate => "DEGENERATE",
            Verdict::HypothesisFails => "HYPOTHESIS_FAILS",
            Verdict::UndefinedBoundedOrbit => "UNDEFINED_BOUNDED_ORBIT",
            Verdict::None => "NONE",
            Verdict::Strong => "STRONG",
            Verdict::WeakOnlyCandidate => "WEAK_ONLY_CANDIDATE",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
