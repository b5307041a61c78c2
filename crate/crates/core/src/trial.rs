use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::space::Configuration;
use crate::trace::TrialStats;

/// Machine-readable reasons an external trial can end Incomplete, listed in
/// precedence order.
pub mod reason {
    pub const LAUNCH_FAILED: &str = "launch-failed";
    pub const READINESS_TIMEOUT: &str = "readiness-timeout";
    pub const WORKLOAD_FAILED: &str = "workload-failed";
    pub const TRACES_MISSING: &str = "traces-missing";
    pub const TIMEOUT: &str = "timeout";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Incomplete {
        reason: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
}

impl TrialStatus {
    pub fn incomplete(reason: impl Into<String>) -> Self {
        TrialStatus::Incomplete {
            reason: reason.into(),
            detail: None,
        }
    }

    pub fn incomplete_with(reason: impl Into<String>, detail: impl Into<String>) -> Self {
        TrialStatus::Incomplete {
            reason: reason.into(),
            detail: Some(detail.into()),
        }
    }

    pub fn is_complete(&self) -> bool {
        matches!(self, TrialStatus::Complete)
    }

    pub fn reason(&self) -> Option<&str> {
        match self {
            TrialStatus::Complete => None,
            TrialStatus::Incomplete { reason, .. } => Some(reason),
        }
    }
}

/// What an evaluator reports for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub status: TrialStatus,
    pub stats: Option<TrialStats>,
    /// End-to-end latency of every collected request, warmup included.
    pub samples: Vec<f64>,
    /// Measurement time in seconds. Simulated evaluations report the
    /// simulated request time rather than host wall-clock time.
    pub elapsed_s: f64,
}

/// One evaluated configuration as recorded in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: u64,
    /// The non-optimized reference trial evaluated before any candidate.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub baseline: bool,
    pub config_index: u64,
    pub configuration: Configuration,
    pub status: TrialStatus,
    pub stats: Option<TrialStats>,
    #[serde(default)]
    pub samples: Vec<f64>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub elapsed_s: f64,
}

impl Trial {
    /// Mean latency, present only for Complete trials.
    pub fn mean(&self) -> Option<f64> {
        if self.status.is_complete() {
            self.stats.as_ref().map(|s| s.mean)
        } else {
            None
        }
    }

    pub fn is_complete(&self) -> bool {
        self.status.is_complete()
    }
}
