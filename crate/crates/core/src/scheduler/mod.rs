//! Job lifecycle, queue placement and run summaries.

mod job;
mod plan;
mod state;
mod summary;

use core::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use job::{
    to_ndjson, Assignment, HistoryEntry, InputSource, Job, JobId, JobSpec, JobState, OutputSpec, TransitionRecord,
};
pub use plan::{
    escalate, plan, plan_with, poll, segment_job, Candidate, EmptiestBestFit, NotCheckpointable, OccupancyProbe,
    OccupancySnapshot, Plan, QueueOccupancy, QueueRanking, Unschedulable, UnschedulableReason,
};
pub use state::{is_legal, on_job_event, Action, EventOutcome, IllegalTransition, JobEvent};
pub use summary::{FaultyAttempt, Ledger, RunSummary};

use crate::resource::parse_duration;

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;

/// Polling period in seconds, written as a duration string such as `"10s"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Period(pub u64);

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.0)
    }
}

impl Serialize for Period {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Period {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = alloc::string::String::deserialize(d)?;
        parse_duration(&text).map(Period).map_err(serde::de::Error::custom)
    }
}

/// Scheduler knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Policy {
    /// Multiplier on estimated runtime before comparing with a walltime; ≥ 1.
    pub safety: f64,
    pub max_attempts: u32,
    /// Estimate multiplier applied after a walltime kill.
    pub inflation: f64,
    /// Accepted for config compatibility. Both drivers re-poll occupancy on
    /// every job event, which is the only time it can change.
    pub poll_period: Period,
    /// Block placement on queue memory limits.
    pub enforce_memory: bool,
}

impl Default for Policy {
    fn default() -> Self {
        Policy { safety: 1.15, max_attempts: DEFAULT_MAX_ATTEMPTS, inflation: 1.5, poll_period: Period(10), enforce_memory: false }
    }
}

impl Policy {
    pub fn with_safety(mut self, safety: f64) -> Self {
        self.safety = safety;
        self
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.safety >= 1.0) || !self.safety.is_finite() {
            return Err("safety must be a finite factor >= 1");
        }
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1");
        }
        if !(self.inflation >= 1.0) || !self.inflation.is_finite() {
            return Err("inflation must be a finite factor >= 1");
        }
        Ok(())
    }
}
