use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::resource::{Estimate, QueueRef};
use crate::workflow::DataClass;

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub String);

impl JobId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for JobId {
    fn from(s: &str) -> Self {
        JobId(s.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Created,
    Eligible,
    Queued,
    Running,
    Finished,
    Failed,
    KilledWalltime,
    Cancelled,
    TerminallyFailed,
}

impl JobState {
    pub const ALL: [JobState; 9] = [
        JobState::Created,
        JobState::Eligible,
        JobState::Queued,
        JobState::Running,
        JobState::Finished,
        JobState::Failed,
        JobState::KilledWalltime,
        JobState::Cancelled,
        JobState::TerminallyFailed,
    ];

    /// Finished, cancelled and terminally failed jobs never change again.
    pub fn is_absorbing(self) -> bool {
        matches!(self, JobState::Finished | JobState::Cancelled | JobState::TerminallyFailed)
    }

    pub fn is_faulty(self) -> bool {
        matches!(self, JobState::Failed | JobState::KilledWalltime | JobState::TerminallyFailed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Created => "created",
            JobState::Eligible => "eligible",
            JobState::Queued => "queued",
            JobState::Running => "running",
            JobState::Finished => "finished",
            JobState::Failed => "failed",
            JobState::KilledWalltime => "killed_walltime",
            JobState::Cancelled => "cancelled",
            JobState::TerminallyFailed => "terminally_failed",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a job input comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSource {
    /// A file supplied with the workflow (path relative to the inputs root).
    File { port: String, path: String },
    /// An artifact produced by an upstream job of the same sweep point.
    Upstream { port: String, job: JobId, from_port: String },
}

impl InputSource {
    pub fn port(&self) -> &str {
        match self {
            InputSource::File { port, .. } | InputSource::Upstream { port, .. } => port,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub port: String,
    pub file: String,
    pub data_class: DataClass,
}

/// Everything an executor needs to launch one job.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub executable: String,
    pub args: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub inputs: Vec<InputSource>,
    #[serde(default)]
    pub outputs: Vec<OutputSpec>,
    #[serde(default)]
    pub checkpointable: bool,
    /// Queue chosen by hand in the binding; overrides automatic placement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned_queue: Option<QueueRef>,
}

/// Placement of a job: queue plus how it is split into checkpointed segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub job: JobId,
    pub queue: QueueRef,
    pub segments: u32,
    /// Minutes per segment.
    pub segment_runtime: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub ts: u64,
    pub from: JobState,
    pub to: JobState,
    pub attempt: u32,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: JobId,
    pub run_id: String,
    pub node_id: String,
    pub params: BTreeMap<String, String>,
    pub user: String,
    pub spec: JobSpec,
    /// Estimate from the profile, never inflated.
    pub base_estimate: Estimate,
    /// Current scheduling estimate (inflated after walltime kills).
    pub estimate: Estimate,
    pub state: JobState,
    pub assignment: Option<Assignment>,
    /// Segment currently queued or running, 1-based.
    pub segment: u32,
    pub attempt: u32,
    pub max_attempts: u32,
    pub history: Vec<HistoryEntry>,
    pub depends_on: Vec<JobId>,
}

impl Job {
    /// A fresh job in `created` with no dependencies or parameters.
    pub fn new(id: impl Into<String>, user: &str, spec: JobSpec, estimate: Estimate) -> Job {
        let id = JobId(id.into());
        Job {
            node_id: id.0.clone(),
            id,
            run_id: String::new(),
            params: BTreeMap::new(),
            user: user.into(),
            spec,
            base_estimate: estimate,
            estimate,
            state: JobState::Created,
            assignment: None,
            segment: 1,
            attempt: 1,
            max_attempts: super::DEFAULT_MAX_ATTEMPTS,
            history: Vec::new(),
            depends_on: Vec::new(),
        }
    }

    pub fn segments(&self) -> u32 {
        self.assignment.as_ref().map_or(1, |a| a.segments)
    }
}

/// One line of the run event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub ts: u64,
    pub job: JobId,
    pub from: JobState,
    pub to: JobState,
    pub detail: String,
}

impl TransitionRecord {
    pub fn to_json_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("record serializes");
        line.push('\n');
        line
    }
}

/// Renders records as newline-delimited JSON.
pub fn to_ndjson<'a>(records: impl IntoIterator<Item = &'a TransitionRecord>) -> String {
    records.into_iter().map(TransitionRecord::to_json_line).collect()
}
