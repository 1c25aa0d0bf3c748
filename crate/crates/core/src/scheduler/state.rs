//! The job lifecycle state machine.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::job::{HistoryEntry, Job, JobId, JobState, TransitionRecord};
use super::Policy;
use crate::resource::{Estimate, QueueRef};

/// Something an executor reports about a job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobEvent {
    Queued,
    Started,
    Exited { code: i32 },
    WalltimeKilled,
    Lost,
}

impl fmt::Display for JobEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JobEvent::Queued => f.write_str("queued"),
            JobEvent::Started => f.write_str("started"),
            JobEvent::Exited { code } => write!(f, "exited({code})"),
            JobEvent::WalltimeKilled => f.write_str("walltime_killed"),
            JobEvent::Lost => f.write_str("lost"),
        }
    }
}

/// Follow-up work the run driver must perform after an event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    /// Submit the same job again to the same queue.
    Resubmit { attempt: u32, queue: QueueRef },
    /// Pick a queue with a longer walltime, using the inflated estimate.
    Replan { estimate: Estimate, after: QueueRef },
    /// Submit the next checkpointed segment.
    SubmitSegment { segment: u32 },
    /// Cancel every job downstream of this one.
    CancelDownstream,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("job {job}: event {event} is not legal in state {state}")]
pub struct IllegalTransition {
    pub job: JobId,
    pub state: JobState,
    pub event: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventOutcome {
    pub state: JobState,
    pub actions: Vec<Action>,
    pub transitions: Vec<TransitionRecord>,
}

/// Every edge of the lifecycle graph.
pub fn is_legal(from: JobState, to: JobState) -> bool {
    use JobState::*;
    matches!(
        (from, to),
        (Created, Eligible)
            | (Created, Cancelled)
            | (Eligible, Queued)
            | (Eligible, Cancelled)
            | (Eligible, TerminallyFailed)
            | (Queued, Running)
            | (Queued, Failed)
            | (Queued, Cancelled)
            | (Running, Finished)
            | (Running, Queued)
            | (Running, Failed)
            | (Running, KilledWalltime)
            | (Running, Cancelled)
            | (Failed, Queued)
            | (Failed, TerminallyFailed)
            | (Failed, Cancelled)
            | (KilledWalltime, Queued)
            | (KilledWalltime, TerminallyFailed)
            | (KilledWalltime, Cancelled)
    )
}

impl Job {
    /// Moves the job to `to`, recording history. Panics on an edge outside
    /// the lifecycle graph; callers check legality first.
    pub fn transition(&mut self, to: JobState, ts: u64, detail: impl Into<String>) -> TransitionRecord {
        let from = self.state;
        assert!(is_legal(from, to), "job {}: {from} -> {to} is not a lifecycle edge", self.id);
        let detail = detail.into();
        self.state = to;
        self.history.push(HistoryEntry { ts, from, to, attempt: self.attempt, detail: detail.clone() });
        TransitionRecord { ts, job: self.id.clone(), from, to, detail }
    }

    fn illegal(&self, event: impl ToString) -> IllegalTransition {
        IllegalTransition { job: self.id.clone(), state: self.state, event: event.to_string() }
    }

    /// Dependencies satisfied: created → eligible.
    pub fn release(&mut self, ts: u64) -> Result<TransitionRecord, IllegalTransition> {
        if self.state != JobState::Created {
            return Err(self.illegal("release"));
        }
        Ok(self.transition(JobState::Eligible, ts, ""))
    }

    pub fn cancel(&mut self, ts: u64, detail: &str) -> Result<TransitionRecord, IllegalTransition> {
        if self.state.is_absorbing() {
            return Err(self.illegal("cancel"));
        }
        Ok(self.transition(JobState::Cancelled, ts, detail))
    }

    /// No queue can ever take this job.
    pub fn reject(&mut self, ts: u64, detail: &str) -> Result<TransitionRecord, IllegalTransition> {
        if self.state != JobState::Eligible {
            return Err(self.illegal("reject"));
        }
        Ok(self.transition(JobState::TerminallyFailed, ts, detail))
    }

    fn queued_detail(&self) -> String {
        match &self.assignment {
            Some(a) => alloc::format!("queue={} segment={}/{}", a.queue, self.segment, a.segments),
            None => String::new(),
        }
    }

    /// After a failure: retry while attempts remain, otherwise fail terminally.
    fn after_fault(&mut self, ts: u64, out: &mut EventOutcome, retry: Action) {
        if self.attempt < self.max_attempts {
            out.actions.push(retry);
        } else {
            let detail = alloc::format!("attempt {}/{} exhausted", self.attempt, self.max_attempts);
            out.transitions.push(self.transition(JobState::TerminallyFailed, ts, detail));
            out.actions.push(Action::CancelDownstream);
        }
    }
}

/// Applies an executor event to a job and returns the resulting state, the
/// follow-up actions and the transitions recorded.
///
/// * `queued` moves an eligible job into its queue, or resubmits a failed or
///   walltime-killed job as the next attempt.
/// * `exited(0)` finishes the job or, for segmented jobs, queues the next segment.
/// * `exited(≠0)` and `lost` fail the attempt; the job is resubmitted to the
///   same queue while attempts remain.
/// * `walltime_killed` asks for a re-plan with the estimate inflated by
///   `policy.inflation`.
pub fn on_job_event(
    job: &mut Job,
    event: &JobEvent,
    policy: &Policy,
    ts: u64,
    detail: &str,
) -> Result<EventOutcome, IllegalTransition> {
    use JobState::*;
    let mut out = EventOutcome { state: job.state, actions: Vec::new(), transitions: Vec::new() };
    match (job.state, event) {
        (Eligible, JobEvent::Queued) => {
            if job.assignment.is_none() {
                return Err(job.illegal("queued without assignment"));
            }
            let d = job.queued_detail();
            out.transitions.push(job.transition(Queued, ts, d));
        }
        (Failed | KilledWalltime, JobEvent::Queued) => {
            if job.attempt >= job.max_attempts || job.assignment.is_none() {
                return Err(job.illegal(event));
            }
            job.attempt += 1;
            let d = job.queued_detail();
            out.transitions.push(job.transition(Queued, ts, d));
        }
        (Queued, JobEvent::Started) => {
            out.transitions.push(job.transition(Running, ts, detail));
        }
        (Running, JobEvent::Exited { code: 0 }) => {
            if job.segment < job.segments() {
                job.segment += 1;
                let d = job.queued_detail();
                out.transitions.push(job.transition(Queued, ts, d));
                out.actions.push(Action::SubmitSegment { segment: job.segment });
            } else {
                out.transitions.push(job.transition(Finished, ts, detail));
            }
        }
        (Running, JobEvent::Exited { code }) => {
            let d = if detail.is_empty() { alloc::format!("exit code {code}") } else { detail.into() };
            out.transitions.push(job.transition(Failed, ts, d));
            let queue = job.assignment.as_ref().expect("running job has assignment").queue.clone();
            let retry = Action::Resubmit { attempt: job.attempt + 1, queue };
            job.after_fault(ts, &mut out, retry);
        }
        (Queued | Running, JobEvent::Lost) => {
            let d = if detail.is_empty() { "lost".into() } else { String::from(detail) };
            out.transitions.push(job.transition(Failed, ts, d));
            let queue = job.assignment.as_ref().expect("queued job has assignment").queue.clone();
            let retry = Action::Resubmit { attempt: job.attempt + 1, queue };
            job.after_fault(ts, &mut out, retry);
        }
        (Running, JobEvent::WalltimeKilled) => {
            let queue = job.assignment.as_ref().expect("running job has assignment").queue.clone();
            let d = if detail.is_empty() { alloc::format!("walltime of {queue} exceeded") } else { detail.into() };
            out.transitions.push(job.transition(KilledWalltime, ts, d));
            let retry = Action::Replan { estimate: job.estimate.inflate(policy.inflation), after: queue };
            job.after_fault(ts, &mut out, retry);
        }
        _ => return Err(job.illegal(event)),
    }
    out.state = job.state;
    Ok(out)
}
