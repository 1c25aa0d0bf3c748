use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::job::{Job, JobId, JobState, TransitionRecord};

/// One attempt that ended badly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultyAttempt {
    pub job: JobId,
    pub attempt: u32,
    /// Worst state the attempt reached: failed, killed_walltime or terminally_failed.
    pub state: JobState,
    pub ts: u64,
    pub detail: String,
    /// Where the job stands now.
    pub final_state: JobState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub total: usize,
    /// Non-zero state counts; they always sum to `total`.
    pub counts: BTreeMap<JobState, usize>,
    pub faulty: Vec<FaultyAttempt>,
}

impl RunSummary {
    pub fn count(&self, state: JobState) -> usize {
        self.counts.get(&state).copied().unwrap_or(0)
    }

    /// Summary of jobs whose current state and history are known.
    pub fn from_jobs<'a>(run: &str, jobs: impl IntoIterator<Item = &'a Job>) -> RunSummary {
        let mut ledger = Ledger::default();
        for job in jobs {
            ledger.add_job(job.id.clone());
            for h in &job.history {
                ledger.apply(&TransitionRecord {
                    ts: h.ts,
                    job: job.id.clone(),
                    from: h.from,
                    to: h.to,
                    detail: h.detail.clone(),
                });
            }
        }
        ledger.summary(run)
    }

    /// Summary rebuilt from an event log over the given jobs (all starting in
    /// `created`).
    pub fn replay<'a>(
        run: &str,
        jobs: impl IntoIterator<Item = JobId>,
        records: impl IntoIterator<Item = &'a TransitionRecord>,
    ) -> RunSummary {
        let mut ledger = Ledger::default();
        for id in jobs {
            ledger.add_job(id);
        }
        for r in records {
            ledger.apply(r);
        }
        ledger.summary(run)
    }
}

#[derive(Debug, Clone)]
struct Track {
    state: JobState,
    attempt: u32,
    faults: Vec<(u32, JobState, u64, String)>,
}

/// Folds transition records into per-job state, attempt and fault lists.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    order: Vec<JobId>,
    jobs: BTreeMap<JobId, Track>,
}

impl Ledger {
    pub fn add_job(&mut self, id: JobId) {
        if !self.jobs.contains_key(&id) {
            self.order.push(id.clone());
            self.jobs.insert(id, Track { state: JobState::Created, attempt: 1, faults: Vec::new() });
        }
    }

    pub fn apply(&mut self, r: &TransitionRecord) {
        if !self.jobs.contains_key(&r.job) {
            self.add_job(r.job.clone());
        }
        let t = self.jobs.get_mut(&r.job).unwrap();
        if r.to == JobState::Queued && matches!(r.from, JobState::Failed | JobState::KilledWalltime) {
            t.attempt += 1;
        }
        if r.to.is_faulty() {
            match t.faults.last_mut() {
                Some(last) if last.0 == t.attempt => last.1 = r.to,
                _ => t.faults.push((t.attempt, r.to, r.ts, r.detail.clone())),
            }
        }
        t.state = r.to;
    }

    pub fn state(&self, id: &JobId) -> Option<JobState> {
        self.jobs.get(id).map(|t| t.state)
    }

    pub fn attempt(&self, id: &JobId) -> Option<u32> {
        self.jobs.get(id).map(|t| t.attempt)
    }

    pub fn summary(&self, run: &str) -> RunSummary {
        let mut counts = BTreeMap::new();
        let mut faulty = Vec::new();
        for id in &self.order {
            let t = &self.jobs[id];
            *counts.entry(t.state).or_insert(0) += 1;
            for (attempt, state, ts, detail) in &t.faults {
                faulty.push(FaultyAttempt {
                    job: id.clone(),
                    attempt: *attempt,
                    state: *state,
                    ts: *ts,
                    detail: detail.clone(),
                    final_state: t.state,
                });
            }
        }
        RunSummary { run: run.into(), total: self.order.len(), counts, faulty }
    }
}
