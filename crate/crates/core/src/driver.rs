//! Drives a job set to completion against an executor backend.
//!
//! The driver owns the jobs and reacts to backend events one timestamp batch
//! at a time, so pacing (an offline loop or a service thread) never changes
//! the outcome.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resource::{QueueRef, Site};
use crate::scheduler::{
    escalate, on_job_event, plan, poll, Action, Assignment, IllegalTransition, Job, JobEvent, JobId, JobState,
    OccupancyProbe, OccupancySnapshot, OutputSpec, Policy, QueueOccupancy, RunSummary, TransitionRecord,
    UnschedulableReason,
};
use crate::sim::{ExecutorHandle, SimCluster, SimConfig, SimEvent, SimEventKind, SimSubmission};
use crate::workflow::{classify_size, DataClass, JobSet, DESK_SCALE};

/// An output file produced by a finished job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub job: JobId,
    pub port: String,
    pub path: String,
    pub bytes: u64,
    pub data_class: DataClass,
    pub within_expected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendEvent {
    pub ts: u64,
    pub job: JobId,
    pub event: JobEvent,
    pub detail: String,
    /// Collected outputs; only read on the final successful exit.
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendStatus {
    Events(Vec<BackendEvent>),
    /// Work is in flight but nothing has happened yet.
    Busy,
    /// Nothing queued or running.
    Idle,
}

/// One segment of one attempt, ready to launch.
#[derive(Debug, Clone, Copy)]
pub struct Submission<'a> {
    pub job: &'a Job,
    pub queue: &'a QueueRef,
    pub segment: u32,
    pub segments: u32,
    /// Minutes of real work in this segment.
    pub work: f64,
}

pub trait Backend: OccupancyProbe {
    fn now(&self) -> u64;
    fn submit(&mut self, sub: &Submission<'_>) -> Result<ExecutorHandle, String>;
    fn cancel(&mut self, job: &JobId);
    fn next_events(&mut self) -> BackendStatus;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DriverError {
    #[error(transparent)]
    Illegal(#[from] IllegalTransition),
    #[error("run stalled with unfinished jobs: {0:?}")]
    Stalled(Vec<JobId>),
    #[error("event log line {line}: {reason}")]
    Restore { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    /// Records appended by this step (possibly none).
    Progress(Vec<TransitionRecord>),
    Waiting,
    Done,
}

pub struct RunDriver<B> {
    run_id: String,
    jobs: Vec<Job>,
    index: BTreeMap<JobId, usize>,
    downstream: BTreeMap<JobId, Vec<JobId>>,
    sites: Vec<Site>,
    policy: Policy,
    backend: B,
    snapshot: Option<OccupancySnapshot>,
    log: Vec<TransitionRecord>,
    artifacts: Vec<ArtifactRecord>,
    started: bool,
}

impl<B: Backend> RunDriver<B> {
    pub fn new(set: JobSet, sites: Vec<Site>, policy: Policy, backend: B) -> Self {
        let mut jobs = set.jobs;
        let mut index = BTreeMap::new();
        let mut downstream: BTreeMap<JobId, Vec<JobId>> = BTreeMap::new();
        for (i, j) in jobs.iter_mut().enumerate() {
            j.max_attempts = policy.max_attempts;
            index.insert(j.id.clone(), i);
            for d in &j.depends_on {
                downstream.entry(d.clone()).or_default().push(j.id.clone());
            }
        }
        RunDriver {
            run_id: set.run_id,
            jobs,
            index,
            downstream,
            sites,
            policy,
            backend,
            snapshot: None,
            log: Vec::new(),
            artifacts: Vec::new(),
            started: false,
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn jobs(&self) -> &[Job] {
        &self.jobs
    }

    pub fn job(&self, id: &JobId) -> Option<&Job> {
        self.index.get(id).map(|&i| &self.jobs[i])
    }

    pub fn log(&self) -> &[TransitionRecord] {
        &self.log
    }

    pub fn artifacts(&self) -> &[ArtifactRecord] {
        &self.artifacts
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut B {
        &mut self.backend
    }

    pub fn into_backend(self) -> B {
        self.backend
    }

    pub fn snapshot(&self) -> Option<&OccupancySnapshot> {
        self.snapshot.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.jobs.iter().all(|j| j.state.is_absorbing())
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary::from_jobs(&self.run_id, &self.jobs)
    }

    /// Advances the run by one batch of backend events.
    pub fn step(&mut self) -> Result<Step, DriverError> {
        let mark = self.log.len();
        if !self.started {
            self.started = true;
            let now = self.backend.now();
            self.schedule(now)?;
            return Ok(Step::Progress(self.log[mark..].to_vec()));
        }
        if self.is_done() {
            return Ok(Step::Done);
        }
        match self.backend.next_events() {
            BackendStatus::Events(events) => {
                for e in events {
                    self.handle(e)?;
                }
                let now = self.backend.now();
                self.schedule(now)?;
            }
            BackendStatus::Busy => return Ok(Step::Waiting),
            BackendStatus::Idle => {
                let now = self.backend.now();
                self.schedule(now)?;
                if self.log.len() == mark {
                    if self.is_done() {
                        return Ok(Step::Done);
                    }
                    let stuck = self.jobs.iter().filter(|j| !j.state.is_absorbing()).map(|j| j.id.clone()).collect();
                    return Err(DriverError::Stalled(stuck));
                }
            }
        }
        Ok(Step::Progress(self.log[mark..].to_vec()))
    }

    /// Steps until every job is in an absorbing state.
    pub fn run_to_end(&mut self) -> Result<(), DriverError> {
        while self.step()? != Step::Done {}
        Ok(())
    }

    /// Cancels every unfinished job.
    pub fn cancel(&mut self, detail: &str) -> Vec<TransitionRecord> {
        let mark = self.log.len();
        let ts = self.backend.now();
        self.started = true;
        for i in 0..self.jobs.len() {
            let state = self.jobs[i].state;
            if state.is_absorbing() {
                continue;
            }
            if matches!(state, JobState::Queued | JobState::Running) {
                self.backend.cancel(&self.jobs[i].id);
            }
            let r = self.jobs[i].cancel(ts, detail).expect("non-absorbing job cancels");
            self.log.push(r);
        }
        self.log[mark..].to_vec()
    }

    /// Rebuilds job state from a previously written event log. Jobs that were
    /// queued or running are reported lost, since their executor is gone, and
    /// go through the normal retry path.
    pub fn restore(&mut self, records: &[TransitionRecord]) -> Result<Vec<TransitionRecord>, DriverError> {
        for (n, r) in records.iter().enumerate() {
            let line = n + 1;
            let fail = |reason: String| DriverError::Restore { line, reason };
            let &i = self.index.get(&r.job).ok_or_else(|| fail(format!("unknown job {}", r.job)))?;
            let job = &mut self.jobs[i];
            if job.state != r.from {
                return Err(fail(format!("job {} is {}, record says {}", job.id, job.state, r.from)));
            }
            if r.to == JobState::Queued {
                if matches!(r.from, JobState::Failed | JobState::KilledWalltime) {
                    job.attempt += 1;
                }
                if r.from == JobState::KilledWalltime {
                    job.estimate = job.estimate.inflate(self.policy.inflation);
                }
                let (queue, segment, segments) =
                    parse_queued(&r.detail).ok_or_else(|| fail(format!("bad queued detail {:?}", r.detail)))?;
                let segment_runtime = job.estimate.runtime / f64::from(segments);
                job.assignment = Some(Assignment { job: job.id.clone(), queue, segments, segment_runtime });
                job.segment = segment;
            }
            if !crate::scheduler::is_legal(r.from, r.to) {
                return Err(fail(format!("{} -> {} is not a lifecycle edge", r.from, r.to)));
            }
            job.transition(r.to, r.ts, r.detail.clone());
            self.log.push(r.clone());
        }
        self.started = true;
        let mark = self.log.len();
        let ts = self.backend.now().max(records.last().map_or(0, |r| r.ts));
        for i in 0..self.jobs.len() {
            if matches!(self.jobs[i].state, JobState::Queued | JobState::Running) {
                let job = self.jobs[i].id.clone();
                self.handle(BackendEvent {
                    ts,
                    job,
                    event: JobEvent::Lost,
                    detail: "lost in service restart".into(),
                    artifacts: Vec::new(),
                })?;
            }
        }
        self.schedule(ts)?;
        Ok(self.log[mark..].to_vec())
    }

    fn handle(&mut self, e: BackendEvent) -> Result<(), DriverError> {
        let Some(&i) = self.index.get(&e.job) else { return Ok(()) };
        if self.jobs[i].state.is_absorbing() {
            return Ok(());
        }
        let out = on_job_event(&mut self.jobs[i], &e.event, &self.policy, e.ts, &e.detail)?;
        self.log.extend(out.transitions);
        if out.state == JobState::Finished {
            self.artifacts.extend(e.artifacts);
        }
        for action in out.actions {
            self.act(i, action, e.ts)?;
        }
        Ok(())
    }

    fn act(&mut self, i: usize, action: Action, ts: u64) -> Result<(), DriverError> {
        match action {
            Action::Resubmit { .. } => {
                let out = on_job_event(&mut self.jobs[i], &JobEvent::Queued, &self.policy, ts, "")?;
                self.log.extend(out.transitions);
                self.submit(i, ts)
            }
            Action::Replan { estimate, after } => {
                self.jobs[i].estimate = estimate;
                let snapshot = poll(&self.sites, &self.backend, self.snapshot.as_ref(), ts);
                let next = escalate(&self.jobs[i], &after, &self.sites, &snapshot, &self.policy);
                self.snapshot = Some(snapshot);
                match next {
                    Some(a) => {
                        let job = &mut self.jobs[i];
                        job.assignment = Some(a);
                        job.segment = 1;
                        let out = on_job_event(job, &JobEvent::Queued, &self.policy, ts, "")?;
                        self.log.extend(out.transitions);
                        self.submit(i, ts)
                    }
                    None => {
                        let detail = format!("no queue with a longer walltime than {after}");
                        let r = self.jobs[i].transition(JobState::TerminallyFailed, ts, detail);
                        self.log.push(r);
                        self.cascade(i, ts);
                        Ok(())
                    }
                }
            }
            Action::SubmitSegment { .. } => self.submit(i, ts),
            Action::CancelDownstream => {
                self.cascade(i, ts);
                Ok(())
            }
        }
    }

    fn submit(&mut self, i: usize, ts: u64) -> Result<(), DriverError> {
        let job = &self.jobs[i];
        let a = job.assignment.as_ref().expect("queued job has assignment");
        let sub = Submission {
            job,
            queue: &a.queue,
            segment: job.segment,
            segments: a.segments,
            work: job.base_estimate.runtime / f64::from(a.segments),
        };
        match self.backend.submit(&sub) {
            Ok(_) => Ok(()),
            Err(reason) => {
                let job = job.id.clone();
                self.handle(BackendEvent {
                    ts,
                    job,
                    event: JobEvent::Lost,
                    detail: format!("submit failed: {reason}"),
                    artifacts: Vec::new(),
                })
            }
        }
    }

    /// Cancels everything downstream of job `i`.
    fn cascade(&mut self, i: usize, ts: u64) {
        let origin = self.jobs[i].id.clone();
        let mut todo: VecDeque<JobId> = self.downstream.get(&origin).cloned().unwrap_or_default().into();
        while let Some(id) = todo.pop_front() {
            let k = self.index[&id];
            if self.jobs[k].state.is_absorbing() {
                continue;
            }
            if matches!(self.jobs[k].state, JobState::Queued | JobState::Running) {
                self.backend.cancel(&id);
            }
            let r = self.jobs[k].cancel(ts, &format!("upstream {origin} failed")).expect("non-absorbing");
            self.log.push(r);
            todo.extend(self.downstream.get(&id).cloned().unwrap_or_default());
        }
    }

    fn schedule(&mut self, now: u64) -> Result<(), DriverError> {
        for i in 0..self.jobs.len() {
            let j = &self.jobs[i];
            if j.state == JobState::Created
                && j.depends_on.iter().all(|d| self.index.get(d).is_some_and(|&k| self.jobs[k].state == JobState::Finished))
            {
                let r = self.jobs[i].release(now)?;
                self.log.push(r);
            }
        }
        let eligible: Vec<usize> = (0..self.jobs.len()).filter(|&i| self.jobs[i].state == JobState::Eligible).collect();
        if eligible.is_empty() {
            return Ok(());
        }
        let snapshot = poll(&self.sites, &self.backend, self.snapshot.as_ref(), now);
        let refs: Vec<&Job> = eligible.iter().map(|&i| &self.jobs[i]).collect();
        let placed = plan(&refs, &snapshot, &self.sites, &self.policy);
        self.snapshot = Some(snapshot);
        for a in placed.assignments {
            let i = self.index[&a.job];
            let job = &mut self.jobs[i];
            job.assignment = Some(a);
            job.segment = 1;
            let out = on_job_event(job, &JobEvent::Queued, &self.policy, now, "")?;
            self.log.extend(out.transitions);
            self.submit(i, now)?;
        }
        for u in placed.unschedulable {
            let i = self.index[&u.job];
            let detail = match u.reason {
                UnschedulableReason::NoQueue => "no queue admits the job's cores",
                UnschedulableReason::NotCheckpointable => "no walltime fits and the component cannot checkpoint",
            };
            let r = self.jobs[i].reject(now, detail)?;
            self.log.push(r);
            self.cascade(i, now);
        }
        Ok(())
    }
}

/// Parses `queue=<site>/<queue> segment=<k>/<n>`.
pub fn parse_queued(detail: &str) -> Option<(QueueRef, u32, u32)> {
    let mut queue = None;
    let mut seg = None;
    for part in detail.split_whitespace() {
        if let Some(q) = part.strip_prefix("queue=") {
            queue = QueueRef::parse(q);
        } else if let Some(s) = part.strip_prefix("segment=") {
            let (k, n) = s.split_once('/')?;
            seg = Some((k.parse().ok()?, n.parse().ok()?));
        }
    }
    let (k, n) = seg?;
    (k >= 1 && k <= n).then_some((queue?, k, n))
}

/// Backend over a [`SimCluster`]. Finished jobs get synthetic outputs sized
/// at the class's nominal size times the desk scale.
#[derive(Debug, Clone)]
pub struct SimBackend {
    cluster: SimCluster,
    outputs: BTreeMap<JobId, Vec<OutputSpec>>,
    segments: BTreeMap<JobId, u32>,
    trace: Vec<SimEvent>,
    pub desk_scale: f64,
}

impl SimBackend {
    pub fn new(cluster: SimCluster) -> Self {
        SimBackend {
            cluster,
            outputs: BTreeMap::new(),
            segments: BTreeMap::new(),
            trace: Vec::new(),
            desk_scale: DESK_SCALE,
        }
    }

    pub fn cluster(&self) -> &SimCluster {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut SimCluster {
        &mut self.cluster
    }

    /// Every start and end the cluster reported, in order.
    pub fn trace(&self) -> &[SimEvent] {
        &self.trace
    }

    fn convert(&self, e: &SimEvent) -> BackendEvent {
        let (event, detail) = match e.kind {
            SimEventKind::Started => (JobEvent::Started, format!("on {}/{}", e.site, e.queue)),
            SimEventKind::Exited { code } => (JobEvent::Exited { code }, String::new()),
            SimEventKind::WalltimeKilled => (JobEvent::WalltimeKilled, String::new()),
        };
        let last = self.segments.get(&e.job).copied().unwrap_or(1) == e.segment;
        let artifacts = if matches!(e.kind, SimEventKind::Exited { code: 0 }) && last {
            self.outputs
                .get(&e.job)
                .map(|outs| {
                    outs.iter()
                        .map(|o| {
                            let bytes = (o.data_class.nominal_bytes() as f64 * self.desk_scale) as u64;
                            let report = classify_size(bytes, o.data_class, self.desk_scale);
                            ArtifactRecord {
                                job: e.job.clone(),
                                port: o.port.clone(),
                                path: format!("sim://{}/{}", e.job, o.file),
                                bytes,
                                data_class: o.data_class,
                                within_expected: report.within_expected,
                            }
                        })
                        .collect()
                })
                .unwrap_or_default()
        } else {
            Vec::new()
        };
        BackendEvent { ts: e.ts, job: e.job.clone(), event, detail, artifacts }
    }
}

impl OccupancyProbe for SimBackend {
    fn probe(&self, site: &Site) -> Option<Vec<QueueOccupancy>> {
        self.cluster.probe(site)
    }
}

impl Backend for SimBackend {
    fn now(&self) -> u64 {
        self.cluster.clock()
    }

    fn submit(&mut self, sub: &Submission<'_>) -> Result<ExecutorHandle, String> {
        let job = sub.job;
        let handle = self
            .cluster
            .submit(SimSubmission {
                job: job.id.clone(),
                attempt: job.attempt,
                segment: sub.segment,
                user: job.user.clone(),
                cores: job.estimate.cores,
                runtime: sub.work,
                queue: sub.queue.clone(),
            })
            .map_err(|e| e.to_string())?;
        self.outputs.insert(job.id.clone(), job.spec.outputs.clone());
        self.segments.insert(job.id.clone(), sub.segments);
        Ok(handle)
    }

    fn cancel(&mut self, job: &JobId) {
        self.cluster.cancel(job);
    }

    fn next_events(&mut self) -> BackendStatus {
        if self.cluster.is_idle() {
            return BackendStatus::Idle;
        }
        let events = self.cluster.step();
        if events.is_empty() {
            return BackendStatus::Busy;
        }
        let out = events.iter().map(|e| self.convert(e)).collect();
        self.trace.extend(events);
        BackendStatus::Events(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub records: Vec<TransitionRecord>,
    pub summary: RunSummary,
    pub artifacts: Vec<ArtifactRecord>,
    pub trace: Vec<SimEvent>,
    /// Simulated seconds until the last event.
    pub makespan: u64,
}

/// Runs a job set on a fresh simulated cluster built from `sites`.
pub fn simulate(set: JobSet, sites: Vec<Site>, policy: Policy, config: SimConfig) -> Result<SimOutcome, DriverError> {
    let backend = SimBackend::new(SimCluster::new(sites.clone(), config));
    let mut driver = RunDriver::new(set, sites, policy, backend);
    driver.run_to_end()?;
    let summary = driver.summary();
    let makespan = driver.log.last().map_or(0, |r| r.ts);
    let RunDriver { log, artifacts, backend, .. } = driver;
    Ok(SimOutcome { records: log, summary, artifacts, trace: backend.trace, makespan })
}
