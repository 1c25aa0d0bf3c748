//! Run lifecycle inside the service: one driver thread per run, an event
//! log on disk, and recovery of unfinished runs when the service restarts.

use std::collections::BTreeMap;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use gatehub_core::driver::{ArtifactRecord, Backend, DriverError, RunDriver, SimBackend, Step};
use gatehub_core::resource::Site;
use gatehub_core::scheduler::{JobId, JobState, OutputSpec, Policy, QueueOccupancy, RunSummary, TransitionRecord};
use gatehub_core::sim::{BackendKind, SimCluster, SimConfig};
use gatehub_core::workflow::{expand_sweep, ExpandError, JobSet, SweepSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::stage_and_collect;
use crate::auth::random_hex;
use crate::local::{LocalBackend, LocalConfig};
use crate::store::{unix_now, RunRecord, RunStatus, Store, StoreError, TemplateRef};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("template {0} version {1} is not published")]
    Unpublished(String, u32),
    #[error(transparent)]
    Expand(#[from] ExpandError),
    #[error("invalid run id {0:?}")]
    BadRunId(String),
    #[error("run {0} already exists")]
    RunExists(String),
    #[error("invalid policy: {0}")]
    BadPolicy(&'static str),
    #[error("run {0} has already ended")]
    Ended(String),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error("re-execution diverged from the event log at line {0}")]
    Diverged(usize),
}

/// Body of a run submission.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CreateRun {
    pub template: TemplateRef,
    /// Replaces the template's own sweep when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub backend: Option<BackendKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Policy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

/// Listing entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBrief {
    pub id: String,
    pub template: TemplateRef,
    pub submitter: String,
    pub backend: BackendKind,
    pub status: RunStatus,
    pub created_at: u64,
    pub ended_at: Option<u64>,
    pub jobs: usize,
    pub counts: BTreeMap<JobState, usize>,
}

impl RunBrief {
    fn of(r: &RunRecord) -> Self {
        let summary = r.summary.clone().unwrap_or_else(|| RunSummary::from_jobs(&r.id, &r.jobs));
        RunBrief {
            id: r.id.clone(),
            template: r.template.clone(),
            submitter: r.submitter.clone(),
            backend: r.backend,
            status: r.status,
            created_at: r.created_at,
            ended_at: r.ended_at,
            jobs: r.jobs.len(),
            counts: summary.counts,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub sim_sites: Vec<Site>,
    pub local_sites: Vec<Site>,
    /// Real milliseconds per simulated minute; 0 runs simulations unpaced.
    pub sim_ms_per_minute: f64,
    /// Template for local runs; `root` is replaced by the store's run directory.
    pub local: LocalConfig,
}

struct Live {
    view: RwLock<RunRecord>,
    occupancy: RwLock<Vec<QueueOccupancy>>,
    cancel: Mutex<Sender<()>>,
}

struct Inner {
    store: Arc<Store>,
    cfg: ManagerConfig,
    live: Mutex<BTreeMap<String, Arc<Live>>>,
    idempotency: Mutex<BTreeMap<(String, String), String>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

#[derive(Clone)]
pub struct RunManager {
    inner: Arc<Inner>,
}

pub fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

impl RunManager {
    /// Starts the manager and resumes every run the store still lists as running.
    pub fn start(store: Arc<Store>, cfg: ManagerConfig) -> Result<Self, RunError> {
        let mgr = RunManager {
            inner: Arc::new(Inner {
                store,
                cfg,
                live: Mutex::new(BTreeMap::new()),
                idempotency: Mutex::new(BTreeMap::new()),
                threads: Mutex::new(Vec::new()),
            }),
        };
        for id in mgr.inner.store.run_ids()? {
            let record = mgr.inner.store.run(&id)?;
            if let Some(key) = &record.idempotency_key {
                mgr.inner.idempotency.lock().unwrap().insert((record.submitter.clone(), key.clone()), id.clone());
            }
            if record.status == RunStatus::Running {
                tracing::info!(run = %id, "resuming run");
                mgr.inner.store.repair_events(&id)?;
                mgr.launch(record, true)?;
            }
        }
        Ok(mgr)
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.inner.store
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.inner.cfg
    }

    /// Creates and starts a run. A repeated idempotency key from the same
    /// user returns the existing run and `false`.
    pub fn create(&self, user: &str, req: CreateRun, key: Option<&str>) -> Result<(RunRecord, bool), RunError> {
        if let Some(key) = key {
            let existing = self.inner.idempotency.lock().unwrap().get(&(user.to_string(), key.to_string())).cloned();
            if let Some(id) = existing {
                return Ok((self.get(&id)?, false));
            }
        }
        let entry = self.inner.store.template(&req.template.name, req.template.version)?;
        if !entry.published && entry.owner != user {
            return Err(RunError::Unpublished(entry.name, entry.version));
        }
        let policy = req.policy.unwrap_or_default();
        policy.validate().map_err(RunError::BadPolicy)?;
        let id = match req.run_id {
            Some(id) if !valid_run_id(&id) => return Err(RunError::BadRunId(id)),
            Some(id) => id,
            None => format!("run-{}", random_hex(6)),
        };
        if self.inner.store.run(&id).is_ok() {
            return Err(RunError::RunExists(id));
        }
        let sweep = req.sweep.unwrap_or_else(|| entry.workflow.sweep.clone());
        let workflow = entry.workflow.with_sweep(sweep.clone()).map_err(ExpandError::from)?;
        let set = expand_sweep(&workflow, &id)?;
        let backend = req.backend.unwrap_or(BackendKind::Sim);
        let (sites, sim) = match backend {
            BackendKind::Sim => {
                let mut sim = req.sim.unwrap_or_default();
                sim.seed = req.seed.or(req.sim.map(|s| s.seed)).unwrap_or_else(rand::random);
                (self.inner.cfg.sim_sites.clone(), Some(sim))
            }
            BackendKind::Local => (self.inner.cfg.local_sites.clone(), None),
        };
        let record = RunRecord {
            id: id.clone(),
            template: req.template,
            sweep,
            submitter: user.into(),
            backend,
            sim,
            policy,
            sites,
            idempotency_key: key.map(Into::into),
            created_at: unix_now(),
            ended_at: None,
            status: RunStatus::Running,
            error: None,
            jobs: set.jobs,
            summary: None,
            artifacts: Vec::new(),
        };
        self.inner.store.save_run(&record)?;
        if let Some(key) = key {
            self.inner.idempotency.lock().unwrap().insert((user.into(), key.into()), id.clone());
        }
        self.launch(record.clone(), false)?;
        Ok((record, true))
    }

    fn launch(&self, record: RunRecord, resume: bool) -> Result<(), RunError> {
        let entry = self.inner.store.template(&record.template.name, record.template.version)?;
        let workflow = entry.workflow.with_sweep(record.sweep.clone()).map_err(ExpandError::from)?;
        let set = expand_sweep(&workflow, &record.id)?;
        let replay = if resume { self.inner.store.read_events(&record.id)? } else { Vec::new() };
        let (tx, rx) = mpsc::channel();
        let live = Arc::new(Live {
            view: RwLock::new(record.clone()),
            occupancy: RwLock::new(Vec::new()),
            cancel: Mutex::new(tx),
        });
        self.inner.live.lock().unwrap().insert(record.id.clone(), live.clone());
        let inner = self.inner.clone();
        let handle = thread::Builder::new()
            .name(format!("run-{}", record.id))
            .spawn(move || {
                let id = record.id.clone();
                let result = run_actor(&inner, &live, record, set, replay, rx);
                if let Err(e) = result {
                    tracing::error!(run = %id, error = %e, "run ended with an error");
                }
                inner.live.lock().unwrap().remove(&id);
            })
            .expect("thread spawns");
        self.inner.threads.lock().unwrap().push(handle);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<RunRecord, RunError> {
        if let Some(live) = self.inner.live.lock().unwrap().get(id) {
            return Ok(live.view.read().unwrap().clone());
        }
        Ok(self.inner.store.run(id)?)
    }

    pub fn list(&self) -> Result<Vec<RunBrief>, RunError> {
        let ids = self.inner.store.run_ids()?;
        ids.iter().map(|id| self.get(id).map(|r| RunBrief::of(&r))).collect()
    }

    pub fn events(&self, id: &str) -> Result<Vec<TransitionRecord>, RunError> {
        self.get(id)?;
        Ok(self.inner.store.read_events(id)?)
    }

    pub fn cancel(&self, id: &str) -> Result<(), RunError> {
        let live = self.inner.live.lock().unwrap().get(id).cloned();
        match live {
            Some(live) => {
                let _ = live.cancel.lock().unwrap().send(());
                Ok(())
            }
            None => {
                self.inner.store.run(id)?;
                Err(RunError::Ended(id.into()))
            }
        }
    }

    /// Blocks until the run leaves the running state or the timeout passes.
    pub fn wait(&self, id: &str, timeout: Duration) -> Result<RunRecord, RunError> {
        let until = std::time::Instant::now() + timeout;
        loop {
            let r = self.get(id)?;
            if r.status != RunStatus::Running || std::time::Instant::now() >= until {
                return Ok(r);
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    /// Load per queue summed over all active runs. Each run has its own
    /// executor, so cores in use add up.
    pub fn occupancy(&self) -> Vec<QueueOccupancy> {
        let live: Vec<Arc<Live>> = self.inner.live.lock().unwrap().values().cloned().collect();
        let mut sites: BTreeMap<String, u32> = BTreeMap::new();
        for s in self.inner.cfg.sim_sites.iter().chain(&self.inner.cfg.local_sites) {
            sites.entry(s.name.clone()).or_insert(s.total_cores);
        }
        let mut out: Vec<QueueOccupancy> = self
            .inner
            .cfg
            .sim_sites
            .iter()
            .chain(&self.inner.cfg.local_sites)
            .flat_map(|s| s.queues.iter().map(move |q| QueueOccupancy::idle(s, q)))
            .collect();
        out.dedup_by(|a, b| a.site == b.site && a.queue == b.queue);
        let mut busy: BTreeMap<String, u32> = BTreeMap::new();
        for l in live {
            let entries = l.occupancy.read().unwrap().clone();
            let mut seen_site: Vec<String> = Vec::new();
            for e in entries {
                if !seen_site.contains(&e.site) {
                    let total = sites.get(&e.site).copied().unwrap_or(e.idle_cores);
                    *busy.entry(e.site.clone()).or_default() += total.saturating_sub(e.idle_cores);
                    seen_site.push(e.site.clone());
                }
                if let Some(slot) = out.iter_mut().find(|o| o.site == e.site && o.queue == e.queue) {
                    slot.queued_jobs += e.queued_jobs;
                    slot.running_jobs += e.running_jobs;
                    slot.queued_cores += e.queued_cores;
                    for (u, c) in e.user_cores {
                        *slot.user_cores.entry(u).or_default() += c;
                    }
                }
            }
        }
        for o in &mut out {
            let total = sites.get(&o.site).copied().unwrap_or(0);
            o.idle_cores = total.saturating_sub(busy.get(&o.site).copied().unwrap_or(0));
        }
        out
    }

    /// Waits for every run thread to exit (runs must have ended).
    pub fn join_all(&self) {
        let handles: Vec<JoinHandle<()>> = self.inner.threads.lock().unwrap().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }
}

enum Stop {
    Done,
    Cancelled,
}

fn outputs_of(set: &JobSet) -> BTreeMap<JobId, Vec<OutputSpec>> {
    set.jobs.iter().map(|j| (j.id.clone(), j.spec.outputs.clone())).collect()
}

fn run_actor(
    inner: &Inner,
    live: &Live,
    record: RunRecord,
    set: JobSet,
    replay: Vec<TransitionRecord>,
    cancel: Receiver<()>,
) -> Result<(), RunError> {
    let sites = record.sites.clone();
    let policy = record.policy;
    let outcome = match record.backend {
        BackendKind::Sim => {
            let cluster = SimCluster::new(sites.clone(), record.sim.unwrap_or_else(|| SimConfig::exact(0)));
            let driver = RunDriver::new(set, sites, policy, SimBackend::new(cluster));
            let pace = inner.cfg.sim_ms_per_minute;
            Actor { inner, live, cancel, stop: false, recovered: Vec::new() }.drive(driver, replay, pace)
        }
        BackendKind::Local => {
            let mut cfg = inner.cfg.local.clone();
            cfg.root = inner.store.runs_dir();
            let offset = replay.last().map_or(0, |r| r.ts);
            let desk = cfg.desk_scale;
            let backend = LocalBackend::new(cfg, &record.id, sites.clone(), outputs_of(&set)).with_clock_offset(offset);
            let mut driver = RunDriver::new(set, sites, policy, backend);
            let mut actor = Actor { inner, live, cancel, stop: false, recovered: Vec::new() };
            if replay.is_empty() {
                actor.drive(driver, Vec::new(), 0.0)
            } else {
                match driver.restore(&replay) {
                    Ok(fresh) => {
                        for j in driver.jobs().iter().filter(|j| j.state == JobState::Finished) {
                            let dir = driver.backend().job_dir(&j.id).join("outputs");
                            if let Ok(arts) = stage_and_collect(&j.id, &j.spec.outputs, &dir, desk) {
                                actor.recovered.extend(arts);
                            }
                        }
                        actor.publish(&driver, &fresh)?;
                        actor.drive(driver, Vec::new(), 0.0)
                    }
                    Err(e) => Err(e.into()),
                }
            }
        }
    };
    let mut view = live.view.read().unwrap().clone();
    view.ended_at = Some(unix_now());
    match outcome {
        Ok(Stop::Done) => view.status = RunStatus::Completed,
        Ok(Stop::Cancelled) => view.status = RunStatus::Cancelled,
        Err(e) => {
            view.status = RunStatus::Failed;
            view.error = Some(e.to_string());
        }
    }
    inner.store.save_run(&view)?;
    *live.view.write().unwrap() = view;
    Ok(())
}

struct Actor<'a> {
    inner: &'a Inner,
    live: &'a Live,
    cancel: Receiver<()>,
    stop: bool,
    recovered: Vec<ArtifactRecord>,
}

impl Actor<'_> {
    fn cancelled(&mut self) -> bool {
        self.stop |= self.cancel.try_recv().is_ok();
        self.stop
    }

    fn publish<B: Backend>(&self, driver: &RunDriver<B>, records: &[TransitionRecord]) -> Result<(), StoreError> {
        let id = driver.run_id().to_string();
        self.inner.store.append_events(&id, records)?;
        let occupancy: Vec<QueueOccupancy> = {
            let view = self.live.view.read().unwrap();
            view.sites.iter().filter_map(|s| driver.backend().probe(s)).flatten().collect()
        };
        *self.live.occupancy.write().unwrap() = occupancy;
        let mut view = self.live.view.write().unwrap();
        view.jobs = driver.jobs().to_vec();
        view.summary = Some(driver.summary());
        view.artifacts = self.recovered.iter().chain(driver.artifacts()).cloned().collect();
        Ok(())
    }

    /// Sleeps `ms` in slices, returning early when a cancel arrives.
    fn pause(&mut self, ms: f64) -> bool {
        let mut left = ms;
        while left > 0.0 {
            let slice = left.min(25.0);
            thread::sleep(Duration::from_secs_f64(slice / 1000.0));
            left -= slice;
            if self.cancelled() {
                return true;
            }
        }
        false
    }

    fn drive<B: Backend>(
        &mut self,
        mut driver: RunDriver<B>,
        replay: Vec<TransitionRecord>,
        ms_per_minute: f64,
    ) -> Result<Stop, RunError> {
        // Deterministic backends re-execute the logged prefix silently.
        let mut matched = 0;
        let mut last_ts = replay.last().map_or(0, |r| r.ts);
        loop {
            if matched == replay.len() && self.cancelled() {
                let records = driver.cancel("cancelled by user");
                self.publish(&driver, &records)?;
                return Ok(Stop::Cancelled);
            }
            let step = match driver.step() {
                Ok(s) => s,
                Err(e) => {
                    self.publish(&driver, &[])?;
                    return Err(e.into());
                }
            };
            match step {
                Step::Done => {
                    if matched < replay.len() {
                        return Err(RunError::Diverged(matched + 1));
                    }
                    self.publish(&driver, &[])?;
                    return Ok(Stop::Done);
                }
                Step::Waiting => {
                    if self.pause(self.inner.cfg.local.tick.as_secs_f64() * 1000.0) {
                        continue;
                    }
                }
                Step::Progress(records) => {
                    let mut fresh = records.as_slice();
                    if matched < replay.len() {
                        let n = fresh.len().min(replay.len() - matched);
                        if fresh[..n] != replay[matched..matched + n] {
                            return Err(RunError::Diverged(matched + 1));
                        }
                        matched += n;
                        fresh = &fresh[n..];
                        if fresh.is_empty() {
                            if matched == replay.len() {
                                self.publish(&driver, &[])?;
                            }
                            continue;
                        }
                    }
                    let ts = fresh.last().map_or(last_ts, |r| r.ts);
                    if ms_per_minute > 0.0 && ts > last_ts {
                        self.pause((ts - last_ts) as f64 / 60.0 * ms_per_minute);
                    }
                    last_ts = last_ts.max(ts);
                    self.publish(&driver, fresh)?;
                }
            }
        }
    }
}
