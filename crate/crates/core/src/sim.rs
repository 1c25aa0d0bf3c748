//! Deterministic discrete-event model of batch clusters.
//!
//! Each site owns a pool of cores shared by its queues. Jobs wait in one
//! FIFO per site (queue order preserved), start when the site has free cores
//! and the user is under the queue's per-user cap, and end by completing,
//! failing (injected) or hitting the queue walltime. Time is counted in
//! whole simulated seconds.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::resource::{QueueRef, Site};
use crate::scheduler::{JobId, OccupancyProbe, QueueOccupancy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    /// σ of the lognormal runtime noise (median 1).
    pub sigma: f64,
    /// Probability that a job attempt crashes partway through.
    pub failure_rate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { seed: 0, sigma: 0.1, failure_rate: 0.0 }
    }
}

impl SimConfig {
    pub fn exact(seed: u64) -> Self {
        SimConfig { seed, sigma: 0.0, failure_rate: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Local,
    Sim,
}

/// Live handle for one submitted job attempt (or segment).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorHandle {
    pub job: JobId,
    pub backend: BackendKind,
    /// Process id for local jobs, submission sequence number for simulated ones.
    pub external_ref: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSubmission {
    pub job: JobId,
    pub attempt: u32,
    pub segment: u32,
    pub user: String,
    pub cores: u32,
    /// Estimated minutes; the true runtime is drawn around it.
    pub runtime: f64,
    pub queue: QueueRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("unknown queue {0}")]
    UnknownQueue(QueueRef),
    #[error("job {job} needs {cores} cores, more than {queue} can ever give one user")]
    Oversized { job: JobId, cores: u32, queue: QueueRef },
    #[error("job {0} already has a live submission")]
    AlreadySubmitted(JobId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimEventKind {
    Started,
    Exited { code: i32 },
    WalltimeKilled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub ts: u64,
    pub job: JobId,
    pub attempt: u32,
    pub segment: u32,
    pub site: String,
    pub queue: String,
    pub user: String,
    pub cores: u32,
    #[serde(flatten)]
    pub kind: SimEventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Exit(i32),
    Killed,
}

#[derive(Debug, Clone)]
struct Pending {
    seq: u64,
    sub: SimSubmission,
    site: usize,
    queue: usize,
    true_secs: u64,
    fail_at: Option<u64>,
}

#[derive(Debug, Clone)]
struct Active {
    pending: Pending,
    start: u64,
    end: u64,
    outcome: Outcome,
}

#[derive(Debug, Clone)]
pub struct SimCluster {
    config: SimConfig,
    sites: Vec<Site>,
    free: Vec<u32>,
    usage: BTreeMap<(usize, usize, String), u32>,
    clock: u64,
    seq: u64,
    waiting: Vec<Pending>,
    running: Vec<Active>,
    unreachable: BTreeSet<String>,
}

impl SimCluster {
    pub fn new(sites: Vec<Site>, config: SimConfig) -> Self {
        let free = sites.iter().map(|s| s.total_cores).collect();
        SimCluster {
            config,
            sites,
            free,
            usage: BTreeMap::new(),
            clock: 0,
            seq: 0,
            waiting: Vec::new(),
            running: Vec::new(),
            unreachable: BTreeSet::new(),
        }
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn is_idle(&self) -> bool {
        self.waiting.is_empty() && self.running.is_empty()
    }

    /// Marks a site as (un)reachable for occupancy probes.
    pub fn set_reachable(&mut self, site: &str, reachable: bool) {
        if reachable {
            self.unreachable.remove(site);
        } else {
            self.unreachable.insert(site.into());
        }
    }

    fn locate(&self, at: &QueueRef) -> Option<(usize, usize)> {
        let s = self.sites.iter().position(|s| s.name == at.site)?;
        let q = self.sites[s].queues.iter().position(|q| q.name == at.queue)?;
        Some((s, q))
    }

    fn rng_for(&self, sub: &SimSubmission) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        h.update(sub.job.as_str().as_bytes());
        h.update(sub.attempt.to_le_bytes());
        h.update(sub.segment.to_le_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }

    /// Enqueues a job. Its true runtime is `estimate × lognormal(σ)` and, with
    /// probability `failure_rate`, it crashes at a uniform point of that runtime.
    pub fn submit(&mut self, sub: SimSubmission) -> Result<ExecutorHandle, SimError> {
        let (site, queue) = self.locate(&sub.queue).ok_or_else(|| SimError::UnknownQueue(sub.queue.clone()))?;
        let q = &self.sites[site].queues[queue];
        if sub.cores > q.cores_per_user || sub.cores > self.sites[site].total_cores {
            return Err(SimError::Oversized { job: sub.job.clone(), cores: sub.cores, queue: sub.queue.clone() });
        }
        if self.waiting.iter().any(|p| p.sub.job == sub.job) || self.running.iter().any(|a| a.pending.sub.job == sub.job) {
            return Err(SimError::AlreadySubmitted(sub.job.clone()));
        }
        let mut rng = self.rng_for(&sub);
        let z: f64 = StandardNormal.sample(&mut rng);
        let factor = libm::exp(self.config.sigma * z);
        let true_secs = (libm::round(sub.runtime * 60.0 * factor) as u64).max(1);
        let u: f64 = Open01.sample(&mut rng);
        let fail_at = if u < self.config.failure_rate {
            let v: f64 = Open01.sample(&mut rng);
            Some(((v * true_secs as f64) as u64).clamp(1, true_secs))
        } else {
            None
        };
        self.seq += 1;
        let handle = ExecutorHandle { job: sub.job.clone(), backend: BackendKind::Sim, external_ref: self.seq };
        self.waiting.push(Pending { seq: self.seq, sub, site, queue, true_secs, fail_at });
        Ok(handle)
    }

    /// Removes a waiting or running job; returns whether it was found.
    pub fn cancel(&mut self, job: &JobId) -> bool {
        if let Some(i) = self.waiting.iter().position(|p| &p.sub.job == job) {
            self.waiting.remove(i);
            return true;
        }
        if let Some(i) = self.running.iter().position(|a| &a.pending.sub.job == job) {
            let a = self.running.remove(i);
            self.release(&a.pending);
            return true;
        }
        false
    }

    fn usage_key(p: &Pending) -> (usize, usize, String) {
        (p.site, p.queue, p.sub.user.clone())
    }

    fn release(&mut self, p: &Pending) {
        self.free[p.site] += p.sub.cores;
        let key = Self::usage_key(p);
        let used = self.usage.get_mut(&key).expect("running job holds usage");
        *used -= p.sub.cores;
        if *used == 0 {
            self.usage.remove(&key);
        }
    }

    /// Indices into `waiting` that can start now, in start order. Per site,
    /// waiting jobs are scanned in submission order; a user at a queue's cap
    /// is skipped for the rest of the scan (keeping that user's order), and
    /// the scan stops at the first job the site has no cores for.
    fn startable(&self) -> Vec<usize> {
        let mut free = self.free.clone();
        let mut usage = self.usage.clone();
        let mut out = Vec::new();
        for site in 0..self.sites.len() {
            let mut blocked: BTreeSet<(usize, &str)> = BTreeSet::new();
            for (i, p) in self.waiting.iter().enumerate().filter(|(_, p)| p.site == site) {
                if blocked.contains(&(p.queue, p.sub.user.as_str())) {
                    continue;
                }
                let cap = self.sites[site].queues[p.queue].cores_per_user;
                let used = usage.get(&Self::usage_key(p)).copied().unwrap_or(0);
                if used + p.sub.cores > cap {
                    blocked.insert((p.queue, p.sub.user.as_str()));
                    continue;
                }
                if free[site] < p.sub.cores {
                    break;
                }
                free[site] -= p.sub.cores;
                *usage.entry(Self::usage_key(p)).or_default() += p.sub.cores;
                out.push(i);
            }
        }
        out
    }

    fn dispatch(&mut self, out: &mut Vec<SimEvent>) {
        let mut starts = self.startable();
        if starts.is_empty() {
            return;
        }
        let order = starts.clone();
        starts.sort_unstable();
        let mut taken: BTreeMap<usize, Pending> = BTreeMap::new();
        for i in starts.into_iter().rev() {
            taken.insert(i, self.waiting.remove(i));
        }
        for i in order {
            let p = taken.remove(&i).unwrap();
            let walltime = self.sites[p.site].queues[p.queue].walltime.seconds();
            let (offset, outcome) = match (p.fail_at, walltime) {
                (Some(f), Some(w)) if f > w => (w, Outcome::Killed),
                (Some(f), _) => (f, Outcome::Exit(1)),
                (None, Some(w)) if p.true_secs > w => (w, Outcome::Killed),
                (None, _) => (p.true_secs, Outcome::Exit(0)),
            };
            self.free[p.site] -= p.sub.cores;
            *self.usage.entry(Self::usage_key(&p)).or_default() += p.sub.cores;
            out.push(self.event(&p, self.clock, SimEventKind::Started));
            self.running.push(Active { start: self.clock, end: self.clock + offset, outcome, pending: p });
        }
    }

    fn event(&self, p: &Pending, ts: u64, kind: SimEventKind) -> SimEvent {
        let site = &self.sites[p.site];
        SimEvent {
            ts,
            job: p.sub.job.clone(),
            attempt: p.sub.attempt,
            segment: p.sub.segment,
            site: site.name.clone(),
            queue: site.queues[p.queue].name.clone(),
            user: p.sub.user.clone(),
            cores: p.sub.cores,
            kind,
        }
    }

    fn next_completion(&self) -> Option<u64> {
        self.running.iter().map(|a| a.end).min()
    }

    /// Time of the next thing that will happen: now if a waiting job can
    /// start, otherwise the earliest completion.
    pub fn next_event_time(&self) -> Option<u64> {
        if !self.startable().is_empty() {
            return Some(self.clock);
        }
        self.next_completion()
    }

    fn complete_at(&mut self, t: u64, out: &mut Vec<SimEvent>) {
        let mut done: Vec<Active> = Vec::new();
        let mut i = 0;
        while i < self.running.len() {
            if self.running[i].end == t {
                done.push(self.running.remove(i));
            } else {
                i += 1;
            }
        }
        done.sort_by_key(|a| a.pending.seq);
        for a in done {
            self.release(&a.pending);
            let kind = match a.outcome {
                Outcome::Exit(code) => SimEventKind::Exited { code },
                Outcome::Killed => SimEventKind::WalltimeKilled,
            };
            debug_assert!(a.start <= t);
            out.push(self.event(&a.pending, t, kind));
        }
    }

    /// Processes every start and completion up to `until`, in time order.
    /// Completions at an instant are handled before the starts they enable.
    pub fn advance(&mut self, until: u64) -> Vec<SimEvent> {
        let mut out = Vec::new();
        self.dispatch(&mut out);
        while let Some(t) = self.next_completion() {
            if t > until {
                break;
            }
            self.clock = t;
            self.complete_at(t, &mut out);
            self.dispatch(&mut out);
        }
        if until > self.clock {
            self.clock = until;
        }
        out
    }

    /// Advances to the next event instant and returns what happened there.
    pub fn step(&mut self) -> Vec<SimEvent> {
        match self.next_event_time() {
            Some(t) => self.advance(t),
            None => Vec::new(),
        }
    }
}

impl OccupancyProbe for SimCluster {
    fn probe(&self, site: &Site) -> Option<Vec<QueueOccupancy>> {
        if self.unreachable.contains(&site.name) {
            return None;
        }
        let s = self.sites.iter().position(|x| x.name == site.name)?;
        let mut out = Vec::new();
        for (qi, q) in self.sites[s].queues.iter().enumerate() {
            let mut occ = QueueOccupancy::idle(&self.sites[s], q);
            occ.idle_cores = self.free[s];
            for p in self.waiting.iter().filter(|p| p.site == s && p.queue == qi) {
                occ.queued_jobs += 1;
                occ.queued_cores += p.sub.cores;
                *occ.user_cores.entry(p.sub.user.clone()).or_default() += p.sub.cores;
            }
            for a in self.running.iter().filter(|a| a.pending.site == s && a.pending.queue == qi) {
                occ.running_jobs += 1;
                *occ.user_cores.entry(a.pending.sub.user.clone()).or_default() += a.pending.sub.cores;
            }
            out.push(occ);
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resource::ntu_hpcc;
    use crate::scheduler::poll;
    use alloc::vec;

    fn sub(job: &str, queue: &str, minutes: f64, cores: u32) -> SimSubmission {
        SimSubmission {
            job: job.into(),
            attempt: 1,
            segment: 1,
            user: "alice".into(),
            cores,
            runtime: minutes,
            queue: QueueRef::new("ntu-hpcc", queue),
        }
    }

    fn exact() -> SimCluster {
        SimCluster::new(vec![ntu_hpcc()], SimConfig::exact(7))
    }

    #[test]
    fn starts_immediately_and_completes() {
        let mut sim = exact();
        sim.submit(sub("a", "ku-small", 60.0, 1)).unwrap();
        let ev = sim.advance(10_000);
        assert_eq!(ev[0].kind, SimEventKind::Started);
        assert_eq!(ev[0].ts, 0);
        assert_eq!(ev[1].kind, SimEventKind::Exited { code: 0 });
        assert_eq!(ev[1].ts, 3600);
        assert!(sim.is_idle());
    }

    #[test]
    fn walltime_kill_is_exact() {
        let mut sim = exact();
        sim.submit(sub("a", "kh-large", 130.0, 1)).unwrap();
        let ev = sim.advance(100_000);
        assert_eq!(ev[1].kind, SimEventKind::WalltimeKilled);
        assert_eq!(ev[1].ts, 120 * 60);
    }

    #[test]
    fn user_cap_makes_jobs_wait() {
        let mut sim = exact();
        sim.submit(sub("a", "ku-small", 30.0, 32)).unwrap();
        sim.submit(sub("b", "ku-small", 30.0, 8)).unwrap();
        let ev = sim.advance(0);
        assert_eq!(ev.len(), 1);
        let ev = sim.advance(1800);
        let started_b = ev.iter().find(|e| e.job.as_str() == "b" && e.kind == SimEventKind::Started).unwrap();
        assert_eq!(started_b.ts, 1800);
    }

    #[test]
    fn probe_reflects_load_and_staleness() {
        let mut sim = exact();
        let sites = vec![ntu_hpcc()];
        let snap = poll(&sites, &sim, None, 0);
        assert!(snap.queues.iter().all(|q| q.idle_cores == 256 && !q.stale));
        sim.submit(sub("a", "ku-small", 30.0, 8)).unwrap();
        sim.advance(0);
        let snap = poll(&sites, &sim, None, 0);
        let small = snap.get("ntu-hpcc", "ku-small").unwrap();
        assert_eq!((small.idle_cores, small.running_jobs, small.user_cores["alice"]), (248, 1, 8));
        sim.set_reachable("ntu-hpcc", false);
        let stale = poll(&sites, &sim, Some(&snap), 5);
        assert!(stale.queues.iter().all(|q| q.stale));
        assert_eq!(stale.get("ntu-hpcc", "ku-small").unwrap().idle_cores, 248);
    }

    #[test]
    fn errors() {
        let mut sim = exact();
        assert!(matches!(sim.submit(sub("a", "nope", 1.0, 1)), Err(SimError::UnknownQueue(_))));
        assert!(matches!(sim.submit(sub("a", "ku-single", 1.0, 8)), Err(SimError::Oversized { .. })));
        sim.submit(sub("a", "ku-small", 1.0, 1)).unwrap();
        assert!(matches!(sim.submit(sub("a", "ku-small", 1.0, 1)), Err(SimError::AlreadySubmitted(_))));
        assert!(sim.cancel(&"a".into()));
        assert!(sim.is_idle());
    }

    #[test]
    fn zero_sigma_is_exact_and_noise_is_seeded() {
        let mut sim = exact();
        sim.submit(sub("a", "ku-single", 123.0, 1)).unwrap();
        assert_eq!(sim.advance(u64::MAX / 2)[1].ts, 123 * 60);
        let run = |seed| {
            let mut s = SimCluster::new(vec![ntu_hpcc()], SimConfig { seed, sigma: 0.3, failure_rate: 0.5 });
            for i in 0..20 {
                s.submit(sub(&alloc::format!("j{i}"), "ku-single", 100.0, 1)).unwrap();
            }
            s.advance(u64::MAX / 2)
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }
}
