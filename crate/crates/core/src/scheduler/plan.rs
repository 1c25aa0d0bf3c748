//! Queue polling and placement: walltime fit, emptiest pool, segmentation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::job::{Assignment, Job, JobId};
use super::Policy;
use crate::resource::{admits_cores, find_queue, Queue, QueueRef, Site};

/// Load of one queue as last observed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueOccupancy {
    pub site: String,
    pub queue: String,
    /// Free cores on the site this queue dispatches to.
    pub idle_cores: u32,
    pub queued_jobs: u32,
    pub running_jobs: u32,
    /// Cores requested by jobs waiting in this queue.
    #[serde(default)]
    pub queued_cores: u32,
    /// Cores each user holds in this queue, running plus waiting.
    #[serde(default)]
    pub user_cores: BTreeMap<String, u32>,
    #[serde(default)]
    pub stale: bool,
}

impl QueueOccupancy {
    pub fn idle(site: &Site, queue: &Queue) -> Self {
        QueueOccupancy {
            site: site.name.clone(),
            queue: queue.name.clone(),
            idle_cores: site.total_cores,
            queued_jobs: 0,
            running_jobs: 0,
            queued_cores: 0,
            user_cores: BTreeMap::new(),
            stale: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancySnapshot {
    pub taken_at: u64,
    pub queues: Vec<QueueOccupancy>,
}

impl OccupancySnapshot {
    pub fn get(&self, site: &str, queue: &str) -> Option<&QueueOccupancy> {
        self.queues.iter().find(|q| q.site == site && q.queue == queue)
    }

    /// Every queue idle, as on a freshly booted cluster.
    pub fn all_idle(sites: &[Site], taken_at: u64) -> Self {
        OccupancySnapshot {
            taken_at,
            queues: sites.iter().flat_map(|s| s.queues.iter().map(move |q| QueueOccupancy::idle(s, q))).collect(),
        }
    }
}

/// Source of live queue load, typically an executor backend.
pub trait OccupancyProbe {
    /// Current load of every queue of `site`, or `None` if the site cannot be reached.
    fn probe(&self, site: &Site) -> Option<Vec<QueueOccupancy>>;
}

/// Polls every site. Unreachable sites keep their last known values (or an
/// idle placeholder) flagged as stale.
pub fn poll(sites: &[Site], probe: &dyn OccupancyProbe, previous: Option<&OccupancySnapshot>, now: u64) -> OccupancySnapshot {
    let mut queues = Vec::new();
    for site in sites {
        match probe.probe(site) {
            Some(entries) => queues.extend(entries.into_iter().map(|mut e| {
                e.stale = false;
                e
            })),
            None => {
                for q in &site.queues {
                    let mut entry = previous
                        .and_then(|p| p.get(&site.name, &q.name))
                        .cloned()
                        .unwrap_or_else(|| QueueOccupancy::idle(site, q));
                    entry.stale = true;
                    queues.push(entry);
                }
            }
        }
    }
    OccupancySnapshot { taken_at: now, queues }
}

/// A queue under consideration for one job.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub site: &'a Site,
    pub queue: &'a Queue,
    /// Cores the job's user could still get here: the smaller of the site's
    /// uncommitted cores and the user's remaining per-queue allowance.
    pub headroom: i64,
}

/// Orders feasible queues; the smallest candidate wins.
pub trait QueueRanking {
    fn compare(&self, a: &Candidate<'_>, b: &Candidate<'_>) -> Ordering;
}

/// Most headroom first, then the shortest walltime, then queue and site name.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptiestBestFit;

impl QueueRanking for EmptiestBestFit {
    fn compare(&self, a: &Candidate<'_>, b: &Candidate<'_>) -> Ordering {
        b.headroom
            .cmp(&a.headroom)
            .then_with(|| a.queue.walltime.0.total_cmp(&b.queue.walltime.0))
            .then_with(|| a.queue.name.cmp(&b.queue.name))
            .then_with(|| a.site.name.cmp(&b.site.name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnschedulableReason {
    /// No queue admits the job's cores (or its pinned queue does not exist).
    NoQueue,
    /// Only segmentation would fit, but the component cannot checkpoint.
    NotCheckpointable,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("job {job} is unschedulable: {reason:?}")]
pub struct Unschedulable {
    pub job: JobId,
    pub reason: UnschedulableReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub assignments: Vec<Assignment>,
    /// Jobs that fit somewhere but whose user is at the core cap of every
    /// fitting queue; they stay eligible for the next round.
    pub deferred: Vec<JobId>,
    pub unschedulable: Vec<Unschedulable>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("job {job} cannot be segmented: component is not checkpointable")]
pub struct NotCheckpointable {
    pub job: JobId,
}

/// Splits `job` so each segment fits `queue`'s walltime under `policy.safety`.
/// A job that already fits gets a single segment.
pub fn segment_job(job: &Job, queue: &Queue, policy: &Policy) -> Result<Assignment, NotCheckpointable> {
    let runtime = job.estimate.runtime;
    let needed = runtime * policy.safety;
    let walltime = queue.walltime.0;
    if needed <= walltime {
        return Ok(Assignment { job: job.id.clone(), queue: queue.queue_ref(), segments: 1, segment_runtime: runtime });
    }
    if !job.spec.checkpointable {
        return Err(NotCheckpointable { job: job.id.clone() });
    }
    let mut segments = libm::ceil(needed / walltime) as u32;
    // float noise can push an exact multiple one segment too high
    if segments > 1 && needed / f64::from(segments - 1) <= walltime {
        segments -= 1;
    }
    Ok(Assignment {
        job: job.id.clone(),
        queue: queue.queue_ref(),
        segments,
        segment_runtime: runtime / f64::from(segments),
    })
}

/// Cores already committed within the plan being built.
#[derive(Default)]
struct Committed {
    site: BTreeMap<String, i64>,
    user: BTreeMap<(String, String, String), i64>,
}

impl Committed {
    fn user_key(q: &Queue, user: &str) -> (String, String, String) {
        (q.site.clone(), q.name.clone(), user.into())
    }

    fn add(&mut self, q: &Queue, user: &str, cores: u32) {
        *self.site.entry(q.site.clone()).or_default() += i64::from(cores);
        *self.user.entry(Self::user_key(q, user)).or_default() += i64::from(cores);
    }
}

struct Ctx<'a> {
    snapshot: &'a OccupancySnapshot,
    committed: Committed,
}

impl Ctx<'_> {
    fn user_load(&self, site: &Site, q: &Queue, user: &str) -> i64 {
        let observed = self.snapshot.get(&site.name, &q.name).and_then(|o| o.user_cores.get(user)).copied().unwrap_or(0);
        i64::from(observed) + self.committed.user.get(&Committed::user_key(q, user)).copied().unwrap_or(0)
    }

    fn cap_ok(&self, site: &Site, q: &Queue, user: &str, cores: u32) -> bool {
        self.user_load(site, q, user) + i64::from(cores) <= i64::from(q.cores_per_user)
    }

    fn headroom(&self, site: &Site, q: &Queue, user: &str) -> i64 {
        let (idle, queued) = match self.snapshot.get(&site.name, &q.name) {
            Some(o) => (i64::from(o.idle_cores), i64::from(o.queued_cores)),
            None => (i64::from(site.total_cores), 0),
        };
        let site_free = idle - queued - self.committed.site.get(&site.name).copied().unwrap_or(0);
        let user_free = i64::from(q.cores_per_user) - self.user_load(site, q, user);
        site_free.min(user_free)
    }
}

/// Places each job, in the order given, with [`EmptiestBestFit`].
pub fn plan(jobs: &[&Job], snapshot: &OccupancySnapshot, sites: &[Site], policy: &Policy) -> Plan {
    plan_with(jobs, snapshot, sites, policy, &EmptiestBestFit)
}

/// Places each job, in the order given:
///
/// 1. queues whose walltime covers `estimate × safety` and whose caps admit the
///    job's cores are candidates; per-user caps count cores already held in
///    the snapshot plus cores committed earlier in this plan;
/// 2. the best candidate under `ranking` wins;
/// 3. with no walltime fit anywhere, a checkpointable job is segmented on the
///    best cap-admitting queue; others are unschedulable;
/// 4. a job that fits somewhere but is blocked by caps is deferred.
///
/// A job with a pinned queue goes there regardless of walltime, segmented
/// when it can checkpoint.
pub fn plan_with(
    jobs: &[&Job],
    snapshot: &OccupancySnapshot,
    sites: &[Site],
    policy: &Policy,
    ranking: &dyn QueueRanking,
) -> Plan {
    let mut ctx = Ctx { snapshot, committed: Committed::default() };
    let mut out = Plan::default();
    let all: Vec<(&Site, &Queue)> = sites.iter().flat_map(|s| s.queues.iter().map(move |q| (s, q))).collect();

    for &job in jobs {
        let est = &job.estimate;
        let cores = est.cores;
        let unschedulable = |reason| Unschedulable { job: job.id.clone(), reason };

        if let Some(pin) = &job.spec.pinned_queue {
            match find_queue(sites, pin) {
                Some((site, q)) if admits_cores(site, q, est, policy.enforce_memory) => {
                    if !ctx.cap_ok(site, q, &job.user, cores) {
                        out.deferred.push(job.id.clone());
                        continue;
                    }
                    let assignment = segment_job(job, q, policy).unwrap_or_else(|_| Assignment {
                        job: job.id.clone(),
                        queue: q.queue_ref(),
                        segments: 1,
                        segment_runtime: est.runtime,
                    });
                    ctx.committed.add(q, &job.user, cores);
                    out.assignments.push(assignment);
                }
                _ => out.unschedulable.push(unschedulable(UnschedulableReason::NoQueue)),
            }
            continue;
        }

        let admitting: Vec<(&Site, &Queue)> =
            all.iter().copied().filter(|(s, q)| admits_cores(s, q, est, policy.enforce_memory)).collect();
        if admitting.is_empty() {
            out.unschedulable.push(unschedulable(UnschedulableReason::NoQueue));
            continue;
        }
        let fits_walltime = |q: &Queue| est.runtime * policy.safety <= q.walltime.0;
        let any_walltime_fit = admitting.iter().any(|(_, q)| fits_walltime(q));
        if !any_walltime_fit && !job.spec.checkpointable {
            out.unschedulable.push(unschedulable(UnschedulableReason::NotCheckpointable));
            continue;
        }

        let best = admitting
            .iter()
            .filter(|(s, q)| (!any_walltime_fit || fits_walltime(q)) && ctx.cap_ok(s, q, &job.user, cores))
            .map(|&(site, queue)| Candidate { site, queue, headroom: ctx.headroom(site, queue, &job.user) })
            .min_by(|a, b| ranking.compare(a, b));
        let Some(best) = best else {
            out.deferred.push(job.id.clone());
            continue;
        };
        let assignment = segment_job(job, best.queue, policy).expect("walltime fit or checkpointable");
        ctx.committed.add(best.queue, &job.user, cores);
        out.assignments.push(assignment);
    }
    out
}

/// Queue for a job killed by the walltime of `killed`: the shortest walltime
/// strictly longer than the one that killed it, among queues admitting the
/// job's cores, ties broken by headroom then name. The job's (already
/// inflated) estimate decides segmentation on the new queue.
pub fn escalate(
    job: &Job,
    killed: &QueueRef,
    sites: &[Site],
    snapshot: &OccupancySnapshot,
    policy: &Policy,
) -> Option<Assignment> {
    let floor = find_queue(sites, killed).map_or(0.0, |(_, q)| q.walltime.0);
    let ctx = Ctx { snapshot, committed: Committed::default() };
    let (_, queue) = sites
        .iter()
        .flat_map(|s| s.queues.iter().map(move |q| (s, q)))
        .filter(|(s, q)| q.walltime.0 > floor && admits_cores(s, q, &job.estimate, policy.enforce_memory))
        .map(|(s, q)| ((q.walltime.0, -ctx.headroom(s, q, &job.user)), q))
        .min_by(|(a, qa), (b, qb)| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then_with(|| qa.name.cmp(&qb.name)).then_with(|| qa.site.cmp(&qb.site))
        })?;
    Some(segment_job(job, queue, policy).unwrap_or_else(|_| Assignment {
        job: job.id.clone(),
        queue: queue.queue_ref(),
        segments: 1,
        segment_runtime: job.estimate.runtime,
    }))
}
