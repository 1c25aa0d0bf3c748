//! Executor backend that runs jobs as local processes.
//!
//! Layout per job: `<root>/<run>/<job>/{inputs/, outputs/, checkpoints/,
//! stdout.txt, stderr.txt, meta.json}`. The process runs inside `outputs/`.
//! Timestamps are reported in simulated seconds, one simulated minute being
//! `ms_per_minute` real milliseconds.

use std::collections::{BTreeMap, VecDeque};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use gatehub_core::driver::{ArtifactRecord, Backend, BackendEvent, BackendStatus, DriverError, RunDriver, Submission};
use gatehub_core::resource::{find_queue, QueueRef, Site};
use gatehub_core::scheduler::{
    InputSource, JobEvent, JobId, OccupancyProbe, OutputSpec, Policy, QueueOccupancy, RunSummary, TransitionRecord,
};
use gatehub_core::sim::{BackendKind, ExecutorHandle};
use gatehub_core::workflow::{JobSet, DESK_SCALE};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{find_output, stage_and_collect};

#[derive(Debug, Error)]
pub enum SpawnError {
    #[error("executable {0:?} not found")]
    NotFound(String),
    #[error("cannot start {exe}: {source}")]
    Io { exe: String, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum StagingError {
    #[error("input {port}: {path} does not exist")]
    MissingInput { port: String, path: PathBuf },
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone)]
pub struct LocalConfig {
    /// Directory holding `<run>/<job>` working directories.
    pub root: PathBuf,
    /// Relative input files and executables resolve against this directory.
    pub base_dir: PathBuf,
    /// Directory searched for bare executable names before `PATH`.
    pub stub_dir: Option<PathBuf>,
    pub max_parallel: usize,
    pub ms_per_minute: f64,
    pub desk_scale: f64,
    /// Sleep between polls while waiting for processes.
    pub tick: Duration,
}

impl LocalConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        LocalConfig {
            root: root.into(),
            base_dir: PathBuf::from("."),
            stub_dir: None,
            max_parallel: 8,
            ms_per_minute: 10.0,
            desk_scale: DESK_SCALE,
            tick: Duration::from_millis(2),
        }
    }
}

/// Written next to each job's output.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobMeta {
    pub job: JobId,
    pub attempt: u32,
    pub segment: u32,
    pub segments: u32,
    pub queue: String,
    pub executable: String,
    pub args: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub pid: Option<u32>,
    pub started_at: u64,
    pub ended_at: Option<u64>,
    pub exit_code: Option<i32>,
    pub outcome: Option<String>,
}

/// Finds an executable: explicit paths resolve against `base`, bare names
/// against `stub_dir` and then `PATH`.
pub fn resolve_executable(name: &str, base: &Path, stub_dir: Option<&Path>) -> Result<PathBuf, SpawnError> {
    let not_found = || SpawnError::NotFound(name.into());
    if name.is_empty() {
        return Err(not_found());
    }
    if name.contains('/') {
        let p = base.join(name);
        return p.is_file().then_some(p).ok_or_else(not_found);
    }
    let from_stubs = stub_dir.map(|d| d.join(name)).filter(|p| p.is_file());
    from_stubs
        .or_else(|| {
            let path = std::env::var_os("PATH").unwrap_or_default();
            std::env::split_paths(&path).map(|d| d.join(name)).find(|p| p.is_file())
        })
        .ok_or_else(not_found)
}

fn env_key(port: &str) -> String {
    let cleaned: String = port.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' }).collect();
    format!("GATEHUB_INPUT_{cleaned}")
}

#[derive(Debug, Clone)]
struct Launch {
    job: gatehub_core::scheduler::Job,
    queue: QueueRef,
    segment: u32,
    segments: u32,
    work: f64,
}

struct Proc {
    launch: Launch,
    child: Child,
    started: Instant,
    walltime: Option<Duration>,
    dir: PathBuf,
    meta: JobMeta,
}

pub struct LocalBackend {
    cfg: LocalConfig,
    run_id: String,
    sites: Vec<Site>,
    /// Declared outputs of every job in the run, for resolving upstream inputs.
    outputs: BTreeMap<JobId, Vec<OutputSpec>>,
    start: Instant,
    offset: u64,
    seq: u64,
    waiting: VecDeque<Launch>,
    running: Vec<Proc>,
    pending: Vec<BackendEvent>,
}

impl LocalBackend {
    pub fn new(
        cfg: LocalConfig,
        run_id: &str,
        sites: Vec<Site>,
        outputs: BTreeMap<JobId, Vec<OutputSpec>>,
    ) -> Self {
        LocalBackend {
            cfg,
            run_id: run_id.into(),
            sites,
            outputs,
            start: Instant::now(),
            offset: 0,
            seq: 0,
            waiting: VecDeque::new(),
            running: Vec::new(),
            pending: Vec::new(),
        }
    }

    /// Continues the clock from `ts` (used when resuming a run).
    pub fn with_clock_offset(mut self, ts: u64) -> Self {
        self.offset = ts;
        self
    }

    pub fn job_dir(&self, job: &JobId) -> PathBuf {
        self.cfg.root.join(&self.run_id).join(job.as_str())
    }

    fn elapsed_ts(&self, since: Instant) -> u64 {
        let ms = since.elapsed().as_secs_f64() * 1000.0;
        (ms * 60.0 / self.cfg.ms_per_minute.max(1e-3)) as u64
    }

    fn site_load(&self, site: &str) -> u32 {
        self.running.iter().filter(|p| p.launch.queue.site == site).map(|p| p.launch.job.estimate.cores).sum()
    }

    fn user_load(&self, queue: &QueueRef, user: &str) -> u32 {
        self.running
            .iter()
            .filter(|p| &p.launch.queue == queue && p.launch.job.user == user)
            .map(|p| p.launch.job.estimate.cores)
            .sum()
    }

    fn stage(&self, l: &Launch, dir: &Path) -> Result<(), StagingError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StagingError::Io { path, source }
        };
        for sub in ["inputs", "outputs", "checkpoints"] {
            fs::create_dir_all(dir.join(sub)).map_err(io(&dir.join(sub)))?;
        }
        for input in &l.job.spec.inputs {
            let (port, src) = match input {
                InputSource::File { port, path } => (port, self.cfg.base_dir.join(path)),
                InputSource::Upstream { port, job, from_port } => {
                    let file = self
                        .outputs
                        .get(job)
                        .and_then(|outs| outs.iter().find(|o| &o.port == from_port))
                        .map(|o| o.file.clone())
                        .unwrap_or_else(|| from_port.clone());
                    let updir = self.cfg.root.join(&self.run_id).join(job.as_str()).join("outputs");
                    let found = find_output(&updir, &file).unwrap_or_else(|| updir.join(&file));
                    (port, found)
                }
            };
            if !src.is_file() {
                return Err(StagingError::MissingInput { port: port.clone(), path: src });
            }
            let target_dir = dir.join("inputs").join(port);
            fs::create_dir_all(&target_dir).map_err(io(&target_dir))?;
            let target = target_dir.join(src.file_name().unwrap_or_default());
            fs::copy(&src, &target).map_err(io(&target))?;
        }
        Ok(())
    }

    fn input_env(&self, l: &Launch, dir: &Path) -> Vec<(String, OsString)> {
        let mut out = Vec::new();
        for input in &l.job.spec.inputs {
            let port = input.port();
            let port_dir = dir.join("inputs").join(port);
            if let Ok(mut entries) = fs::read_dir(&port_dir) {
                if let Some(Ok(e)) = entries.next() {
                    out.push((env_key(port), e.path().into_os_string()));
                }
            }
        }
        out
    }

    fn checkpoint_env(l: &Launch, dir: &Path) -> Result<Vec<(String, OsString)>, StagingError> {
        if l.segments <= 1 {
            return Ok(Vec::new());
        }
        let ckpt = |k: u32| dir.join("checkpoints").join(format!("segment-{k}.ckpt"));
        let input = if l.segment == 1 {
            OsString::new()
        } else {
            let prev = ckpt(l.segment - 1);
            if !prev.is_file() {
                return Err(StagingError::MissingCheckpoint(prev));
            }
            prev.into_os_string()
        };
        Ok(vec![("CKPT_IN".into(), input), ("CKPT_OUT".into(), ckpt(l.segment).into_os_string())])
    }

    fn event(&self, job: &JobId, event: JobEvent, detail: String) -> BackendEvent {
        BackendEvent { ts: self.now(), job: job.clone(), event, detail, artifacts: Vec::new() }
    }

    fn launch(&mut self, l: Launch) -> BackendEvent {
        let dir = self.job_dir(&l.job.id);
        let id = l.job.id.clone();
        if let Err(e) = self.stage(&l, &dir) {
            return self.event(&id, JobEvent::Lost, format!("staging error: {e}"));
        }
        let ckpt = match Self::checkpoint_env(&l, &dir) {
            Ok(v) => v,
            Err(e) => return self.event(&id, JobEvent::Lost, e.to_string()),
        };
        let exe = match resolve_executable(&l.job.spec.executable, &self.cfg.base_dir, self.cfg.stub_dir.as_deref()) {
            Ok(p) => p,
            Err(e) => return self.event(&id, JobEvent::Lost, format!("spawn error: {e}")),
        };
        let open = |name: &str| fs::File::create(dir.join(name));
        let (stdout, stderr) = match (open("stdout.txt"), open("stderr.txt")) {
            (Ok(o), Ok(e)) => (o, e),
            (Err(e), _) | (_, Err(e)) => return self.event(&id, JobEvent::Lost, format!("staging error: {e}")),
        };
        let mut cmd = Command::new(&exe);
        cmd.args(&l.job.spec.args)
            .current_dir(dir.join("outputs"))
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .envs(&l.job.spec.env)
            .env("GATEHUB_JOB", id.as_str())
            .env("GATEHUB_ATTEMPT", l.job.attempt.to_string())
            .env("GATEHUB_SEGMENT", l.segment.to_string())
            .env("GATEHUB_WORK_MINUTES", l.work.to_string())
            .env("GATEHUB_MS_PER_MINUTE", self.cfg.ms_per_minute.to_string())
            .env("GATEHUB_DESK_SCALE", self.cfg.desk_scale.to_string())
            .envs(self.input_env(&l, &dir))
            .envs(ckpt.iter().map(|(k, v)| (k, v)));
        let child = match cmd.spawn() {
            Ok(c) => c,
            Err(source) => {
                let e = SpawnError::Io { exe: exe.display().to_string(), source };
                return self.event(&id, JobEvent::Lost, format!("spawn error: {e}"));
            }
        };
        // unpaced runs have no time scale to enforce a walltime against
        let walltime = find_queue(&self.sites, &l.queue)
            .filter(|(_, q)| !q.walltime.is_unlimited() && self.cfg.ms_per_minute > 0.0)
            .map(|(_, q)| q.walltime.0 * self.cfg.ms_per_minute)
            .map(|ms| Duration::from_secs_f64(ms / 1000.0));
        let meta = JobMeta {
            job: id.clone(),
            attempt: l.job.attempt,
            segment: l.segment,
            segments: l.segments,
            queue: l.queue.to_string(),
            executable: exe.display().to_string(),
            args: l.job.spec.args.clone(),
            env: l.job.spec.env.clone(),
            pid: Some(child.id()),
            started_at: self.now(),
            ..JobMeta::default()
        };
        let _ = write_meta(&dir, &meta);
        let ev = self.event(&id, JobEvent::Started, format!("pid {}", child.id()));
        self.running.push(Proc { launch: l, child, started: Instant::now(), walltime, dir, meta });
        ev
    }

    fn dispatch(&mut self, out: &mut Vec<BackendEvent>) {
        let mut i = 0;
        while i < self.waiting.len() {
            if self.running.len() >= self.cfg.max_parallel {
                break;
            }
            let l = &self.waiting[i];
            let Some((site, q)) = find_queue(&self.sites, &l.queue) else {
                i += 1;
                continue;
            };
            let cores = l.job.estimate.cores;
            if self.user_load(&l.queue, &l.job.user) + cores > q.cores_per_user {
                i += 1;
                continue;
            }
            if self.site_load(&site.name) + cores > site.total_cores {
                break;
            }
            let l = self.waiting.remove(i).expect("index in range");
            out.push(self.launch(l));
        }
    }

    fn reap(&mut self, out: &mut Vec<BackendEvent>) {
        let mut i = 0;
        while i < self.running.len() {
            let p = &mut self.running[i];
            let status = match p.child.try_wait() {
                Ok(s) => s,
                Err(_) => None,
            };
            let over = p.walltime.is_some_and(|w| p.started.elapsed() >= w);
            if status.is_none() && !over {
                i += 1;
                continue;
            }
            let mut p = self.running.remove(i);
            let (event, detail, artifacts) = match status {
                Some(st) => {
                    let code = st.code().unwrap_or(-1);
                    if code != 0 {
                        (JobEvent::Exited { code }, format!("exit code {code}"), Vec::new())
                    } else if p.launch.segment < p.launch.segments {
                        (JobEvent::Exited { code: 0 }, String::new(), Vec::new())
                    } else {
                        let outputs = &p.launch.job.spec.outputs;
                        match stage_and_collect(&p.launch.job.id, outputs, &p.dir.join("outputs"), self.cfg.desk_scale) {
                            Ok(records) => (JobEvent::Exited { code: 0 }, String::new(), records),
                            Err(missing) => (JobEvent::Lost, missing.to_string(), Vec::new()),
                        }
                    }
                }
                None => {
                    let _ = p.child.kill();
                    let _ = p.child.wait();
                    (JobEvent::WalltimeKilled, format!("walltime of {} exceeded", p.launch.queue), Vec::new())
                }
            };
            p.meta.ended_at = Some(self.now());
            p.meta.exit_code = match &event {
                JobEvent::Exited { code } => Some(*code),
                _ => None,
            };
            p.meta.outcome = Some(if detail.is_empty() { "exited(0)".into() } else { detail.clone() });
            let _ = write_meta(&p.dir, &p.meta);
            let mut ev = self.event(&p.launch.job.id, event, detail);
            ev.artifacts = artifacts;
            out.push(ev);
        }
    }
}

fn write_meta(dir: &Path, meta: &JobMeta) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(dir.join("meta.json"), text)
}

impl Drop for LocalBackend {
    fn drop(&mut self) {
        for p in &mut self.running {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

impl OccupancyProbe for LocalBackend {
    fn probe(&self, site: &Site) -> Option<Vec<QueueOccupancy>> {
        let used = self.site_load(&site.name);
        let mut out = Vec::new();
        for q in &site.queues {
            let at = q.queue_ref();
            let mut occ = QueueOccupancy::idle(site, q);
            occ.idle_cores = site.total_cores.saturating_sub(used);
            for l in self.waiting.iter().filter(|l| l.queue == at) {
                occ.queued_jobs += 1;
                occ.queued_cores += l.job.estimate.cores;
                *occ.user_cores.entry(l.job.user.clone()).or_default() += l.job.estimate.cores;
            }
            for p in self.running.iter().filter(|p| p.launch.queue == at) {
                occ.running_jobs += 1;
                *occ.user_cores.entry(p.launch.job.user.clone()).or_default() += p.launch.job.estimate.cores;
            }
            out.push(occ);
        }
        Some(out)
    }
}

impl Backend for LocalBackend {
    fn now(&self) -> u64 {
        self.offset + self.elapsed_ts(self.start)
    }

    fn submit(&mut self, sub: &Submission<'_>) -> Result<ExecutorHandle, String> {
        if find_queue(&self.sites, sub.queue).is_none() {
            return Err(format!("unknown queue {}", sub.queue));
        }
        self.seq += 1;
        self.waiting.push_back(Launch {
            job: sub.job.clone(),
            queue: sub.queue.clone(),
            segment: sub.segment,
            segments: sub.segments,
            work: sub.work,
        });
        Ok(ExecutorHandle { job: sub.job.id.clone(), backend: BackendKind::Local, external_ref: self.seq })
    }

    fn cancel(&mut self, job: &JobId) {
        self.waiting.retain(|l| &l.job.id != job);
        if let Some(i) = self.running.iter().position(|p| &p.launch.job.id == job) {
            let mut p = self.running.remove(i);
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }

    fn next_events(&mut self) -> BackendStatus {
        let mut out = std::mem::take(&mut self.pending);
        self.dispatch(&mut out);
        self.reap(&mut out);
        if !out.is_empty() {
            return BackendStatus::Events(out);
        }
        if self.waiting.is_empty() && self.running.is_empty() {
            return BackendStatus::Idle;
        }
        std::thread::sleep(self.cfg.tick);
        BackendStatus::Busy
    }
}

/// Result of a run on this machine.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub records: Vec<TransitionRecord>,
    pub summary: RunSummary,
    pub artifacts: Vec<ArtifactRecord>,
    pub makespan: u64,
}

/// Runs a job set to completion with real processes.
pub fn run_local(set: JobSet, sites: Vec<Site>, policy: Policy, cfg: LocalConfig) -> Result<LocalOutcome, DriverError> {
    let outputs = set.jobs.iter().map(|j| (j.id.clone(), j.spec.outputs.clone())).collect();
    let backend = LocalBackend::new(cfg, &set.run_id.clone(), sites.clone(), outputs);
    let mut driver = RunDriver::new(set, sites, policy, backend);
    driver.run_to_end()?;
    let records = driver.log().to_vec();
    Ok(LocalOutcome {
        makespan: records.last().map_or(0, |r| r.ts),
        summary: driver.summary(),
        artifacts: driver.artifacts().to_vec(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_order() {
        let dir = tempfile::tempdir().unwrap();
        let stub = dir.path().join("tool");
        fs::write(&stub, "").unwrap();
        assert_eq!(resolve_executable("tool", Path::new("/"), Some(dir.path())).unwrap(), stub);
        assert!(resolve_executable("sh", Path::new("/"), Some(dir.path())).is_ok());
        assert!(matches!(
            resolve_executable("definitely-not-here-42", Path::new("/"), None),
            Err(SpawnError::NotFound(_))
        ));
        assert_eq!(resolve_executable("./tool", dir.path(), None).unwrap(), dir.path().join("./tool"));
    }

    #[test]
    fn input_env_names() {
        assert_eq!(env_key("dump-in"), "GATEHUB_INPUT_DUMP_IN");
    }
}
