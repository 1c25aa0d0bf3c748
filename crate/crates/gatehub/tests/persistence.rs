mod common;

use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use gatehub::runs::{CreateRun, RunManager};
use gatehub::store::{RunStatus, Store, TemplateRef};
use gatehub_core::scheduler::JobState;
use gatehub_core::sim::BackendKind;

fn request(template: &str, id: &str, seed: u64, backend: BackendKind) -> CreateRun {
    CreateRun {
        template: TemplateRef { name: template.into(), version: 1 },
        backend: Some(backend),
        seed: Some(seed),
        run_id: Some(id.into()),
        ..CreateRun::default()
    }
}

/// Rewrites a finished run as if the service died after `keep` log lines,
/// mid-way through writing the next one.
fn crash_after(store: &Store, id: &str, keep: usize) {
    let path = store.events_path(id);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.len() > keep);
    let mut torn = lines[..keep].join("\n");
    torn.push('\n');
    torn.push_str(&lines[keep][..lines[keep].len() / 2]);
    std::fs::write(&path, torn).unwrap();
    let mut record = store.run(id).unwrap();
    record.status = RunStatus::Running;
    record.summary = None;
    record.ended_at = None;
    record.artifacts.clear();
    store.save_run(&record).unwrap();
}

fn finish(kind: BackendKind, template: &str) {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    let mgr = RunManager::start(store.clone(), common::manager_config(0.0)).unwrap();
    mgr.create("amy", request(template, "r1", 21, kind), None).unwrap();
    let done = mgr.wait("r1", Duration::from_secs(60)).unwrap();
    assert_eq!(done.status, RunStatus::Completed, "{:?}", done.error);
    let events = store.read_events("r1").unwrap();
    mgr.join_all();
    drop(mgr);

    crash_after(&store, "r1", events.len() / 2);
    let mgr = RunManager::start(store.clone(), common::manager_config(0.0)).unwrap();
    let resumed = mgr.wait("r1", Duration::from_secs(60)).unwrap();
    mgr.join_all();
    assert_eq!(resumed.status, RunStatus::Completed, "{:?}", resumed.error);
    let (before, after) = (done.summary.clone().unwrap(), resumed.summary.clone().unwrap());
    assert_eq!(before.counts, after.counts);
    if kind == BackendKind::Sim {
        assert_eq!(before, after);
        assert_eq!(store.read_events("r1").unwrap(), events);
    } else {
        // processes do not outlive the service; whatever was running is re-run
        assert!(after.faulty.iter().all(|f| f.detail == "lost in service restart" && f.final_state == JobState::Finished));
    }
    let arts = |r: &gatehub::store::RunRecord| {
        let mut v: Vec<_> = r.artifacts.iter().map(|a| (a.job.clone(), a.port.clone(), a.bytes)).collect();
        v.sort();
        v
    };
    assert_eq!(arts(&resumed), arts(&done));
}

#[test]
fn simulated_run_survives_a_crash() {
    finish(BackendKind::Sim, "bnnt");
}

#[test]
fn local_run_survives_a_crash() {
    finish(BackendKind::Local, "general");
}

#[test]
fn records_survive_reopening() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    let mgr = RunManager::start(store.clone(), common::manager_config(0.0)).unwrap();
    mgr.create("amy", request("general", "r2", 3, BackendKind::Sim), Some("k")).unwrap();
    let done = mgr.wait("r2", Duration::from_secs(60)).unwrap();
    mgr.join_all();
    drop(mgr);

    let reopened = Arc::new(Store::open(dir.path()).unwrap());
    assert_eq!(reopened.run("r2").unwrap(), done);
    assert_eq!(done.jobs.len(), 6);
    assert!(done.jobs.iter().all(|j| j.state.is_absorbing()));
    let mgr = RunManager::start(reopened, common::manager_config(0.0)).unwrap();
    let (again, created) = mgr.create("amy", request("general", "r3", 3, BackendKind::Sim), Some("k")).unwrap();
    assert!(!created);
    assert_eq!(again.id, "r2");
}

#[test]
fn torn_log_tail_is_ignored_on_read() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    std::fs::create_dir_all(store.events_path("x").parent().unwrap()).unwrap();
    let mut f = std::fs::File::create(store.events_path("x")).unwrap();
    writeln!(f, r#"{{"ts":0,"job":"a","from":"created","to":"eligible","detail":""}}"#).unwrap();
    write!(f, r#"{{"ts":0,"job":"a","fr"#).unwrap();
    drop(f);
    assert_eq!(store.read_events("x").unwrap().len(), 1);
    store.repair_events("x").unwrap();
    let text = std::fs::read_to_string(store.events_path("x")).unwrap();
    assert!(text.ends_with('\n'));
    assert_eq!(text.lines().count(), 1);
}
