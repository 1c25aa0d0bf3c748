//! The local executor and the exact simulator drive the same scheduler, so on
//! an unconstrained site every job walks the same state sequence.

mod common;

use std::collections::BTreeMap;

use gatehub::config::{bundled_local_sites, load_workflow};
use gatehub::local::{run_local, LocalConfig};
use gatehub_core::driver::simulate;
use gatehub_core::scheduler::{JobState, Policy, TransitionRecord};
use gatehub_core::sim::SimConfig;
use gatehub_core::workflow::expand_sweep;

fn per_job(records: &[TransitionRecord]) -> BTreeMap<String, Vec<JobState>> {
    let mut out: BTreeMap<String, Vec<JobState>> = BTreeMap::new();
    for r in records {
        out.entry(r.job.to_string()).or_default().push(r.to);
    }
    out
}

#[test]
fn local_and_simulated_runs_agree() {
    let root = common::repo_root();
    let wf = load_workflow(&root.join("workflows/general.workflow.json")).unwrap();
    let set = expand_sweep(&wf, "eq").unwrap();
    let sites = bundled_local_sites();

    let sim = simulate(set.clone(), sites.clone(), Policy::default(), SimConfig::exact(9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = LocalConfig::new(dir.path());
    cfg.base_dir = root.join("workflows");
    cfg.stub_dir = Some(common::stub_dir());
    cfg.ms_per_minute = 0.0;
    let local = run_local(set, sites, Policy::default(), cfg).unwrap();

    assert_eq!(per_job(&sim.records), per_job(&local.records));
    assert_eq!(sim.summary.counts, local.summary.counts);
    let ports = |a: &[gatehub_core::driver::ArtifactRecord]| {
        let mut v: Vec<(String, String, bool)> = a.iter().map(|x| (x.job.to_string(), x.port.clone(), x.within_expected)).collect();
        v.sort();
        v
    };
    assert_eq!(ports(&sim.artifacts), ports(&local.artifacts));
}
