mod common;

use gatehub::config::{load_sites, load_workflow_document};
use gatehub::store::bundled_workflows;
use gatehub_core::workflow::expand_sweep;
use serde_json::Value;

#[test]
fn bundled_workflows_match_the_schema_and_bind() {
    let schema = common::workflow_schema();
    let mut seen = 0;
    for entry in glob::glob(common::repo_root().join("workflows/**/*.workflow.json").to_str().unwrap()).unwrap() {
        let path = entry.unwrap();
        let raw: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        common::validate(&schema, "", &raw).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let wf = load_workflow_document(&path).unwrap().bind().unwrap();
        let set = expand_sweep(&wf, "t").unwrap();
        assert_eq!(set.jobs.len(), wf.graph.nodes.len() * wf.sweep.axes.points(), "{}", path.display());
        seen += 1;
    }
    assert_eq!(seen, bundled_workflows().count());
}

#[test]
fn schema_rejects_malformed_documents() {
    let schema = common::workflow_schema();
    let bad = serde_json::json!({"graph": {"nodes": [{"id": "a", "profile": "r", "ports": [
        {"name": "p", "direction": "sideways", "data_class": "scalar"}]}]}});
    assert!(common::validate(&schema, "", &bad).is_err());
}

#[test]
fn bundled_sites_load() {
    let root = common::repo_root();
    let hpcc = load_sites(&root.join("sites/ntu-hpcc.json")).unwrap();
    assert_eq!(hpcc, vec![gatehub_core::resource::ntu_hpcc()]);
    let local = load_sites(&root.join("sites/local.json")).unwrap();
    assert!(local[0].queues[0].walltime.is_unlimited());
}

#[test]
fn api_schema_covers_every_action() {
    let schema = common::api_schema();
    let actions: std::collections::BTreeSet<String> = schema["endpoints"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|e| e["action"].as_str().map(str::to_string))
        .collect();
    for action in gatehub::auth::Action::ALL {
        let name = serde_json::to_value(action).unwrap();
        assert!(actions.contains(name.as_str().unwrap()), "{name}");
    }
}
