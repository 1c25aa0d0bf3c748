mod common;

use std::process::{Command, Output};

use serde_json::Value;

fn gatehub(args: &[&str]) -> Output {
    Command::new(common::gatehub_bin()).args(args).current_dir(common::repo_root()).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(code(&gatehub(&["validate", "workflows/general.workflow.json"])), 0);
    assert_eq!(code(&gatehub(&["validate", "workflows/missing.json"])), 1);
    assert_eq!(code(&gatehub(&["no-such-command"])), 2);
    assert_eq!(code(&gatehub(&["simulate"])), 2);
    assert_eq!(code(&gatehub(&["simulate", "workflows/general.workflow.json", "--seed", "x"])), 2);
}

#[test]
fn validate_reports_graph_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"graph": {"nodes": [{"id": "A!", "profile": "r", "ports": []}], "edges": []},
            "bindings": {"A!": {"executable": "mock-r"}}}"#,
    )
    .unwrap();
    let out = gatehub(&["validate", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("A!"));
}

#[test]
fn expand_prints_one_row_per_job() {
    let out = gatehub(&[
        "expand",
        "workflows/general.workflow.json",
        "--axis",
        "atoms=840,1680,2520",
        "--axis",
        "temperature=300,600",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = String::from_utf8(out.stdout).unwrap();
    assert_eq!(rows.lines().count(), 3 * 2 * 6);
    assert!(!rows.contains("${"));

    let out = gatehub(&["--json", "expand", "workflows/general.workflow.json"]);
    let set: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(set["jobs"].as_array().unwrap().len(), 6);
}

#[test]
fn simulate_is_seed_deterministic() {
    let args = ["simulate", "workflows/bnnt.workflow.json", "--sites", "sites/ntu-hpcc.json", "--failure-rate", "0.2"];
    let run = |seed: &str| {
        let mut a = args.to_vec();
        a.extend(["--seed", seed]);
        let out = gatehub(&a);
        assert!(code(&out) <= 1);
        out.stdout
    };
    assert_eq!(run("11"), run("11"));
    assert_ne!(run("11"), run("12"));
}

#[test]
fn simulate_json_carries_trace_and_summary() {
    let out = gatehub(&["--json", "simulate", "workflows/general.workflow.json", "--seed", "2", "--sigma", "0"]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let schema = common::api_schema();
    common::validate(&schema, "Summary", &v["summary"]).unwrap();
    common::validate(&schema, "Transitions", &v["events"]).unwrap();
    assert_eq!(v["summary"]["counts"]["finished"], 6);
    assert_eq!(v["artifacts"].as_array().unwrap().len(), 6);
}

#[test]
fn simulate_writes_logs() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("events.ndjson");
    let trace = dir.path().join("trace.ndjson");
    let out = gatehub(&[
        "simulate",
        "workflows/general.workflow.json",
        "-q",
        "--events",
        events.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.contains("\"from\""));
    for line in std::fs::read_to_string(&events).unwrap().lines() {
        let _: Value = serde_json::from_str(line).unwrap();
    }
    assert!(std::fs::read_to_string(&trace).unwrap().lines().count() >= 12);
}

#[test]
fn failing_runs_exit_one() {
    let out = gatehub(&["simulate", "workflows/general.workflow.json", "--failure-rate", "1", "-q"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn local_run_with_stubs() {
    let dir = tempfile::tempdir().unwrap();
    let out = gatehub(&[
        "run",
        "workflows/general.workflow.json",
        "--work-dir",
        dir.path().to_str().unwrap(),
        "--stub-dir",
        common::stub_dir().to_str().unwrap(),
        "--ms-per-minute",
        "0",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_dir(dir.path().join("local")).unwrap().count() >= 6);
}

#[test]
fn client_commands_need_a_service() {
    let out = gatehub(&["--json", "status", "r1", "--api", "http://127.0.0.1:9", "--token", "t"]);
    assert_eq!(code(&out), 1);
}
