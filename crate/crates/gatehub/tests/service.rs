mod common;

use std::time::Duration;

use common::Harness;
use gatehub::auth::Role;
use gatehub::store::RunStatus;
use serde_json::{json, Value};

fn workflow_doc(name: &str) -> Value {
    let text = std::fs::read_to_string(common::repo_root().join(format!("workflows/{name}.workflow.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn wait(h: &Harness, id: &str) -> gatehub::store::RunRecord {
    h.state.runs.wait(id, Duration::from_secs(60)).unwrap()
}

#[tokio::test]
async fn protected_endpoints_need_a_token() {
    let h = Harness::new(0.0, false);
    let schema = common::api_schema();
    for ep in schema["endpoints"].as_array().unwrap() {
        if ep["action"].is_null() {
            continue;
        }
        let path = ep["path"].as_str().unwrap().replace("{version}", "1").replace(['{', '}'], "");
        let method = ep["method"].as_str().unwrap();
        let body = (method != "GET" && method != "DELETE").then(|| json!({}));
        let reply = h.call(method, &path, None, body).await;
        assert_eq!(reply.status, 401, "{method} {path}");
        assert!(reply.json()["error"].is_string());
    }
    let reply = h.call("GET", "/me", Some("bogus"), None).await;
    assert_eq!(reply.status, 401);
}

#[tokio::test]
async fn login_me_logout() {
    let h = Harness::new(0.0, false);
    h.user("ann", Role::PowerUser);
    let bad = h.checked("POST", "/auth/login", None, Some(json!({"username": "ann", "password": "nope"}))).await;
    assert_eq!(bad.status, 401);
    let ok = h.checked("POST", "/auth/login", None, Some(json!({"username": "ann", "password": "pw"}))).await;
    assert_eq!(ok.status, 200);
    let token = ok.json()["token"].as_str().unwrap().to_string();
    let me = h.checked("GET", "/me", Some(&token), None).await;
    assert_eq!(me.json(), json!({"username": "ann", "role": "power_user"}));
    assert_eq!(h.checked("POST", "/auth/logout", Some(&token), None).await.status, 204);
    assert_eq!(h.call("GET", "/me", Some(&token), None).await.status, 401);
}

#[tokio::test]
async fn registration_follows_the_flag() {
    let closed = Harness::new(0.0, false);
    let r = closed.checked("POST", "/auth/register", None, Some(json!({"username": "eve", "password": "x"}))).await;
    assert_eq!(r.status, 403);

    let open = Harness::new(0.0, true);
    let r = open.checked("POST", "/auth/register", None, Some(json!({"username": "eve", "password": "x"}))).await;
    assert_eq!(r.status, 201);
    assert_eq!(r.json()["role"], "end_user");
    let again = open.checked("POST", "/auth/register", None, Some(json!({"username": "eve", "password": "y"}))).await;
    assert_eq!(again.status, 409);
    let bad = open.checked("POST", "/auth/register", None, Some(json!({"username": "Bad Name", "password": "y"}))).await;
    assert_eq!(bad.status, 422);
    let login = open.checked("POST", "/auth/login", None, Some(json!({"username": "eve", "password": "x"}))).await;
    assert_eq!(login.status, 200);
}

#[tokio::test]
async fn user_management() {
    let h = Harness::new(0.0, false);
    let admin = h.user("root", Role::Admin);
    let r = h.checked("POST", "/users", Some(&admin), Some(json!({"username": "bo", "password": "p", "role": "end_user"}))).await;
    assert_eq!(r.status, 201);
    let r = h.checked("POST", "/users", Some(&admin), Some(json!({"username": "bo", "password": "p", "role": "end_user"}))).await;
    assert_eq!(r.status, 409);
    let r = h.checked("PATCH", "/users/bo", Some(&admin), Some(json!({"role": "power_user"}))).await;
    assert_eq!(r.json()["role"], "power_user");
    assert_eq!(h.checked("GET", "/users/bo", Some(&admin), None).await.json()["role"], "power_user");
    assert_eq!(h.checked("GET", "/users", Some(&admin), None).await.json().as_array().unwrap().len(), 2);
    assert_eq!(h.checked("DELETE", "/users/root", Some(&admin), None).await.status, 409);
    assert_eq!(h.checked("DELETE", "/users/bo", Some(&admin), None).await.status, 204);
    assert_eq!(h.checked("GET", "/users/bo", Some(&admin), None).await.status, 404);
}

#[tokio::test]
async fn catalog_and_seeded_templates() {
    let h = Harness::new(0.0, false);
    let t = h.user("ed", Role::EndUser);
    let cat = h.checked("GET", "/catalog", Some(&t), None).await.json();
    let labs = cat.as_array().unwrap();
    assert_eq!(labs.len(), 5);
    let xrd = labs.iter().find(|l| l["method"] == "XRD").unwrap();
    assert_eq!(xrd["components"], json!(["LAMMPS", "debyer", "R"]));
    assert_eq!(cat, h.checked("GET", "/catalog", Some(&t), None).await.json());

    let all = h.checked("GET", "/templates", Some(&t), None).await.json();
    assert!(all.as_array().unwrap().iter().all(|e| e["published"] == true));
    assert_eq!(h.checked("GET", "/templates/general/1", Some(&t), None).await.status, 200);
    assert_eq!(h.checked("GET", "/templates/general/9", Some(&t), None).await.status, 404);
    assert_eq!(h.checked("GET", "/templates/nope", Some(&t), None).await.status, 404);
}

#[tokio::test]
async fn template_lifecycle() {
    let h = Harness::new(0.0, false);
    let pu = h.user("pat", Role::PowerUser);
    let eu = h.user("ed", Role::EndUser);
    let other = h.user("ola", Role::PowerUser);
    let body = json!({"name": "mine", "description": "d", "workflow": workflow_doc("general")});

    assert_eq!(h.checked("POST", "/templates", Some(&eu), Some(body.clone())).await.status, 403);
    let created = h.checked("POST", "/templates", Some(&pu), Some(body.clone())).await;
    assert_eq!(created.status, 201);
    assert_eq!(created.json()["version"], 1);
    assert_eq!(created.json()["published"], false);
    assert_eq!(h.checked("POST", "/templates", Some(&other), Some(body.clone())).await.status, 403);

    // drafts are invisible to others
    assert_eq!(h.checked("GET", "/templates/mine/1", Some(&eu), None).await.status, 404);
    let run = json!({"template": {"name": "mine", "version": 1}});
    assert_eq!(h.checked("POST", "/runs", Some(&eu), Some(run.clone())).await.status, 422);

    assert_eq!(h.checked("POST", "/templates/mine/1/publish", Some(&eu), None).await.status, 403);
    assert_eq!(h.checked("POST", "/templates/mine/1/publish", Some(&other), None).await.status, 404);
    let published = h.checked("POST", "/templates/mine/1/publish", Some(&pu), None).await;
    assert_eq!(published.status, 200);
    assert_eq!(published.json()["published"], true);
    assert_eq!(h.checked("POST", "/templates/mine/1/publish", Some(&pu), None).await.status, 409);
    let v2 = h.checked("POST", "/templates", Some(&pu), Some(body)).await;
    assert_eq!(v2.json()["version"], 2);
    let before = h.checked("GET", "/templates/mine/1", Some(&pu), None).await.bytes;
    assert_eq!(before, h.checked("GET", "/templates/mine/1", Some(&pu), None).await.bytes);

    let cycle = json!({
        "name": "broken",
        "workflow": {
            "graph": {
                "nodes": [
                    {"id": "a", "profile": "r", "ports": [
                        {"name": "i", "direction": "input", "data_class": "scalar"},
                        {"name": "o", "direction": "output", "data_class": "scalar"}]},
                    {"id": "b", "profile": "r", "ports": [
                        {"name": "i", "direction": "input", "data_class": "scalar"},
                        {"name": "o", "direction": "output", "data_class": "scalar"}]}
                ],
                "edges": [
                    {"from": "a", "from_port": "o", "to": "b", "to_port": "i"},
                    {"from": "b", "from_port": "o", "to": "a", "to_port": "i"}
                ]
            },
            "bindings": {"a": {"executable": "mock-r"}, "b": {"executable": "mock-r"}}
        }
    });
    assert_eq!(h.checked("POST", "/templates", Some(&pu), Some(cycle)).await.status, 422);
}

#[tokio::test]
async fn end_users_clone_and_run_their_drafts() {
    let h = Harness::new(0.0, false);
    let eu = h.user("ed", Role::EndUser);
    let c = h.checked("POST", "/templates/general/1/clone", Some(&eu), Some(json!({"name": "my-general"}))).await;
    assert_eq!(c.status, 201);
    assert_eq!(c.json()["owner"], "ed");
    assert_eq!(h.checked("POST", "/templates/my-general/1/publish", Some(&eu), None).await.status, 403);
    let run = h
        .checked("POST", "/runs", Some(&eu), Some(json!({"template": {"name": "my-general", "version": 1}, "seed": 1})))
        .await;
    assert_eq!(run.status, 201);
    let clash = h.checked("POST", "/templates/general/1/clone", Some(&eu), Some(json!({"name": "general"}))).await;
    assert_eq!(clash.status, 409);
}

#[tokio::test]
async fn sweep_runs_and_summary() {
    let h = Harness::new(0.0, false);
    let eu = h.user("ed", Role::EndUser);
    let body = json!({
        "template": {"name": "general", "version": 1},
        "sweep": {"axes": {"atoms": [840, 1680]}, "constants": {"temperature": 300}},
        "seed": 4
    });
    let r = h.checked("POST", "/runs", Some(&eu), Some(body)).await;
    assert_eq!(r.status, 201);
    let id = r.json()["id"].as_str().unwrap().to_string();
    assert_eq!(r.json()["jobs"].as_array().unwrap().len(), 12);
    let record = wait(&h, &id);
    assert_eq!(record.status, RunStatus::Completed);

    let summary = h.checked("GET", &format!("/runs/{id}/summary"), Some(&eu), None).await.json();
    assert_eq!(summary, serde_json::to_value(record.summary.as_ref().unwrap()).unwrap());
    assert_eq!(summary["counts"]["finished"], 12);

    let events = h.checked("GET", &format!("/runs/{id}/events"), Some(&eu), None).await.json();
    let n = events.as_array().unwrap().len();
    let tail = h.checked("GET", &format!("/runs/{id}/events?since=5"), Some(&eu), None).await.json();
    assert_eq!(tail.as_array().unwrap().len(), n - 5);
    let jobs = h.checked("GET", &format!("/runs/{id}/jobs"), Some(&eu), None).await.json();
    let job = jobs[0]["id"].as_str().unwrap();
    let per_job = h.checked("GET", &format!("/runs/{id}/jobs/{job}/events"), Some(&eu), None).await.json();
    assert!(per_job.as_array().unwrap().iter().all(|e| e["job"] == job));
    assert_eq!(h.checked("GET", &format!("/runs/{id}/jobs/nope/events"), Some(&eu), None).await.status, 404);

    let arts = h.checked("GET", &format!("/runs/{id}/artifacts"), Some(&eu), None).await.json();
    let a = &arts[0];
    let url = format!("/runs/{id}/artifacts/{}/{}", a["job"].as_str().unwrap(), a["port"].as_str().unwrap());
    assert_eq!(h.checked("GET", &url, Some(&eu), None).await.status, 404);

    let list = h.checked("GET", "/runs", Some(&eu), None).await.json();
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(h.checked("POST", &format!("/runs/{id}/cancel"), Some(&eu), None).await.status, 409);
    let again = h.checked("POST", &format!("/runs/{id}/resubmit"), Some(&eu), None).await;
    assert_eq!(again.status, 201);
    assert_ne!(again.json()["id"], id.as_str());
    assert_eq!(again.json()["sim"]["seed"], 4);
}

#[tokio::test]
async fn runs_are_private_to_their_submitter() {
    let h = Harness::new(0.0, false);
    let a = h.user("amy", Role::EndUser);
    let b = h.user("bob", Role::PowerUser);
    let admin = h.user("root", Role::Admin);
    let r = h.checked("POST", "/runs", Some(&a), Some(json!({"template": {"name": "general", "version": 1}}))).await;
    let id = r.json()["id"].as_str().unwrap().to_string();
    for path in [format!("/runs/{id}"), format!("/runs/{id}/summary"), format!("/runs/{id}/events")] {
        assert_eq!(h.checked("GET", &path, Some(&b), None).await.status, 403, "{path}");
        assert_eq!(h.checked("GET", &path, Some(&admin), None).await.status, 200, "{path}");
    }
    assert!(h.checked("GET", "/runs", Some(&b), None).await.json().as_array().unwrap().is_empty());
    assert_eq!(h.checked("GET", "/runs/nope", Some(&admin), None).await.status, 404);
}

#[tokio::test]
async fn idempotent_submission() {
    let h = Harness::new(0.0, false);
    let a = h.user("amy", Role::EndUser);
    let b = h.user("bob", Role::EndUser);
    let body = json!({"template": {"name": "general", "version": 1}});
    let key = [("idempotency-key", "k1")];
    let first = h.call_with("POST", "/runs", Some(&a), Some(body.clone()), &key).await;
    let second = h.call_with("POST", "/runs", Some(&a), Some(body.clone()), &key).await;
    let other = h.call_with("POST", "/runs", Some(&b), Some(body), &key).await;
    assert_eq!((first.status, second.status, other.status), (201, 200, 201));
    assert_eq!(first.json()["id"], second.json()["id"]);
    assert_ne!(first.json()["id"], other.json()["id"]);
    let listed = h.store().run_ids().unwrap();
    assert_eq!(listed.len(), 2);
}

#[tokio::test]
async fn bad_run_requests() {
    let h = Harness::new(0.0, false);
    let a = h.user("amy", Role::EndUser);
    let bad_axis = json!({"template": {"name": "general", "version": 1}, "sweep": {"axes": {"atoms": []}}});
    assert_eq!(h.checked("POST", "/runs", Some(&a), Some(bad_axis)).await.status, 422);
    let undeclared = json!({"template": {"name": "general", "version": 1}, "sweep": {"axes": {"x": [1]}}});
    assert_eq!(h.checked("POST", "/runs", Some(&a), Some(undeclared)).await.status, 422);
    let bad_id = json!({"template": {"name": "general", "version": 1}, "run_id": "../x"});
    assert_eq!(h.checked("POST", "/runs", Some(&a), Some(bad_id)).await.status, 422);
    let named = json!({"template": {"name": "general", "version": 1}, "run_id": "same"});
    assert_eq!(h.checked("POST", "/runs", Some(&a), Some(named.clone())).await.status, 201);
    assert_eq!(h.checked("POST", "/runs", Some(&a), Some(named)).await.status, 409);
    assert_eq!(h.call("GET", "/nowhere", Some(&a), None).await.status, 404);
}

#[tokio::test]
async fn cancel_a_running_simulation() {
    let h = Harness::new(1000.0, false);
    let a = h.user("amy", Role::EndUser);
    let r = h.checked("POST", "/runs", Some(&a), Some(json!({"template": {"name": "bnnt", "version": 1}}))).await;
    let id = r.json()["id"].as_str().unwrap().to_string();
    assert_eq!(h.checked("POST", &format!("/runs/{id}/cancel"), Some(&a), None).await.status, 202);
    let record = wait(&h, &id);
    assert_eq!(record.status, RunStatus::Cancelled);
    let summary = record.summary.unwrap();
    assert_eq!(summary.total, summary.counts.values().sum::<usize>());
    assert!(summary.count(gatehub::core::scheduler::JobState::Cancelled) > 0);
}

#[tokio::test]
async fn local_artifacts_download() {
    let h = Harness::new(0.0, false);
    let a = h.user("amy", Role::EndUser);
    let r = h
        .checked("POST", "/runs", Some(&a), Some(json!({"template": {"name": "general", "version": 1}, "backend": "local"})))
        .await;
    let id = r.json()["id"].as_str().unwrap().to_string();
    let record = wait(&h, &id);
    assert_eq!(record.status, RunStatus::Completed, "{:?}", record.error);
    assert_eq!(record.artifacts.len(), 6);
    for art in &record.artifacts {
        assert!(art.within_expected, "{}", art.path);
        let url = format!("/runs/{id}/artifacts/{}/{}", art.job, art.port);
        let reply = h.call("GET", &url, Some(&a), None).await;
        assert_eq!(reply.status, 200);
        assert_eq!(reply.bytes.len() as u64, art.bytes);
    }
    let sites = h.checked("GET", "/sites", Some(&a), None).await.json();
    assert_eq!(sites["local"][0]["name"], "local");
    assert_eq!(h.checked("GET", "/sites/occupancy", Some(&a), None).await.status, 200);
}
