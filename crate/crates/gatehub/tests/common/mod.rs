#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request};
use axum::Router;
use gatehub::auth::{token_digest, Role, User};
use gatehub::config::{bundled_local_sites, bundled_sim_sites};
use gatehub::local::LocalConfig;
use gatehub::runs::{ManagerConfig, RunManager};
use gatehub::service::{router, AppState};
use gatehub::store::Store;
use serde_json::Value;
use tower::ServiceExt;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn stub_dir() -> PathBuf {
    Path::new(env!("CARGO_BIN_EXE_mock-lammps")).parent().unwrap().to_path_buf()
}

pub fn gatehub_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_gatehub"))
}

fn load_json(rel: &str) -> Value {
    let text = std::fs::read_to_string(repo_root().join(rel)).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn api_schema() -> Value {
    load_json("docs/api.schema.json")
}

pub fn workflow_schema() -> Value {
    load_json("docs/workflow.schema.json")
}

/// Validates `instance` against `#/$defs/<def>` of `root` (or the root itself
/// when `def` is empty).
pub fn validate(root: &Value, def: &str, instance: &Value) -> Result<(), String> {
    let schema = if def.is_empty() {
        root.clone()
    } else {
        serde_json::json!({ "$defs": root["$defs"], "$ref": format!("#/$defs/{def}") })
    };
    let validator = jsonschema::validator_for(&schema).map_err(|e| format!("bad schema for {def}: {e}"))?;
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(format!("{def}: {}", errors.join("; ")))
    }
}

/// Endpoint entry of the API schema matching a concrete method and path.
pub fn endpoint<'a>(schema: &'a Value, method: &str, path: &str) -> Option<&'a Value> {
    let path = path.split('?').next().unwrap();
    let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
    schema["endpoints"].as_array()?.iter().find(|e| {
        let pattern: Vec<&str> = e["path"].as_str().unwrap().trim_matches('/').split('/').collect();
        e["method"] == method
            && pattern.len() == parts.len()
            && pattern.iter().zip(&parts).all(|(p, s)| p.starts_with('{') || p == s)
    })
}

/// Checks that `status` is documented for the endpoint and `body` fits its schema.
pub fn check_response(schema: &Value, method: &str, path: &str, status: u16, body: &Value) -> Result<(), String> {
    let ep = endpoint(schema, method, path).ok_or_else(|| format!("{method} {path}: not in the schema"))?;
    let responses = &ep["responses"];
    let Some(def) = responses.get(status.to_string()) else {
        return Err(format!("{method} {path}: undocumented status {status}"));
    };
    match def {
        Value::Null => Ok(()),
        Value::String(def) => validate(schema, def, body).map_err(|e| format!("{method} {path} {status}: {e}")),
        other => Err(format!("bad response entry {other}")),
    }
}

pub struct Reply {
    pub status: u16,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        if self.bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&self.bytes).unwrap_or(Value::Null)
        }
    }
}

pub fn manager_config(sim_ms_per_minute: f64) -> ManagerConfig {
    let mut local = LocalConfig::new("unused");
    local.base_dir = repo_root().join("workflows");
    local.stub_dir = Some(stub_dir());
    local.ms_per_minute = 0.0;
    ManagerConfig { sim_sites: bundled_sim_sites(), local_sites: bundled_local_sites(), sim_ms_per_minute, local }
}

pub struct Harness {
    pub dir: tempfile::TempDir,
    pub state: Arc<AppState>,
    pub app: Router,
    pub schema: Value,
}

impl Harness {
    pub fn new(sim_ms_per_minute: f64, allow_register: bool) -> Harness {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(Store::open(dir.path().join("store")).unwrap());
        let runs = RunManager::start(store, manager_config(sim_ms_per_minute)).unwrap();
        let state = Arc::new(AppState { runs, allow_register });
        let app = router(state.clone(), None);
        Harness { dir, state, app, schema: api_schema() }
    }

    pub fn store(&self) -> &Store {
        self.state.runs.store()
    }

    /// Creates a user with a live session and returns its bearer token.
    pub fn user(&self, name: &str, role: Role) -> String {
        if self.store().user(name).is_err() {
            self.store().create_user(User::new(name, role, "pw")).unwrap();
        }
        let token = format!("token-{name}-{}", gatehub::auth::random_hex(4));
        self.store().put_session(&token_digest(&token), name).unwrap();
        token
    }

    pub async fn call(&self, method: &str, path: &str, token: Option<&str>, body: Option<Value>) -> Reply {
        self.call_with(method, path, token, body, &[]).await
    }

    pub async fn call_with(
        &self,
        method: &str,
        path: &str,
        token: Option<&str>,
        body: Option<Value>,
        headers: &[(&str, &str)],
    ) -> Reply {
        let mut req = Request::builder().method(Method::from_bytes(method.as_bytes()).unwrap()).uri(format!("/api/v1{path}"));
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let req = match body {
            Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
            None => req.body(Body::empty()).unwrap(),
        };
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status().as_u16();
        let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
        Reply { status, bytes }
    }

    /// Like [`call`](Self::call), but also checks the reply against the API schema.
    pub async fn checked(&self, method: &str, path: &str, token: Option<&str>, body: Option<Value>) -> Reply {
        let reply = self.call(method, path, token, body).await;
        let is_json = !reply.bytes.is_empty() && serde_json::from_slice::<Value>(&reply.bytes).is_ok();
        if is_json || reply.bytes.is_empty() {
            if let Err(e) = check_response(&self.schema, method, path, reply.status, &reply.json()) {
                panic!("{e}");
            }
        }
        reply
    }
}
