//! Blocking HTTP client for the service API.

use gatehub_core::driver::ArtifactRecord;
use gatehub_core::scheduler::{RunSummary, TransitionRecord};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runs::CreateRun;
use crate::store::RunRecord;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(String),
    #[error("HTTP {status}: {message}")]
    Api { status: u16, message: String },
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Login {
    pub token: String,
    pub username: String,
    pub role: crate::auth::Role,
}

pub struct Client {
    agent: ureq::Agent,
    base: String,
    token: Option<String>,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Client { agent, base: base.trim_end_matches('/').to_string(), token }
    }

    pub fn set_token(&mut self, token: Option<String>) {
        self.token = token;
    }

    fn url(&self, path: &str) -> String {
        format!("{}/api/v1{path}", self.base)
    }

    fn finish(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<Vec<u8>, ClientError> {
        let mut resp = resp.map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(1 << 30)
            .read_to_vec()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if status >= 400 {
            let message = serde_json::from_slice::<serde_json::Value>(&body)
                .ok()
                .and_then(|v| v.get("error").and_then(|m| m.as_str()).map(str::to_string))
                .unwrap_or_else(|| String::from_utf8_lossy(&body).into_owned());
            return Err(ClientError::Api { status, message });
        }
        Ok(body)
    }

    fn decode<T: DeserializeOwned>(body: &[u8]) -> Result<T, ClientError> {
        serde_json::from_slice(body).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn get_bytes(&self, path: &str) -> Result<Vec<u8>, ClientError> {
        let mut req = self.agent.get(self.url(path));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        Self::finish(req.call())
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::decode(&self.get_bytes(path)?)
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
        headers: &[(&str, &str)],
    ) -> Result<T, ClientError> {
        let mut req = self.agent.post(self.url(path));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let body = Self::finish(req.send_json(body))?;
        if body.is_empty() {
            return Self::decode(b"null");
        }
        Self::decode(&body)
    }

    pub fn login(&mut self, username: &str, password: &str) -> Result<Login, ClientError> {
        let body = serde_json::json!({ "username": username, "password": password });
        let login: Login = self.post("/auth/login", &body, &[])?;
        self.token = Some(login.token.clone());
        Ok(login)
    }

    pub fn submit(&self, req: &CreateRun, idempotency_key: Option<&str>) -> Result<RunRecord, ClientError> {
        let headers: Vec<(&str, &str)> = idempotency_key.map(|k| ("Idempotency-Key", k)).into_iter().collect();
        self.post("/runs", req, &headers)
    }

    pub fn run(&self, id: &str) -> Result<RunRecord, ClientError> {
        self.get(&format!("/runs/{id}"))
    }

    pub fn summary(&self, id: &str) -> Result<RunSummary, ClientError> {
        self.get(&format!("/runs/{id}/summary"))
    }

    pub fn events(&self, id: &str) -> Result<Vec<TransitionRecord>, ClientError> {
        self.get(&format!("/runs/{id}/events"))
    }

    pub fn cancel(&self, id: &str) -> Result<(), ClientError> {
        let _: serde_json::Value = self.post(&format!("/runs/{id}/cancel"), &serde_json::json!({}), &[])?;
        Ok(())
    }

    pub fn artifacts(&self, id: &str) -> Result<Vec<ArtifactRecord>, ClientError> {
        self.get(&format!("/runs/{id}/artifacts"))
    }

    pub fn download(&self, id: &str, job: &str, port: &str) -> Result<Vec<u8>, ClientError> {
        self.get_bytes(&format!("/runs/{id}/artifacts/{job}/{port}"))
    }
}
