//! REST service under `/api/v1`, plus the static web client under `/ui`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gatehub_core::scheduler::{JobState, RunSummary, TransitionRecord};
use gatehub_core::workflow::WorkflowDocument;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::auth::{allowed, random_hex, token_digest, valid_username, Action, Role, User};
use crate::runs::{CreateRun, RunError, RunManager};
use crate::store::{RunRecord, Store, StoreError, TemplateEntry};

pub struct AppState {
    pub runs: RunManager,
    pub allow_register: bool,
}

impl AppState {
    fn store(&self) -> &Store {
        self.runs.store()
    }
}

type Shared = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn forbidden() -> Self {
        Self::new(StatusCode::FORBIDDEN, "not permitted for this role")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownRun(_) | StoreError::UnknownTemplate { .. } | StoreError::UnknownUser(_) => {
                StatusCode::NOT_FOUND
            }
            StoreError::VersionConflict { .. } | StoreError::UserExists(_) => StatusCode::CONFLICT,
            StoreError::BadName(_) | StoreError::ValidationFailed(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Io { .. } | StoreError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        let status = match e {
            RunError::Store(inner) => return inner.into(),
            RunError::Unpublished(..) | RunError::Expand(_) | RunError::BadRunId(_) | RunError::BadPolicy(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            RunError::RunExists(_) | RunError::Ended(_) => StatusCode::CONFLICT,
            RunError::Driver(_) | RunError::Diverged(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// The authenticated caller.
pub struct Caller(pub User);

impl Caller {
    fn require(&self, action: Action) -> ApiResult<()> {
        if allowed(self.0.role, action) {
            Ok(())
        } else {
            Err(ApiError::forbidden())
        }
    }

    fn is_admin(&self) -> bool {
        self.0.role == Role::Admin
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get(header::AUTHORIZATION)?.to_str().ok()?.strip_prefix("Bearer ").map(str::trim)
}

impl FromRequestParts<Shared> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Shared) -> Result<Self, Self::Rejection> {
        let unauthorized = || ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid token");
        let token = bearer(&parts.headers).ok_or_else(unauthorized)?;
        let session = state.store().session(&token_digest(token))?.ok_or_else(unauthorized)?;
        let user = state.store().user(&session.username).map_err(|_| unauthorized())?;
        Ok(Caller(user))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Credentials {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NewUser {
    pub username: String,
    pub password: String,
    pub role: Role,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct UserPatch {
    #[serde(default)]
    pub role: Option<Role>,
    #[serde(default)]
    pub password: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UserView {
    pub username: String,
    pub role: Role,
}

impl From<&User> for UserView {
    fn from(u: &User) -> Self {
        UserView { username: u.username.clone(), role: u.role }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NewTemplate {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub workflow: WorkflowDocument,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CloneRequest {
    pub name: String,
}

#[derive(Debug, Default, Deserialize)]
pub struct EventQuery {
    /// Skip this many records.
    #[serde(default)]
    pub since: usize,
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn login(State(s): State<Shared>, Json(c): Json<Credentials>) -> ApiResult<Json<serde_json::Value>> {
    let user = s.store().user(&c.username).ok().filter(|u| u.verify(&c.password));
    let user = user.ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "bad username or password"))?;
    let token = random_hex(32);
    s.store().put_session(&token_digest(&token), &user.username)?;
    Ok(Json(json!({ "token": token, "username": user.username, "role": user.role })))
}

async fn register(State(s): State<Shared>, Json(c): Json<Credentials>) -> ApiResult<(StatusCode, Json<UserView>)> {
    if !s.allow_register {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "self-registration is disabled"));
    }
    create_user_inner(&s, NewUser { username: c.username, password: c.password, role: Role::EndUser })
}

async fn logout(State(s): State<Shared>, headers: HeaderMap, _c: Caller) -> ApiResult<StatusCode> {
    if let Some(token) = bearer(&headers) {
        s.store().drop_session(&token_digest(token))?;
    }
    Ok(StatusCode::NO_CONTENT)
}

async fn me(c: Caller) -> Json<UserView> {
    Json(UserView::from(&c.0))
}

fn create_user_inner(s: &AppState, u: NewUser) -> ApiResult<(StatusCode, Json<UserView>)> {
    if !valid_username(&u.username) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid username {:?}", u.username)));
    }
    if u.password.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "password is empty"));
    }
    let user = User::new(&u.username, u.role, &u.password);
    s.store().create_user(user.clone())?;
    Ok((StatusCode::CREATED, Json(UserView::from(&user))))
}

async fn list_users(State(s): State<Shared>, c: Caller) -> ApiResult<Json<Vec<UserView>>> {
    c.require(Action::ManageUsers)?;
    Ok(Json(s.store().users()?.iter().map(UserView::from).collect()))
}

async fn create_user(
    State(s): State<Shared>,
    c: Caller,
    Json(u): Json<NewUser>,
) -> ApiResult<(StatusCode, Json<UserView>)> {
    c.require(Action::ManageUsers)?;
    create_user_inner(&s, u)
}

async fn get_user(State(s): State<Shared>, c: Caller, Path(name): Path<String>) -> ApiResult<Json<UserView>> {
    c.require(Action::ManageUsers)?;
    Ok(Json(UserView::from(&s.store().user(&name)?)))
}

async fn patch_user(
    State(s): State<Shared>,
    c: Caller,
    Path(name): Path<String>,
    Json(p): Json<UserPatch>,
) -> ApiResult<Json<UserView>> {
    c.require(Action::ManageUsers)?;
    let mut user = s.store().user(&name)?;
    if let Some(role) = p.role {
        user.role = role;
    }
    if let Some(pw) = p.password {
        user.set_password(&pw);
    }
    s.store().update_user(user.clone())?;
    Ok(Json(UserView::from(&user)))
}

async fn delete_user(State(s): State<Shared>, c: Caller, Path(name): Path<String>) -> ApiResult<StatusCode> {
    c.require(Action::ManageUsers)?;
    if name == c.0.username {
        return Err(ApiError::new(StatusCode::CONFLICT, "cannot delete the calling account"));
    }
    s.store().delete_user(&name)?;
    Ok(StatusCode::NO_CONTENT)
}

fn can_see_template(c: &Caller, t: &TemplateEntry) -> bool {
    t.published || t.owner == c.0.username || c.is_admin()
}

async fn list_templates(State(s): State<Shared>, c: Caller) -> ApiResult<Json<Vec<TemplateEntry>>> {
    c.require(Action::ListTemplates)?;
    Ok(Json(s.store().templates()?.into_iter().filter(|t| can_see_template(&c, t)).collect()))
}

async fn template_versions(
    State(s): State<Shared>,
    c: Caller,
    Path(name): Path<String>,
) -> ApiResult<Json<Vec<TemplateEntry>>> {
    c.require(Action::ReadTemplate)?;
    let versions: Vec<TemplateEntry> =
        s.store().template_versions(&name)?.into_iter().filter(|t| can_see_template(&c, t)).collect();
    if versions.is_empty() {
        return Err(StoreError::UnknownTemplate { name, version: None }.into());
    }
    Ok(Json(versions))
}

fn visible_template(s: &AppState, c: &Caller, name: &str, version: u32) -> ApiResult<TemplateEntry> {
    let t = s.store().template(name, version)?;
    if !can_see_template(c, &t) {
        return Err(StoreError::UnknownTemplate { name: name.into(), version: Some(version) }.into());
    }
    Ok(t)
}

async fn get_template(
    State(s): State<Shared>,
    c: Caller,
    Path((name, version)): Path<(String, u32)>,
) -> ApiResult<Json<TemplateEntry>> {
    c.require(Action::ReadTemplate)?;
    Ok(Json(visible_template(&s, &c, &name, version)?))
}

async fn create_template(
    State(s): State<Shared>,
    c: Caller,
    Json(t): Json<NewTemplate>,
) -> ApiResult<(StatusCode, Json<TemplateEntry>)> {
    c.require(Action::CreateTemplate)?;
    if let Some(existing) = s.store().template_versions(&t.name)?.first() {
        if existing.owner != c.0.username && !c.is_admin() {
            return Err(ApiError::new(StatusCode::FORBIDDEN, format!("template {} belongs to {}", t.name, existing.owner)));
        }
    }
    let workflow = t.workflow.bind().map_err(StoreError::from)?;
    let entry = s.store().create_template(&t.name, &t.description, workflow, &c.0.username)?;
    Ok((StatusCode::CREATED, Json(entry)))
}

async fn publish_template(
    State(s): State<Shared>,
    c: Caller,
    Path((name, version)): Path<(String, u32)>,
) -> ApiResult<Json<TemplateEntry>> {
    c.require(Action::PublishTemplate)?;
    let t = visible_template(&s, &c, &name, version)?;
    if t.owner != c.0.username && !c.is_admin() {
        return Err(ApiError::forbidden());
    }
    Ok(Json(s.store().publish(&name, version)?))
}

async fn clone_template(
    State(s): State<Shared>,
    c: Caller,
    Path((name, version)): Path<(String, u32)>,
    Json(req): Json<CloneRequest>,
) -> ApiResult<(StatusCode, Json<TemplateEntry>)> {
    c.require(Action::CloneTemplate)?;
    let source = visible_template(&s, &c, &name, version)?;
    if let Some(existing) = s.store().template_versions(&req.name)?.first() {
        if existing.owner != c.0.username && !c.is_admin() {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("template {} belongs to {}", req.name, existing.owner)));
        }
    }
    let description = format!("clone of {name} v{version}");
    let entry = s.store().create_template(&req.name, &description, source.workflow, &c.0.username)?;
    Ok((StatusCode::CREATED, Json(entry)))
}

async fn catalog(State(s): State<Shared>, c: Caller) -> ApiResult<Json<serde_json::Value>> {
    c.require(Action::ReadCatalog)?;
    Ok(Json(json!(s.store().catalog()?)))
}

fn visible_run(s: &AppState, c: &Caller, id: &str) -> ApiResult<RunRecord> {
    let r = s.runs.get(id)?;
    if r.submitter != c.0.username && !c.is_admin() {
        return Err(ApiError::forbidden());
    }
    Ok(r)
}

async fn create_run(
    State(s): State<Shared>,
    c: Caller,
    headers: HeaderMap,
    Json(req): Json<CreateRun>,
) -> ApiResult<(StatusCode, Json<RunRecord>)> {
    c.require(Action::CreateRun)?;
    let key = headers.get("idempotency-key").and_then(|v| v.to_str().ok());
    let runs = s.runs.clone();
    let user = c.0.username.clone();
    let key = key.map(str::to_string);
    let (record, created) = tokio::task::spawn_blocking(move || runs.create(&user, req, key.as_deref()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(record)))
}

async fn list_runs(State(s): State<Shared>, c: Caller) -> ApiResult<Json<serde_json::Value>> {
    c.require(Action::ReadRun)?;
    let runs: Vec<_> =
        s.runs.list()?.into_iter().filter(|r| c.is_admin() || r.submitter == c.0.username).collect();
    Ok(Json(json!(runs)))
}

async fn get_run(State(s): State<Shared>, c: Caller, Path(id): Path<String>) -> ApiResult<Json<RunRecord>> {
    c.require(Action::ReadRun)?;
    Ok(Json(visible_run(&s, &c, &id)?))
}

async fn run_summary(State(s): State<Shared>, c: Caller, Path(id): Path<String>) -> ApiResult<Json<RunSummary>> {
    c.require(Action::ReadRun)?;
    let r = visible_run(&s, &c, &id)?;
    Ok(Json(r.summary.clone().unwrap_or_else(|| RunSummary::from_jobs(&r.id, &r.jobs))))
}

/// New run with the same template, sweep and settings as an earlier one.
async fn resubmit_run(
    State(s): State<Shared>,
    c: Caller,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<(StatusCode, Json<RunRecord>)> {
    c.require(Action::CreateRun)?;
    let r = visible_run(&s, &c, &id)?;
    let req = CreateRun {
        template: r.template,
        sweep: Some(r.sweep),
        backend: Some(r.backend),
        sim: r.sim,
        policy: Some(r.policy),
        ..CreateRun::default()
    };
    create_run(State(s), c, headers, Json(req)).await
}

async fn cancel_run(State(s): State<Shared>, c: Caller, Path(id): Path<String>) -> ApiResult<StatusCode> {
    c.require(Action::CancelRun)?;
    visible_run(&s, &c, &id)?;
    s.runs.cancel(&id)?;
    Ok(StatusCode::ACCEPTED)
}

async fn run_events(
    State(s): State<Shared>,
    c: Caller,
    Path(id): Path<String>,
    Query(q): Query<EventQuery>,
) -> ApiResult<Json<Vec<TransitionRecord>>> {
    c.require(Action::ReadRun)?;
    visible_run(&s, &c, &id)?;
    Ok(Json(s.runs.events(&id)?.into_iter().skip(q.since).collect()))
}

#[derive(Debug, Serialize)]
struct JobView {
    id: String,
    node: String,
    params: std::collections::BTreeMap<String, String>,
    state: JobState,
    attempt: u32,
    segment: u32,
    queue: Option<String>,
    depends_on: Vec<String>,
}

async fn run_jobs(State(s): State<Shared>, c: Caller, Path(id): Path<String>) -> ApiResult<Json<Vec<JobView>>> {
    c.require(Action::ReadRun)?;
    let r = visible_run(&s, &c, &id)?;
    Ok(Json(
        r.jobs
            .iter()
            .map(|j| JobView {
                id: j.id.to_string(),
                node: j.node_id.clone(),
                params: j.params.clone(),
                state: j.state,
                attempt: j.attempt,
                segment: j.segment,
                queue: j.assignment.as_ref().map(|a| a.queue.to_string()),
                depends_on: j.depends_on.iter().map(ToString::to_string).collect(),
            })
            .collect(),
    ))
}

async fn job_events(
    State(s): State<Shared>,
    c: Caller,
    Path((id, job)): Path<(String, String)>,
) -> ApiResult<Json<Vec<TransitionRecord>>> {
    c.require(Action::ReadRun)?;
    let r = visible_run(&s, &c, &id)?;
    if !r.jobs.iter().any(|j| j.id.as_str() == job) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {job}")));
    }
    Ok(Json(s.runs.events(&id)?.into_iter().filter(|e| e.job.as_str() == job).collect()))
}

async fn artifacts(State(s): State<Shared>, c: Caller, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    c.require(Action::ReadRun)?;
    Ok(Json(json!(visible_run(&s, &c, &id)?.artifacts)))
}

async fn download(
    State(s): State<Shared>,
    c: Caller,
    Path((id, job, port)): Path<(String, String, String)>,
) -> ApiResult<Response> {
    c.require(Action::DownloadArtifact)?;
    let r = visible_run(&s, &c, &id)?;
    let art = r
        .artifacts
        .iter()
        .find(|a| a.job.as_str() == job && a.port == port)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no artifact {job}/{port}")))?;
    if art.path.starts_with("sim://") {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "simulated artifacts have no content"));
    }
    let path = PathBuf::from(&art.path);
    let runs_dir = s.store().runs_dir();
    if !path.starts_with(&runs_dir) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "artifact is outside the store"));
    }
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact").to_string();
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{name}\"")),
        ],
        bytes,
    )
        .into_response())
}

async fn sites(State(s): State<Shared>, c: Caller) -> ApiResult<Json<serde_json::Value>> {
    c.require(Action::ReadSites)?;
    let cfg = s.runs.config();
    Ok(Json(json!({ "sim": cfg.sim_sites, "local": cfg.local_sites })))
}

async fn occupancy(State(s): State<Shared>, c: Caller) -> ApiResult<Json<serde_json::Value>> {
    c.require(Action::ReadSites)?;
    Ok(Json(json!(s.runs.occupancy())))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint")
}

pub fn router(state: Shared, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/auth/login", post(login))
        .route("/auth/register", post(register))
        .route("/auth/logout", post(logout))
        .route("/me", get(me))
        .route("/users", get(list_users).post(create_user))
        .route("/users/{name}", get(get_user).patch(patch_user).delete(delete_user))
        .route("/templates", get(list_templates).post(create_template))
        .route("/templates/{name}", get(template_versions))
        .route("/templates/{name}/{version}", get(get_template))
        .route("/templates/{name}/{version}/publish", post(publish_template))
        .route("/templates/{name}/{version}/clone", post(clone_template))
        .route("/catalog", get(catalog))
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/summary", get(run_summary))
        .route("/runs/{id}/cancel", post(cancel_run))
        .route("/runs/{id}/resubmit", post(resubmit_run))
        .route("/runs/{id}/events", get(run_events))
        .route("/runs/{id}/jobs", get(run_jobs))
        .route("/runs/{id}/jobs/{job}/events", get(job_events))
        .route("/runs/{id}/artifacts", get(artifacts))
        .route("/runs/{id}/artifacts/{job}/{port}", get(download))
        .route("/sites", get(sites))
        .route("/sites/occupancy", get(occupancy))
        .fallback(not_found)
        .with_state(state);
    let mut app = Router::new().nest("/api/v1", api).route("/", get(|| async { Redirect::temporary("/ui/") }));
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    app
}

/// Binds and serves until ctrl-c.
pub async fn serve(addr: &str, state: Shared, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
