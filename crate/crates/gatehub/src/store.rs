//! Single-directory file store.
//!
//! ```text
//! store/users.json
//! store/sessions.json
//! store/catalog.json
//! store/templates/<name>/<version>.json
//! store/runs/<id>/record.json
//! store/runs/<id>/events.ndjson
//! store/runs/<id>/<job>/...          (local job working directories)
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use gatehub_core::driver::ArtifactRecord;
use gatehub_core::resource::Site;
use gatehub_core::scheduler::{Job, Policy, RunSummary, TransitionRecord};
use gatehub_core::sim::{BackendKind, SimConfig};
use gatehub_core::workflow::{BindError, SweepSpec, Workflow, WorkflowDocument, WorkflowStatus};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::{Role, User};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("unknown template {name}{}", version.map(|v| format!(" version {v}")).unwrap_or_default())]
    UnknownTemplate { name: String, version: Option<u32> },
    #[error("template {name} version {version} is already published")]
    VersionConflict { name: String, version: u32 },
    #[error("invalid template name {0:?}")]
    BadName(String),
    #[error("validation failed: {0}")]
    ValidationFailed(#[from] BindError),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("user {0} already exists")]
    UserExists(String),
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TemplateRef {
    pub name: String,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub name: String,
    pub version: u32,
    pub owner: String,
    pub published: bool,
    #[serde(default)]
    pub description: String,
    pub workflow: Workflow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualLab {
    pub name: String,
    pub method: String,
    pub components: Vec<String>,
    pub template: TemplateRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Cancelled,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub template: TemplateRef,
    pub sweep: SweepSpec,
    pub submitter: String,
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    pub policy: Policy,
    pub sites: Vec<Site>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    pub created_at: u64,
    #[serde(default)]
    pub ended_at: Option<u64>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Jobs as expanded while running; final states once the run ends.
    pub jobs: Vec<Job>,
    #[serde(default)]
    pub summary: Option<RunSummary>,
    #[serde(default)]
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub username: String,
    pub created_at: u64,
}

const SEED: [(&str, &str); 7] = [
    ("general", include_str!("../../../workflows/general.workflow.json")),
    ("bnnt", include_str!("../../../workflows/bnnt.workflow.json")),
    ("tem", include_str!("../../../workflows/labs/tem.workflow.json")),
    ("stress-strain", include_str!("../../../workflows/labs/stress-strain.workflow.json")),
    ("cn-rdf", include_str!("../../../workflows/labs/cn-rdf.workflow.json")),
    ("xrd", include_str!("../../../workflows/labs/xrd.workflow.json")),
    ("nd", include_str!("../../../workflows/labs/nd.workflow.json")),
];

const LABS: [(&str, &str, &[&str]); 5] = [
    ("tem", "TEM", &["LAMMPS", "AtomEye"]),
    ("stress-strain", "AFM/stress-strain", &["LAMMPS", "R"]),
    ("cn-rdf", "CN/RDF", &["LAMMPS", "R"]),
    ("xrd", "XRD", &["LAMMPS", "debyer", "R"]),
    ("nd", "ND", &["LAMMPS", "debyer", "R"]),
];

/// Bundled workflow documents by template name.
pub fn bundled_workflows() -> impl Iterator<Item = (&'static str, WorkflowDocument)> {
    SEED.iter().map(|(name, text)| (*name, serde_json::from_str(text).expect("bundled workflow parses")))
}

pub fn valid_template_name(name: &str) -> bool {
    let mut bytes = name.bytes();
    bytes.next().is_some_and(|b| b.is_ascii_lowercase() || b.is_ascii_digit())
        && bytes.all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_')
        && name.len() <= 64
}

pub struct Store {
    root: PathBuf,
    write: Mutex<()>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.into(), source }
}

impl Store {
    /// Opens (creating if needed) a store and seeds the bundled templates and
    /// catalog on first use.
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, StoreError> {
        let root = root.into();
        for sub in ["templates", "runs"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let root = fs::canonicalize(&root).map_err(io_err(&root))?;
        let store = Store { root, write: Mutex::new(()) };
        if !store.root.join("catalog.json").exists() {
            store.seed()?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    fn seed(&self) -> Result<(), StoreError> {
        for (name, doc) in bundled_workflows() {
            if self.template_versions(name)?.is_empty() {
                let mut wf = doc.bind()?;
                wf.owner = "system".into();
                wf.status = WorkflowStatus::Published;
                let entry = TemplateEntry {
                    name: name.into(),
                    version: 1,
                    owner: "system".into(),
                    published: true,
                    description: format!("bundled {name} workflow"),
                    workflow: wf,
                };
                self.write_json(&self.template_path(name, 1), &entry)?;
            }
        }
        let catalog: Vec<VirtualLab> = LABS
            .iter()
            .map(|(name, method, components)| VirtualLab {
                name: (*name).into(),
                method: (*method).into(),
                components: components.iter().map(|c| (*c).into()).collect(),
                template: TemplateRef { name: (*name).into(), version: 1 },
            })
            .collect();
        self.write_json(&self.root.join("catalog.json"), &catalog)
    }

    fn read_json<T: DeserializeOwned>(&self, path: &Path) -> Result<T, StoreError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt { path: path.into(), message: e.to_string() })
    }

    fn read_json_or<T: DeserializeOwned>(&self, path: &Path, default: T) -> Result<T, StoreError> {
        if path.exists() {
            self.read_json(path)
        } else {
            Ok(default)
        }
    }

    /// Atomic replace through a temporary file.
    fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), StoreError> {
        let _guard = self.write.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_vec_pretty(value).expect("store values serialize");
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    // users and sessions

    pub fn users(&self) -> Result<Vec<User>, StoreError> {
        self.read_json_or(&self.root.join("users.json"), Vec::new())
    }

    pub fn user(&self, name: &str) -> Result<User, StoreError> {
        self.users()?.into_iter().find(|u| u.username == name).ok_or_else(|| StoreError::UnknownUser(name.into()))
    }

    pub fn create_user(&self, user: User) -> Result<(), StoreError> {
        let mut users = self.users()?;
        if users.iter().any(|u| u.username == user.username) {
            return Err(StoreError::UserExists(user.username));
        }
        users.push(user);
        self.write_json(&self.root.join("users.json"), &users)
    }

    pub fn update_user(&self, user: User) -> Result<(), StoreError> {
        let mut users = self.users()?;
        let slot = users
            .iter_mut()
            .find(|u| u.username == user.username)
            .ok_or_else(|| StoreError::UnknownUser(user.username.clone()))?;
        *slot = user;
        self.write_json(&self.root.join("users.json"), &users)
    }

    pub fn delete_user(&self, name: &str) -> Result<(), StoreError> {
        let mut users = self.users()?;
        let before = users.len();
        users.retain(|u| u.username != name);
        if users.len() == before {
            return Err(StoreError::UnknownUser(name.into()));
        }
        self.write_json(&self.root.join("users.json"), &users)?;
        let mut sessions = self.sessions()?;
        sessions.retain(|_, s| s.username != name);
        self.write_json(&self.root.join("sessions.json"), &sessions)
    }

    /// Creates the first admin account when no users exist yet.
    pub fn ensure_admin(&self, username: &str, password: &str) -> Result<bool, StoreError> {
        if !self.users()?.is_empty() {
            return Ok(false);
        }
        self.create_user(User::new(username, Role::Admin, password))?;
        Ok(true)
    }

    fn sessions(&self) -> Result<BTreeMap<String, Session>, StoreError> {
        self.read_json_or(&self.root.join("sessions.json"), BTreeMap::new())
    }

    pub fn put_session(&self, digest: &str, username: &str) -> Result<(), StoreError> {
        let mut sessions = self.sessions()?;
        sessions.insert(digest.into(), Session { username: username.into(), created_at: unix_now() });
        self.write_json(&self.root.join("sessions.json"), &sessions)
    }

    pub fn session(&self, digest: &str) -> Result<Option<Session>, StoreError> {
        Ok(self.sessions()?.remove(digest))
    }

    pub fn drop_session(&self, digest: &str) -> Result<(), StoreError> {
        let mut sessions = self.sessions()?;
        if sessions.remove(digest).is_some() {
            self.write_json(&self.root.join("sessions.json"), &sessions)?;
        }
        Ok(())
    }

    // templates

    fn template_path(&self, name: &str, version: u32) -> PathBuf {
        self.root.join("templates").join(name).join(format!("{version}.json"))
    }

    pub fn template_versions(&self, name: &str) -> Result<Vec<TemplateEntry>, StoreError> {
        let dir = self.root.join("templates").join(name);
        if !valid_template_name(name) || !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut versions: Vec<u32> = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name();
            if let Some(v) = name.to_str().and_then(|n| n.strip_suffix(".json")).and_then(|n| n.parse().ok()) {
                versions.push(v);
            }
        }
        versions.sort_unstable();
        versions.into_iter().map(|v| self.read_json(&self.template_path(name, v))).collect()
    }

    pub fn template(&self, name: &str, version: u32) -> Result<TemplateEntry, StoreError> {
        let path = self.template_path(name, version);
        if !valid_template_name(name) || !path.exists() {
            return Err(StoreError::UnknownTemplate { name: name.into(), version: Some(version) });
        }
        self.read_json(&path)
    }

    /// Every version of every template, by name then version.
    pub fn templates(&self) -> Result<Vec<TemplateEntry>, StoreError> {
        let dir = self.root.join("templates");
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        let mut out = Vec::new();
        for n in names {
            out.extend(self.template_versions(&n)?);
        }
        Ok(out)
    }

    /// Stores a new draft version (one past the highest existing).
    pub fn create_template(
        &self,
        name: &str,
        description: &str,
        mut workflow: Workflow,
        owner: &str,
    ) -> Result<TemplateEntry, StoreError> {
        if !valid_template_name(name) {
            return Err(StoreError::BadName(name.into()));
        }
        let version = self.template_versions(name)?.last().map_or(1, |e| e.version + 1);
        workflow.owner = owner.into();
        workflow.status = WorkflowStatus::Draft;
        workflow.name = name.into();
        let entry = TemplateEntry {
            name: name.into(),
            version,
            owner: owner.into(),
            published: false,
            description: description.into(),
            workflow,
        };
        self.write_json(&self.template_path(name, version), &entry)?;
        Ok(entry)
    }

    /// Freezes a draft after revalidating it.
    pub fn publish(&self, name: &str, version: u32) -> Result<TemplateEntry, StoreError> {
        let mut entry = self.template(name, version)?;
        if entry.published {
            return Err(StoreError::VersionConflict { name: name.into(), version });
        }
        entry.workflow.revalidate()?;
        entry.published = true;
        entry.workflow.status = WorkflowStatus::Published;
        self.write_json(&self.template_path(name, version), &entry)?;
        Ok(entry)
    }

    pub fn catalog(&self) -> Result<Vec<VirtualLab>, StoreError> {
        self.read_json(&self.root.join("catalog.json"))
    }

    // runs

    fn run_dir(&self, id: &str) -> PathBuf {
        self.runs_dir().join(id)
    }

    pub fn save_run(&self, record: &RunRecord) -> Result<(), StoreError> {
        self.write_json(&self.run_dir(&record.id).join("record.json"), record)
    }

    pub fn run(&self, id: &str) -> Result<RunRecord, StoreError> {
        let path = self.run_dir(id).join("record.json");
        if id.contains(['/', '\\']) || id.starts_with('.') || !path.exists() {
            return Err(StoreError::UnknownRun(id.into()));
        }
        self.read_json(&path)
    }

    pub fn run_ids(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.runs_dir();
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("record.json").exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn events_path(&self, id: &str) -> PathBuf {
        self.run_dir(id).join("events.ndjson")
    }

    pub fn append_events(&self, id: &str, records: &[TransitionRecord]) -> Result<(), StoreError> {
        if records.is_empty() {
            return Ok(());
        }
        let path = self.events_path(id);
        let text: String = records.iter().map(TransitionRecord::to_json_line).collect();
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        f.write_all(text.as_bytes()).map_err(io_err(&path))?;
        f.flush().map_err(io_err(&path))
    }

    /// Reads the complete lines of the event log. A torn final line (a write
    /// in progress, or one cut short by a crash) is skipped.
    pub fn read_events(&self, id: &str) -> Result<Vec<TransitionRecord>, StoreError> {
        let path = self.events_path(id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        let complete = text.rfind('\n').map_or(0, |i| i + 1);
        text[..complete]
            .lines()
            .enumerate()
            .map(|(i, line)| {
                serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                    path: path.clone(),
                    message: format!("line {}: {e}", i + 1),
                })
            })
            .collect()
    }

    /// Cuts a torn final line off the event log so appends start clean.
    pub fn repair_events(&self, id: &str) -> Result<(), StoreError> {
        let path = self.events_path(id);
        let Ok(text) = fs::read(&path) else { return Ok(()) };
        let complete = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
            f.set_len(complete as u64).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gatehub_core::scheduler::JobState;

    #[test]
    fn seeds_catalog_and_templates() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let catalog = store.catalog().unwrap();
        assert_eq!(catalog.len(), 5);
        for lab in &catalog {
            let t = store.template(&lab.template.name, lab.template.version).unwrap();
            assert!(t.published);
        }
        assert_eq!(store.catalog().unwrap(), catalog);
        assert_eq!(store.templates().unwrap().len(), SEED.len());
    }

    #[test]
    fn versions_and_publish() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let wf = store.template("tem", 1).unwrap().workflow;
        let a = store.create_template("mine", "", wf.clone(), "pat").unwrap();
        let b = store.create_template("mine", "", wf, "pat").unwrap();
        assert_eq!((a.version, b.version), (1, 2));
        let published = store.publish("mine", 2).unwrap();
        assert!(published.published);
        assert!(matches!(store.publish("mine", 2), Err(StoreError::VersionConflict { .. })));
        let text = fs::read(dir.path().join("templates/mine/2.json")).unwrap();
        let again: TemplateEntry = serde_json::from_slice(&text).unwrap();
        assert_eq!(again, published);
        assert_eq!(serde_json::to_vec_pretty(&again).unwrap(), text);
        assert!(matches!(store.create_template("Bad Name", "", again.workflow, "pat"), Err(StoreError::BadName(_))));
        assert!(matches!(store.template("nope", 1), Err(StoreError::UnknownTemplate { .. })));
    }

    #[test]
    fn event_log_drops_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        fs::create_dir_all(store.runs_dir().join("r1")).unwrap();
        let rec = TransitionRecord { ts: 1, job: "a".into(), from: JobState::Created, to: JobState::Eligible, detail: "".into() };
        store.append_events("r1", &[rec.clone(), rec.clone()]).unwrap();
        let mut f = OpenOptions::new().append(true).open(store.events_path("r1")).unwrap();
        f.write_all(b"{\"ts\":2,\"jo").unwrap();
        assert_eq!(store.read_events("r1").unwrap().len(), 2);
        store.repair_events("r1").unwrap();
        let text = fs::read_to_string(store.events_path("r1")).unwrap();
        assert!(text.ends_with("}\n"));
        assert!(matches!(store.run("r1"), Err(StoreError::UnknownRun(_))));
        assert!(matches!(store.run("../x"), Err(StoreError::UnknownRun(_))));
    }

    #[test]
    fn users_and_sessions() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(store.ensure_admin("root", "pw").unwrap());
        assert!(!store.ensure_admin("root", "pw").unwrap());
        store.create_user(User::new("ann", Role::EndUser, "x")).unwrap();
        assert!(matches!(store.create_user(User::new("ann", Role::EndUser, "x")), Err(StoreError::UserExists(_))));
        store.put_session("d1", "ann").unwrap();
        assert_eq!(store.session("d1").unwrap().unwrap().username, "ann");
        store.delete_user("ann").unwrap();
        assert!(store.session("d1").unwrap().is_none());
    }
}
