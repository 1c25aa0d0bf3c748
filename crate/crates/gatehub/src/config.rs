//! Loading site and workflow files.

use std::fs;
use std::path::{Path, PathBuf};

use gatehub_core::resource::{normalize_sites, InvariantViolation, Site};
use gatehub_core::workflow::{BindError, Workflow, WorkflowDocument};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}: {source}")]
    Invariant { path: PathBuf, source: InvariantViolation },
    #[error("{path}: {source}")]
    Bind { path: PathBuf, source: BindError },
}

/// On-disk site configuration: `{"sites": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteFile {
    pub sites: Vec<Site>,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.into(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn parse_sites(path: &Path, text: &str) -> Result<Vec<Site>, ConfigError> {
    let file: SiteFile = parse(path, text)?;
    normalize_sites(file.sites).map_err(|source| ConfigError::Invariant { path: path.into(), source })
}

/// Reads and checks a site file.
pub fn load_sites(path: &Path) -> Result<Vec<Site>, ConfigError> {
    parse_sites(path, &read(path)?)
}

pub fn load_workflow_document(path: &Path) -> Result<WorkflowDocument, ConfigError> {
    parse(path, &read(path)?)
}

/// Reads a workflow file and binds it against the built-in profiles.
pub fn load_workflow(path: &Path) -> Result<Workflow, ConfigError> {
    load_workflow_document(path)?.bind().map_err(|source| ConfigError::Bind { path: path.into(), source })
}

/// The bundled cluster description used for simulation.
pub fn bundled_sim_sites() -> Vec<Site> {
    parse_sites(Path::new("ntu-hpcc.json"), include_str!("../../../sites/ntu-hpcc.json")).expect("bundled sites are valid")
}

/// The bundled single-machine site used for local runs.
pub fn bundled_local_sites() -> Vec<Site> {
    parse_sites(Path::new("local.json"), include_str!("../../../sites/local.json")).expect("bundled sites are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("sites.json")
    }

    #[test]
    fn parses_durations_and_fills_site() {
        let sites = parse_sites(
            p(),
            r#"{"sites":[{"name":"c","kind":"pbs_cluster","total_cores":8,
                "queues":[{"name":"q","walltime":"8d","cores_per_user":4}]}]}"#,
        )
        .unwrap();
        assert_eq!(sites[0].queues[0].walltime.0, 8.0 * 1440.0);
        assert_eq!(sites[0].queues[0].site, "c");
    }

    #[test]
    fn zero_walltime_and_duplicates_are_invariant_errors() {
        let zero = r#"{"sites":[{"name":"c","kind":"pbs_cluster","total_cores":8,
            "queues":[{"name":"q","walltime":"0m","cores_per_user":4}]}]}"#;
        assert!(matches!(parse_sites(p(), zero), Err(ConfigError::Invariant { .. })));
        let dup = r#"{"sites":[{"name":"c","kind":"pbs_cluster","total_cores":8,
            "queues":[{"name":"q","walltime":"1m","cores_per_user":4},{"name":"q","walltime":"2m","cores_per_user":4}]}]}"#;
        let err = parse_sites(p(), dup).unwrap_err();
        assert!(err.to_string().contains("duplicated"), "{err}");
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse_sites(p(), "{\"sites\": [\n  {\"name\": 3}]}").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
        let bad_unit = r#"{"sites":[{"name":"c","kind":"pbs_cluster","total_cores":8,
            "queues":[{"name":"q","walltime":"90x","cores_per_user":4}]}]}"#;
        assert!(parse_sites(p(), bad_unit).unwrap_err().to_string().contains("90x"));
    }
}
