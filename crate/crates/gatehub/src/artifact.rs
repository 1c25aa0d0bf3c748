//! Output discovery and size classification.

use std::fs;
use std::path::{Path, PathBuf};

use gatehub_core::driver::ArtifactRecord;
use gatehub_core::scheduler::{JobId, OutputSpec};
use gatehub_core::workflow::{classify_size, DataClass, SizeReport};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("missing output: {0}")]
pub struct MissingArtifact(pub String);

/// Size class check of a file on disk.
pub fn classify_output(path: &Path, class: DataClass, desk_scale: f64) -> Result<SizeReport, MissingArtifact> {
    let meta = fs::metadata(path).map_err(|_| MissingArtifact(path.display().to_string()))?;
    if !meta.is_file() {
        return Err(MissingArtifact(path.display().to_string()));
    }
    Ok(classify_size(meta.len(), class, desk_scale))
}

/// Finds the file for an output name or glob pattern inside `dir`. Several
/// matches resolve to the first in lexical order.
pub fn find_output(dir: &Path, pattern: &str) -> Option<PathBuf> {
    let full = dir.join(pattern);
    if !pattern.contains(['*', '?', '[']) {
        return full.is_file().then_some(full);
    }
    let escaped = glob::Pattern::escape(&dir.to_string_lossy());
    let mut hits: Vec<PathBuf> =
        glob::glob(&format!("{escaped}/{pattern}")).ok()?.filter_map(Result::ok).filter(|p| p.is_file()).collect();
    hits.sort();
    hits.into_iter().next()
}

/// Matches every declared output of a finished job to a file in `dir` and
/// classifies it. The first missing output is reported by its declared name.
pub fn stage_and_collect(
    job: &JobId,
    outputs: &[OutputSpec],
    dir: &Path,
    desk_scale: f64,
) -> Result<Vec<ArtifactRecord>, MissingArtifact> {
    let mut out = Vec::with_capacity(outputs.len());
    for o in outputs {
        let path = find_output(dir, &o.file).ok_or_else(|| MissingArtifact(o.file.clone()))?;
        let report = classify_output(&path, o.data_class, desk_scale)?;
        out.push(ArtifactRecord {
            job: job.clone(),
            port: o.port.clone(),
            path: path.display().to_string(),
            bytes: report.bytes,
            data_class: o.data_class,
            within_expected: report.within_expected,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(port: &str, file: &str) -> OutputSpec {
        OutputSpec { port: port.into(), file: file.into(), data_class: DataClass::Scalar }
    }

    #[test]
    fn collects_and_reports_missing() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "42").unwrap();
        fs::write(dir.path().join("frame-002.png"), "x").unwrap();
        fs::write(dir.path().join("frame-001.png"), "x").unwrap();
        let job = JobId::from("j");
        let got = stage_and_collect(&job, &[spec("a", "a.txt"), spec("img", "frame-*.png")], dir.path(), 1.0).unwrap();
        assert_eq!(got.len(), 2);
        assert!(got[1].path.ends_with("frame-001.png"));
        assert!(got.iter().all(|r| r.within_expected));
        let err = stage_and_collect(&job, &[spec("p", "plot.png")], dir.path(), 1.0).unwrap_err();
        assert_eq!(err.to_string(), "missing output: plot.png");
    }

    #[test]
    fn classify_flags_oversize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big");
        fs::write(&path, vec![0u8; 2048]).unwrap();
        assert!(!classify_output(&path, DataClass::Scalar, 1.0).unwrap().within_expected);
        assert!(classify_output(&dir.path().join("nope"), DataClass::Scalar, 1.0).is_err());
    }
}
