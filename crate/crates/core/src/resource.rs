//! Compute sites, batch queues, component resource profiles and the linear
//! runtime scaling rule.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::workflow::DataClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationClass {
    Server,
    Cluster,
    Dci,
}

/// Short: up to 10 minutes. Medium: up to an hour. Long: a day or more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeClass {
    Short,
    Medium,
    Long,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceProfile {
    pub name: String,
    pub location_class: LocationClass,
    pub runtime_class: RuntimeClass,
    /// Minutes at `reference_scale`.
    pub base_runtime: f64,
    /// MB at `reference_scale`.
    pub base_memory: f64,
    pub reference_scale: f64,
    pub output_class: DataClass,
    #[serde(default = "one")]
    pub default_cores: u32,
}

fn one() -> u32 {
    1
}

impl ResourceProfile {
    pub fn validate(&self) -> Result<(), ResourceError> {
        if !(self.base_runtime > 0.0) {
            return Err(ResourceError::InvalidProfile { name: self.name.clone(), field: "base_runtime" });
        }
        if !(self.reference_scale > 0.0) {
            return Err(ResourceError::InvalidProfile { name: self.name.clone(), field: "reference_scale" });
        }
        if !(self.base_memory >= 0.0) {
            return Err(ResourceError::InvalidProfile { name: self.name.clone(), field: "base_memory" });
        }
        if self.default_cores == 0 {
            return Err(ResourceError::InvalidProfile { name: self.name.clone(), field: "default_cores" });
        }
        Ok(())
    }

    /// Built-in profiles for the six standard components of the MD workflow.
    /// LAMMPS is anchored at 180 minutes for 2520 atoms, the slope fitted to
    /// the NTU HPCC queue table (1/14 minute per atom).
    pub fn builtin() -> Vec<ResourceProfile> {
        use DataClass::*;
        use LocationClass::*;
        use RuntimeClass::*;
        let p = |name: &str, location_class, runtime_class, base_runtime, base_memory, output_class, default_cores| {
            ResourceProfile {
                name: name.into(),
                location_class,
                runtime_class,
                base_runtime,
                base_memory,
                reference_scale: 2520.0,
                output_class,
                default_cores,
            }
        };
        alloc::vec![
            p("lammps", Cluster, Long, 180.0, 2048.0, TextHuge, 4),
            p("r", Server, Short, 5.0, 256.0, ImageSmall, 1),
            p("pizza", Server, Short, 5.0, 512.0, TextHuge, 1),
            p("atomeye", Cluster, Medium, 30.0, 512.0, ImageSmall, 1),
            p("ffmpeg", Cluster, Short, 5.0, 256.0, VideoSmall, 1),
            p("debyer", Cluster, Long, 1440.0, 1024.0, TextMedium, 1),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    /// Minutes.
    pub runtime: f64,
    /// MB.
    pub memory: f64,
    pub cores: u32,
}

impl Estimate {
    pub fn new(runtime: f64, cores: u32) -> Self {
        Estimate { runtime, memory: 0.0, cores }
    }

    pub fn inflate(self, factor: f64) -> Self {
        Estimate { runtime: self.runtime * factor, memory: self.memory * factor, cores: self.cores }
    }
}

/// Runtime (and memory) proportional to model size, no constant term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingModel {
    /// Minutes per unit of scale.
    pub coefficient: f64,
    /// MB per unit of scale, when known.
    #[serde(default)]
    pub memory_coefficient: Option<f64>,
}

impl ScalingModel {
    pub fn runtime(&self, scale: f64) -> f64 {
        self.coefficient * scale
    }

    /// Profile whose reference point lies on this model's line.
    pub fn profile(&self, name: &str, reference_scale: f64, output_class: DataClass) -> ResourceProfile {
        ResourceProfile {
            name: name.into(),
            location_class: LocationClass::Cluster,
            runtime_class: RuntimeClass::Long,
            base_runtime: self.runtime(reference_scale),
            base_memory: self.memory_coefficient.unwrap_or(0.0) * reference_scale,
            reference_scale,
            output_class,
            default_cores: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResourceError {
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("calibration needs at least one observation")]
    NoObservations,
    #[error("observation ({0}, {1}) must have positive scale and runtime")]
    BadObservation(f64, f64),
    #[error("profile {name}: {field} out of range")]
    InvalidProfile { name: String, field: &'static str },
}

/// Scales a profile linearly to `scale` units.
pub fn estimate_requirements(profile: &ResourceProfile, scale: f64) -> Result<Estimate, ResourceError> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(ResourceError::NonPositiveScale(scale));
    }
    let ratio = scale / profile.reference_scale;
    Ok(Estimate {
        runtime: profile.base_runtime * ratio,
        memory: profile.base_memory * ratio,
        cores: profile.default_cores,
    })
}

/// Least-squares fit through the origin: coefficient = Σ(s·t) / Σ(s²).
pub fn calibrate(observations: &[(f64, f64)]) -> Result<ScalingModel, ResourceError> {
    if observations.is_empty() {
        return Err(ResourceError::NoObservations);
    }
    let (mut st, mut ss) = (0.0, 0.0);
    for &(s, t) in observations {
        if !(s > 0.0 && t > 0.0) {
            return Err(ResourceError::BadObservation(s, t));
        }
        st += s * t;
        ss += s * s;
    }
    Ok(ScalingModel { coefficient: st / ss, memory_coefficient: None })
}

/// Queue walltime in minutes; infinite for queues without a limit.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Walltime(pub f64);

impl Walltime {
    pub const UNLIMITED: Walltime = Walltime(f64::INFINITY);

    pub fn minutes(self) -> f64 {
        self.0
    }

    pub fn is_unlimited(self) -> bool {
        self.0.is_infinite()
    }

    /// Whole simulated seconds, `None` when unlimited.
    pub fn seconds(self) -> Option<u64> {
        (!self.is_unlimited()).then(|| libm::round(self.0 * 60.0) as u64)
    }
}

impl fmt::Display for Walltime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_unlimited() {
            return f.write_str("unlimited");
        }
        let secs = libm::round(self.0 * 60.0) as u64;
        if secs % 86_400 == 0 {
            write!(f, "{}d", secs / 86_400)
        } else if secs % 3_600 == 0 {
            write!(f, "{}h", secs / 3_600)
        } else if secs % 60 == 0 {
            write!(f, "{}m", secs / 60)
        } else {
            write!(f, "{secs}s")
        }
    }
}

impl Serialize for Walltime {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Walltime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        if text == "unlimited" {
            return Ok(Walltime::UNLIMITED);
        }
        parse_duration(&text).map(|secs| Walltime(secs as f64 / 60.0)).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid duration {0:?}: expected <int><s|m|h|d>")]
pub struct DurationError(pub String);

/// Parses `<int><s|m|h|d>` into seconds.
pub fn parse_duration(text: &str) -> Result<u64, DurationError> {
    let err = || DurationError(text.to_string());
    let unit = text.chars().last().ok_or_else(err)?;
    let factor = match unit {
        's' => 1,
        'm' => 60,
        'h' => 3_600,
        'd' => 86_400,
        _ => return Err(err()),
    };
    let digits = &text[..text.len() - 1];
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err());
    }
    digits.parse::<u64>().ok().and_then(|n| n.checked_mul(factor)).ok_or_else(err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Queue {
    pub name: String,
    pub walltime: Walltime,
    pub cores_per_user: u32,
    /// Owning site; filled from the enclosing site when loading configs.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub site: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_memory_mb: Option<f64>,
}

impl Queue {
    pub fn new(name: &str, walltime_minutes: f64, cores_per_user: u32) -> Self {
        Queue {
            name: name.into(),
            walltime: Walltime(walltime_minutes),
            cores_per_user,
            site: String::new(),
            max_memory_mb: None,
        }
    }

    pub fn queue_ref(&self) -> QueueRef {
        QueueRef { site: self.site.clone(), queue: self.name.clone() }
    }
}

/// `site/queue` address of a queue.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueueRef {
    pub site: String,
    pub queue: String,
}

impl QueueRef {
    pub fn new(site: &str, queue: &str) -> Self {
        QueueRef { site: site.into(), queue: queue.into() }
    }

    pub fn parse(text: &str) -> Option<QueueRef> {
        let (site, queue) = text.split_once('/')?;
        (!site.is_empty() && !queue.is_empty()).then(|| QueueRef::new(site, queue))
    }
}

impl fmt::Display for QueueRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.site, self.queue)
    }
}

impl Serialize for QueueRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QueueRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        QueueRef::parse(&text).ok_or_else(|| serde::de::Error::custom(format!("expected site/queue, got {text:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    LocalServer,
    PbsCluster,
    SimulatedCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub name: String,
    pub kind: SiteKind,
    pub total_cores: u32,
    pub queues: Vec<Queue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("site {site}{}: {field} {message}", queue.as_ref().map(|q| format!(" queue {q}")).unwrap_or_default())]
pub struct InvariantViolation {
    pub site: String,
    pub queue: Option<String>,
    pub field: &'static str,
    pub message: String,
}

impl Site {
    /// Fills each queue's site reference and checks site invariants.
    pub fn normalize(mut self) -> Result<Site, InvariantViolation> {
        let violation = |queue: Option<&str>, field, message: &str| InvariantViolation {
            site: self.name.clone(),
            queue: queue.map(Into::into),
            field,
            message: message.into(),
        };
        if self.name.is_empty() || self.name.contains('/') {
            return Err(violation(None, "name", "must be non-empty and contain no '/'"));
        }
        if self.total_cores == 0 {
            return Err(violation(None, "total_cores", "must be at least 1"));
        }
        let mut names = BTreeSet::new();
        for q in &self.queues {
            if q.name.is_empty() || q.name.contains('/') {
                return Err(violation(Some(&q.name), "name", "must be non-empty and contain no '/'"));
            }
            if !names.insert(q.name.as_str()) {
                return Err(violation(Some(&q.name), "name", "is duplicated"));
            }
            if !(q.walltime.0 > 0.0) {
                return Err(violation(Some(&q.name), "walltime", "must be positive"));
            }
            if q.cores_per_user == 0 {
                return Err(violation(Some(&q.name), "cores_per_user", "must be at least 1"));
            }
        }
        let name = self.name.clone();
        for q in &mut self.queues {
            q.site = name.clone();
        }
        Ok(self)
    }

    pub fn queue(&self, name: &str) -> Option<&Queue> {
        self.queues.iter().find(|q| q.name == name)
    }
}

/// Checks site-name uniqueness and normalizes every site.
pub fn normalize_sites(sites: Vec<Site>) -> Result<Vec<Site>, InvariantViolation> {
    let mut names = BTreeSet::new();
    let mut out = Vec::with_capacity(sites.len());
    for site in sites {
        if !names.insert(site.name.clone()) {
            return Err(InvariantViolation {
                site: site.name,
                queue: None,
                field: "name",
                message: "is duplicated".into(),
            });
        }
        out.push(site.normalize()?);
    }
    Ok(out)
}

pub fn find_queue<'a>(sites: &'a [Site], at: &QueueRef) -> Option<(&'a Site, &'a Queue)> {
    let site = sites.iter().find(|s| s.name == at.site)?;
    Some((site, site.queue(&at.queue)?))
}

/// Whether a job of `cores` cores can ever run in `queue` of `site`.
pub fn admits_cores(site: &Site, queue: &Queue, est: &Estimate, enforce_memory: bool) -> bool {
    est.cores <= queue.cores_per_user
        && est.cores <= site.total_cores
        && (!enforce_memory || queue.max_memory_mb.is_none_or(|m| est.memory <= m))
}

/// Queues whose walltime covers `est.runtime × safety` and whose per-user
/// core cap admits the job, ordered by walltime then name.
pub fn feasible_queues<'a>(est: &Estimate, sites: &'a [Site], safety: f64) -> Vec<&'a Queue> {
    let needed = est.runtime * safety;
    let mut out: Vec<&Queue> = sites
        .iter()
        .flat_map(|site| site.queues.iter().map(move |q| (site, q)))
        .filter(|(site, q)| needed <= q.walltime.0 && admits_cores(site, q, est, false))
        .map(|(_, q)| q)
        .collect();
    out.sort_by(|a, b| {
        a.walltime
            .0
            .total_cmp(&b.walltime.0)
            .then_with(|| a.name.cmp(&b.name))
            .then_with(|| a.site.cmp(&b.site))
    });
    out
}

/// The NTU HPCC queue table used throughout the tests and bundled configs.
pub fn ntu_hpcc() -> Site {
    Site {
        name: "ntu-hpcc".into(),
        kind: SiteKind::PbsCluster,
        total_cores: 256,
        queues: alloc::vec![
            Queue::new("ku-small", 90.0, 32),
            Queue::new("ku-single", 8.0 * 1440.0, 4),
            Queue::new("ku-normal", 180.0, 32),
            Queue::new("kh-large", 120.0, 128),
        ],
    }
    .normalize()
    .expect("static site is valid")
}
