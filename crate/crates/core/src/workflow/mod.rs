//! Component graphs, node bindings, workflows and parameter-sweep expansion.

mod classify;
mod graph;
mod sweep;
pub mod template;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use classify::{classify_size, SizeReport, DESK_SCALE};
pub use graph::{
    is_valid_node_id, topological_order, validate_graph, ComponentGraph, ComponentNode, CycleError, DataClass,
    Direction, Edge, Port, ValidationReport, Violation,
};
pub use sweep::{Axes, SweepSpec, SweepValue};

use crate::resource::{estimate_requirements, QueueRef, ResourceError, ResourceProfile};
use crate::scheduler::{InputSource, Job, JobId, JobSpec, JobState, OutputSpec, DEFAULT_MAX_ATTEMPTS};
use template::{placeholders, substitute, TemplateError};

/// How one graph node is turned into a command line.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeBinding {
    /// Command path or bundled stub name.
    pub executable: String,
    #[serde(default)]
    pub fixed_args: Vec<String>,
    /// Argument templates with `${param}` placeholders.
    #[serde(default)]
    pub variable_args: Vec<String>,
    /// Input port → file path template, for ports not fed by an edge.
    #[serde(default)]
    pub input_files: BTreeMap<String, String>,
    /// Output port → produced file name template. Defaults to the port name.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    /// Model size template fed to the profile's scaling rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cores: Option<u32>,
    #[serde(default)]
    pub checkpointable: bool,
    /// Manually selected queue as `site/queue`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue: Option<String>,
}

impl NodeBinding {
    pub fn new(executable: &str) -> Self {
        NodeBinding { executable: executable.into(), ..Default::default() }
    }

    fn templates(&self) -> impl Iterator<Item = &str> {
        self.fixed_args
            .iter()
            .chain(&self.variable_args)
            .chain(self.input_files.values())
            .chain(self.outputs.values())
            .chain(self.env.values())
            .chain(self.scale.iter())
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkflowStatus {
    #[default]
    Draft,
    Published,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workflow {
    #[serde(default)]
    pub name: String,
    pub graph: ComponentGraph,
    pub bindings: BTreeMap<String, NodeBinding>,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub profiles: BTreeMap<String, ResourceProfile>,
    #[serde(default)]
    pub owner: String,
    #[serde(default)]
    pub status: WorkflowStatus,
}

/// The on-disk workflow file: graph, bindings and sweep, plus optional
/// profile overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowDocument {
    #[serde(default)]
    pub name: String,
    pub graph: ComponentGraph,
    #[serde(default)]
    pub bindings: BTreeMap<String, NodeBinding>,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub profiles: Vec<ResourceProfile>,
}

impl WorkflowDocument {
    /// Binds the document against the built-in profiles plus its own overrides.
    pub fn bind(self) -> Result<Workflow, BindError> {
        let mut profiles: BTreeMap<String, ResourceProfile> =
            ResourceProfile::builtin().into_iter().map(|p| (p.name.clone(), p)).collect();
        for p in self.profiles {
            p.validate()?;
            profiles.insert(p.name.clone(), p);
        }
        let mut wf = bind_workflow_with(self.graph, self.bindings, self.sweep, profiles)?;
        wf.name = self.name;
        Ok(wf)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BindError {
    #[error("graph is invalid: {0}")]
    InvalidGraph(ValidationReport),
    #[error("node {0} has no binding")]
    UnboundNode(String),
    #[error("binding for unknown node {0}")]
    UnknownNode(String),
    #[error("node {0}: executable is empty")]
    EmptyExecutable(String),
    #[error("unknown placeholder {0:?}")]
    UnknownPlaceholder(String),
    #[error("node {node}: {source}")]
    BadTemplate { node: String, source: TemplateError },
    #[error("node {node}: unknown {direction:?} port {port}")]
    UnknownPort { node: String, port: String, direction: Direction },
    #[error("node {node}: input port {port} is fed by an edge and cannot also take a file")]
    InputConflict { node: String, port: String },
    #[error("node {node}: unknown resource profile {profile}")]
    UnknownProfile { node: String, profile: String },
    #[error("node {node}: queue {queue:?} is not of the form site/queue")]
    BadQueue { node: String, queue: String },
    #[error("parameter {0} is both an axis and a constant")]
    ParamConflict(String),
    #[error(transparent)]
    Resource(#[from] ResourceError),
}

/// Binds with the built-in component profiles.
pub fn bind_workflow(
    graph: ComponentGraph,
    bindings: BTreeMap<String, NodeBinding>,
    sweep: SweepSpec,
) -> Result<Workflow, BindError> {
    let profiles = ResourceProfile::builtin().into_iter().map(|p| (p.name.clone(), p)).collect();
    bind_workflow_with(graph, bindings, sweep, profiles)
}

/// Checks that every node is bound, every placeholder is declared, ports and
/// profiles resolve, and returns a draft workflow.
pub fn bind_workflow_with(
    graph: ComponentGraph,
    bindings: BTreeMap<String, NodeBinding>,
    sweep: SweepSpec,
    profiles: BTreeMap<String, ResourceProfile>,
) -> Result<Workflow, BindError> {
    let report = validate_graph(&graph);
    if !report.is_clean() {
        return Err(BindError::InvalidGraph(report));
    }
    if let Some(name) = sweep.axes.names().find(|n| sweep.constants.contains_key(*n)) {
        return Err(BindError::ParamConflict(name.into()));
    }
    for id in bindings.keys() {
        if graph.node(id).is_none() {
            return Err(BindError::UnknownNode(id.clone()));
        }
    }
    for node in &graph.nodes {
        let binding = bindings.get(&node.id).ok_or_else(|| BindError::UnboundNode(node.id.clone()))?;
        if binding.executable.trim().is_empty() {
            return Err(BindError::EmptyExecutable(node.id.clone()));
        }
        for t in binding.templates() {
            let names = placeholders(t).map_err(|source| BindError::BadTemplate { node: node.id.clone(), source })?;
            if let Some(name) = names.into_iter().find(|n| !sweep.declares(n)) {
                return Err(BindError::UnknownPlaceholder(name.into()));
            }
        }
        for port in binding.input_files.keys() {
            check_port(node, port, Direction::Input)?;
            if graph.edges.iter().any(|e| e.to == node.id && e.to_port == *port) {
                return Err(BindError::InputConflict { node: node.id.clone(), port: port.clone() });
            }
        }
        for port in binding.outputs.keys() {
            check_port(node, port, Direction::Output)?;
        }
        if !profiles.contains_key(&node.profile_ref) {
            return Err(BindError::UnknownProfile { node: node.id.clone(), profile: node.profile_ref.clone() });
        }
        if let Some(q) = &binding.queue {
            if QueueRef::parse(q).is_none() {
                return Err(BindError::BadQueue { node: node.id.clone(), queue: q.clone() });
            }
        }
    }
    // keep only the profiles the graph uses
    let profiles = profiles.into_iter().filter(|(name, _)| graph.nodes.iter().any(|n| n.profile_ref == *name)).collect();
    Ok(Workflow {
        name: String::new(),
        graph,
        bindings,
        sweep,
        profiles,
        owner: String::new(),
        status: WorkflowStatus::Draft,
    })
}

fn check_port(node: &ComponentNode, port: &str, direction: Direction) -> Result<(), BindError> {
    match node.port(port) {
        Some(p) if p.direction == direction => Ok(()),
        _ => Err(BindError::UnknownPort { node: node.id.clone(), port: port.into(), direction }),
    }
}

impl Workflow {
    /// Re-runs binding checks on an already assembled workflow.
    pub fn revalidate(&self) -> Result<(), BindError> {
        bind_workflow_with(self.graph.clone(), self.bindings.clone(), self.sweep.clone(), self.profiles.clone()).map(|_| ())
    }

    /// Same workflow with the sweep replaced (used when end users configure a
    /// published template).
    pub fn with_sweep(&self, sweep: SweepSpec) -> Result<Workflow, BindError> {
        let mut wf = bind_workflow_with(self.graph.clone(), self.bindings.clone(), sweep, self.profiles.clone())?;
        wf.name = self.name.clone();
        wf.owner = self.owner.clone();
        wf.status = self.status;
        Ok(wf)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExpandError {
    #[error("sweep axis {0} has no values")]
    EmptyAxis(String),
    #[error(transparent)]
    Bind(#[from] BindError),
    #[error("node {node}: scale {value:?} is not a positive number")]
    BadScale { node: String, value: String },
    #[error("node {node}: {source}")]
    Estimate { node: String, source: ResourceError },
}

/// Jobs of one workflow run: one per node per sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSet {
    pub run_id: String,
    pub jobs: Vec<Job>,
}

impl JobSet {
    pub fn dependency_map(&self) -> BTreeMap<&JobId, &[JobId]> {
        self.jobs.iter().map(|j| (&j.id, j.depends_on.as_slice())).collect()
    }

    pub fn job(&self, id: &JobId) -> Option<&Job> {
        self.jobs.iter().find(|j| &j.id == id)
    }
}

/// Deterministic job id: node id plus a hash of run, node and sweep point.
pub fn job_id(run_id: &str, node: &str, point: &[(String, String)]) -> JobId {
    let mut h = Sha256::new();
    h.update(run_id.as_bytes());
    h.update([0]);
    h.update(node.as_bytes());
    for (k, v) in point {
        h.update([0]);
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
    }
    let digest = h.finalize();
    let mut id = String::with_capacity(node.len() + 13);
    id.push_str(node);
    id.push('-');
    for b in &digest[..6] {
        id.push_str(&format!("{b:02x}"));
    }
    JobId(id)
}

/// Expands the sweep into jobs. Points are enumerated with the last axis
/// varying fastest; within a point, nodes follow topological order.
pub fn expand_sweep(workflow: &Workflow, run_id: &str) -> Result<JobSet, ExpandError> {
    if let Some((name, _)) = workflow.sweep.axes.0.iter().find(|(_, v)| v.is_empty()) {
        return Err(ExpandError::EmptyAxis(name.clone()));
    }
    workflow.revalidate()?;
    let order = topological_order(&workflow.graph).map_err(|_| {
        ExpandError::Bind(BindError::InvalidGraph(validate_graph(&workflow.graph)))
    })?;
    let constants: BTreeMap<&str, String> =
        workflow.sweep.constants.iter().map(|(k, v)| (k.as_str(), v.to_string())).collect();

    let mut jobs = Vec::with_capacity(workflow.sweep.axes.points() * order.len());
    for point in workflow.sweep.points() {
        let ids: BTreeMap<&str, JobId> = order.iter().map(|n| (n.as_str(), job_id(run_id, n, &point))).collect();
        let lookup = |name: &str| -> Option<&str> {
            point
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, v)| v.as_str())
                .or_else(|| constants.get(name).map(String::as_str))
        };
        let subst = |node: &str, t: &str| -> Result<String, ExpandError> {
            substitute(t, lookup).map_err(|source| {
                ExpandError::Bind(BindError::BadTemplate { node: node.into(), source })
            })
        };
        for node_id in &order {
            let node = workflow.graph.node(node_id).expect("ordered node exists");
            let binding = &workflow.bindings[node_id];
            let profile = &workflow.profiles[&node.profile_ref];

            let mut args = Vec::with_capacity(binding.fixed_args.len() + binding.variable_args.len());
            for t in binding.fixed_args.iter().chain(&binding.variable_args) {
                args.push(subst(node_id, t)?);
            }
            let mut env = BTreeMap::new();
            for (k, t) in &binding.env {
                env.insert(k.clone(), subst(node_id, t)?);
            }
            let mut inputs = Vec::new();
            let mut depends_on = Vec::new();
            for port in node.inputs() {
                if let Some(edge) = workflow.graph.edges.iter().find(|e| e.to == *node_id && e.to_port == port.name) {
                    let upstream = ids[edge.from.as_str()].clone();
                    if !depends_on.contains(&upstream) {
                        depends_on.push(upstream.clone());
                    }
                    inputs.push(InputSource::Upstream {
                        port: port.name.clone(),
                        job: upstream,
                        from_port: edge.from_port.clone(),
                    });
                } else if let Some(t) = binding.input_files.get(&port.name) {
                    inputs.push(InputSource::File { port: port.name.clone(), path: subst(node_id, t)? });
                }
            }
            let mut outputs = Vec::new();
            for port in node.outputs() {
                let file = match binding.outputs.get(&port.name) {
                    Some(t) => subst(node_id, t)?,
                    None => port.name.clone(),
                };
                outputs.push(OutputSpec { port: port.name.clone(), file, data_class: port.data_class });
            }

            let scale = match &binding.scale {
                None => profile.reference_scale,
                Some(t) => {
                    let text = subst(node_id, t)?;
                    text.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| *v > 0.0 && v.is_finite())
                        .ok_or(ExpandError::BadScale { node: node_id.clone(), value: text })?
                }
            };
            let mut estimate = estimate_requirements(profile, scale)
                .map_err(|source| ExpandError::Estimate { node: node_id.clone(), source })?;
            if let Some(cores) = binding.cores {
                estimate.cores = cores.max(1);
            }

            jobs.push(Job {
                id: ids[node_id.as_str()].clone(),
                run_id: run_id.into(),
                node_id: node_id.clone(),
                params: point.iter().cloned().collect(),
                user: workflow.owner.clone(),
                spec: JobSpec {
                    executable: binding.executable.clone(),
                    args,
                    env,
                    inputs,
                    outputs,
                    checkpointable: binding.checkpointable,
                    pinned_queue: binding.queue.as_deref().and_then(QueueRef::parse),
                },
                base_estimate: estimate,
                estimate,
                state: JobState::Created,
                assignment: None,
                segment: 1,
                attempt: 1,
                max_attempts: DEFAULT_MAX_ATTEMPTS,
                history: Vec::new(),
                depends_on,
            });
        }
    }
    Ok(JobSet { run_id: run_id.into(), jobs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn chain_graph() -> ComponentGraph {
        ComponentGraph {
            nodes: vec![
                ComponentNode::new(
                    "lammps",
                    "lammps",
                    vec![Port::input("script", DataClass::Scalar), Port::output("dump", DataClass::TextHuge)],
                ),
                ComponentNode::new(
                    "r",
                    "r",
                    vec![Port::input("data", DataClass::TextHuge), Port::output("plot", DataClass::ImageSmall)],
                ),
            ],
            edges: vec![Edge::new("lammps", "dump", "r", "data")],
        }
    }

    fn bindings() -> BTreeMap<String, NodeBinding> {
        let mut lammps = NodeBinding::new("mock-lammps");
        lammps.fixed_args = vec!["--minutes".into(), "1".into()];
        lammps.variable_args = vec!["--atoms".into(), "${atoms}".into(), "temp=${T}".into()];
        lammps.input_files.insert("script".into(), "scripts/in.${T}".into());
        lammps.outputs.insert("dump".into(), "dump.txt".into());
        lammps.scale = Some("${atoms}".into());
        let mut r = NodeBinding::new("mock-r");
        r.outputs.insert("plot".into(), "plot.png".into());
        [("lammps".to_string(), lammps), ("r".to_string(), r)].into_iter().collect()
    }

    #[test]
    fn bind_and_expand() {
        let sweep = SweepSpec::default().axis("T", [300.into(), 600.into()]).axis("atoms", [840.into()]);
        let wf = bind_workflow(chain_graph(), bindings(), sweep).unwrap();
        assert_eq!(wf.status, WorkflowStatus::Draft);
        let set = expand_sweep(&wf, "run-1").unwrap();
        assert_eq!(set.jobs.len(), 4);
        let first = &set.jobs[0];
        assert_eq!(first.node_id, "lammps");
        assert_eq!(first.spec.args, ["--minutes", "1", "--atoms", "840", "temp=300"]);
        assert_eq!(first.spec.inputs, vec![InputSource::File { port: "script".into(), path: "scripts/in.300".into() }]);
        assert!((first.estimate.runtime - 60.0).abs() < 1e-9);
        assert_eq!(set.jobs[1].depends_on, vec![first.id.clone()]);
        assert_eq!(set, expand_sweep(&wf, "run-1").unwrap());
        assert_ne!(set.jobs[0].id, expand_sweep(&wf, "run-2").unwrap().jobs[0].id);
    }

    #[test]
    fn bind_errors() {
        let sweep = SweepSpec::default().axis("T", [300.into()]);
        assert_eq!(
            bind_workflow(chain_graph(), bindings(), sweep.clone()).unwrap_err(),
            BindError::UnknownPlaceholder("atoms".into())
        );
        let mut b = bindings();
        b.remove("r");
        let sweep = sweep.axis("atoms", [1.into()]);
        assert_eq!(bind_workflow(chain_graph(), b, sweep.clone()).unwrap_err(), BindError::UnboundNode("r".into()));
        let mut b = bindings();
        b.get_mut("r").unwrap().input_files.insert("data".into(), "x".into());
        assert!(matches!(bind_workflow(chain_graph(), b, sweep.clone()), Err(BindError::InputConflict { .. })));
        let mut b = bindings();
        b.get_mut("r").unwrap().executable.clear();
        assert!(matches!(bind_workflow(chain_graph(), b, sweep.clone()), Err(BindError::EmptyExecutable(_))));
        let conflict = sweep.clone().constant("T", 1);
        assert!(matches!(bind_workflow(chain_graph(), bindings(), conflict), Err(BindError::ParamConflict(_))));
        let mut g = chain_graph();
        g.nodes[1].profile_ref = "nope".into();
        assert!(matches!(bind_workflow(g, bindings(), sweep), Err(BindError::UnknownProfile { .. })));
    }

    #[test]
    fn temp_placeholder() {
        let g = ComponentGraph { nodes: vec![ComponentNode::new("md", "lammps", vec![])], edges: vec![] };
        let mut b = NodeBinding::new("mock-lammps");
        b.variable_args.push("temp=${T}".into());
        let bindings: BTreeMap<_, _> = [("md".to_string(), b)].into_iter().collect();
        assert!(bind_workflow(g.clone(), bindings.clone(), SweepSpec::default().axis("T", [300.into()])).is_ok());
        assert_eq!(
            bind_workflow(g, bindings, SweepSpec::default()).unwrap_err(),
            BindError::UnknownPlaceholder("T".into())
        );
    }

    #[test]
    fn empty_axis_rejected() {
        let sweep = SweepSpec::default().axis("T", []).axis("atoms", [1.into()]);
        let wf = bind_workflow(chain_graph(), bindings(), sweep).unwrap();
        assert_eq!(expand_sweep(&wf, "r").unwrap_err(), ExpandError::EmptyAxis("T".into()));
    }

    #[test]
    fn sweep_counts() {
        let g = ComponentGraph { nodes: vec![ComponentNode::new("md", "lammps", vec![])], edges: vec![] };
        let bindings: BTreeMap<_, _> = [("md".to_string(), NodeBinding::new("x"))].into_iter().collect();
        let sweep = SweepSpec::default()
            .axis("T", [300.into(), 600.into(), 900.into()])
            .axis("size", [10.into(), 20.into()]);
        let wf = bind_workflow(g, bindings, sweep).unwrap();
        assert_eq!(expand_sweep(&wf, "r").unwrap().jobs.len(), 6);
    }
}
