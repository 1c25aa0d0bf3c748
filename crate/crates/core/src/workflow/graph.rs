//! Component graphs: nodes with typed ports joined by output→input edges.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Port direction, fixed when the port is declared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Input,
    Output,
}

/// Kind of data flowing through a port. Size expectations per class live in
/// [`crate::workflow::classify`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataClass {
    /// Raw coordinate/velocity dumps, 1-10 GB.
    TextHuge,
    /// Post-processed tables, 10 MB - 1 GB.
    TextMedium,
    /// Plots and rendered frames, at most 1 MB.
    ImageSmall,
    /// Encoded videos, at most 10 MB.
    VideoSmall,
    /// Small scalar results and parameter files.
    Scalar,
}

impl DataClass {
    pub const ALL: [DataClass; 5] = [
        DataClass::TextHuge,
        DataClass::TextMedium,
        DataClass::ImageSmall,
        DataClass::VideoSmall,
        DataClass::Scalar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DataClass::TextHuge => "text_huge",
            DataClass::TextMedium => "text_medium",
            DataClass::ImageSmall => "image_small",
            DataClass::VideoSmall => "video_small",
            DataClass::Scalar => "scalar",
        }
    }
}

impl fmt::Display for DataClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Port {
    pub name: String,
    pub direction: Direction,
    pub data_class: DataClass,
}

impl Port {
    pub fn input(name: impl Into<String>, data_class: DataClass) -> Self {
        Port { name: name.into(), direction: Direction::Input, data_class }
    }

    pub fn output(name: impl Into<String>, data_class: DataClass) -> Self {
        Port { name: name.into(), direction: Direction::Output, data_class }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentNode {
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub ports: Vec<Port>,
    /// Name of the resource profile used to estimate this node's jobs.
    #[serde(rename = "profile")]
    pub profile_ref: String,
}

impl ComponentNode {
    pub fn new(id: impl Into<String>, profile_ref: impl Into<String>, ports: Vec<Port>) -> Self {
        let id = id.into();
        ComponentNode { name: id.clone(), id, ports, profile_ref: profile_ref.into() }
    }

    pub fn port(&self, name: &str) -> Option<&Port> {
        self.ports.iter().find(|p| p.name == name)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &Port> {
        self.ports.iter().filter(|p| p.direction == Direction::Output)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Port> {
        self.ports.iter().filter(|p| p.direction == Direction::Input)
    }
}

/// A directed link from an output port of one node to an input port of another.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub from_port: String,
    pub to: String,
    pub to_port: String,
}

impl Edge {
    pub fn new(from: &str, from_port: &str, to: &str, to_port: &str) -> Self {
        Edge {
            from: from.into(),
            from_port: from_port.into(),
            to: to.into(),
            to_port: to_port.into(),
        }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{} -> {}.{}", self.from, self.from_port, self.to, self.to_port)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentGraph {
    #[serde(default)]
    pub nodes: Vec<ComponentNode>,
    #[serde(default)]
    pub edges: Vec<Edge>,
}

impl ComponentGraph {
    pub fn node(&self, id: &str) -> Option<&ComponentNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Edges whose endpoints both resolve to declared nodes, self-loops excluded.
    fn resolvable_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges
            .iter()
            .filter(move |e| e.from != e.to && self.node(&e.from).is_some() && self.node(&e.to).is_some())
    }
}

/// One way a graph can break the component-graph rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    InvalidNodeId { node: String },
    DuplicateNode { node: String },
    DuplicatePort { node: String, port: String },
    SelfLoop { node: String },
    DanglingEdge { edge: String, missing: String },
    DirectionMismatch { edge: String },
    FanIn { node: String, port: String },
    Cycle { nodes: Vec<String> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidNodeId { node } => {
                write!(f, "node id {node:?} must match [a-z0-9_-]{{1,64}}")
            }
            Violation::DuplicateNode { node } => write!(f, "duplicate node {node}"),
            Violation::DuplicatePort { node, port } => write!(f, "duplicate port {port} on node {node}"),
            Violation::SelfLoop { node } => write!(f, "self-loop at node {node}"),
            Violation::DanglingEdge { edge, missing } => write!(f, "edge {edge}: {missing} does not exist"),
            Violation::DirectionMismatch { edge } => {
                write!(f, "edge {edge} must run from an output port to an input port")
            }
            Violation::FanIn { node, port } => {
                write!(f, "input port {node}.{port} has more than one incoming edge")
            }
            Violation::Cycle { nodes } => write!(f, "cycle through {}", nodes.join(", ")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

pub fn is_valid_node_id(id: &str) -> bool {
    (1..=64).contains(&id.len())
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

/// Checks every component-graph rule and reports all violations found.
pub fn validate_graph(graph: &ComponentGraph) -> ValidationReport {
    let mut violations = Vec::new();

    let mut seen = BTreeSet::new();
    for node in &graph.nodes {
        if !is_valid_node_id(&node.id) {
            violations.push(Violation::InvalidNodeId { node: node.id.clone() });
        }
        if !seen.insert(node.id.as_str()) {
            violations.push(Violation::DuplicateNode { node: node.id.clone() });
        }
        let mut ports = BTreeSet::new();
        for port in &node.ports {
            if !ports.insert(port.name.as_str()) {
                violations.push(Violation::DuplicatePort { node: node.id.clone(), port: port.name.clone() });
            }
        }
    }

    let mut fan_in: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for edge in &graph.edges {
        if edge.from == edge.to {
            violations.push(Violation::SelfLoop { node: edge.from.clone() });
        }
        let from = graph.node(&edge.from);
        let to = graph.node(&edge.to);
        let from_port = from.and_then(|n| n.port(&edge.from_port));
        let to_port = to.and_then(|n| n.port(&edge.to_port));
        let missing = if from.is_none() {
            Some(alloc::format!("node {}", edge.from))
        } else if to.is_none() {
            Some(alloc::format!("node {}", edge.to))
        } else if from_port.is_none() {
            Some(alloc::format!("port {}.{}", edge.from, edge.from_port))
        } else if to_port.is_none() {
            Some(alloc::format!("port {}.{}", edge.to, edge.to_port))
        } else {
            None
        };
        if let Some(missing) = missing {
            violations.push(Violation::DanglingEdge { edge: edge.to_string(), missing });
            continue;
        }
        let (from_port, to_port) = (from_port.unwrap(), to_port.unwrap());
        if from_port.direction != Direction::Output || to_port.direction != Direction::Input {
            violations.push(Violation::DirectionMismatch { edge: edge.to_string() });
        }
        *fan_in.entry((edge.to.as_str(), edge.to_port.as_str())).or_default() += 1;
    }
    for ((node, port), count) in fan_in {
        if count > 1 {
            violations.push(Violation::FanIn { node: node.into(), port: port.into() });
        }
    }

    let (_, stuck) = kahn(graph);
    if !stuck.is_empty() {
        violations.push(Violation::Cycle { nodes: stuck });
    }

    ValidationReport { violations }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("graph contains a cycle through {}", nodes.join(", "))]
pub struct CycleError {
    pub nodes: Vec<String>,
}

/// Orders nodes so every edge points forward. Ready nodes are emitted in
/// lexicographic id order, which makes the result deterministic.
pub fn topological_order(graph: &ComponentGraph) -> Result<Vec<String>, CycleError> {
    let (order, stuck) = kahn(graph);
    if stuck.is_empty() {
        Ok(order)
    } else {
        Err(CycleError { nodes: stuck })
    }
}

/// Kahn's algorithm over resolvable edges; returns the order plus any nodes
/// left with unresolved predecessors (members of, or downstream of, a cycle).
fn kahn(graph: &ComponentGraph) -> (Vec<String>, Vec<String>) {
    let mut indegree: BTreeMap<&str, usize> = graph.nodes.iter().map(|n| (n.id.as_str(), 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    // parallel edges between the same pair count once
    let pairs: BTreeSet<(&str, &str)> =
        graph.resolvable_edges().map(|e| (e.from.as_str(), e.to.as_str())).collect();
    for (from, to) in pairs {
        succ.entry(from).or_default().push(to);
        *indegree.get_mut(to).unwrap() += 1;
    }
    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
    let mut order = Vec::with_capacity(indegree.len());
    while let Some(node) = ready.pop_first() {
        order.push(node.to_string());
        for next in succ.get(node).into_iter().flatten() {
            let d = indegree.get_mut(next).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(next);
            }
        }
    }
    let stuck = indegree.into_iter().filter(|(_, d)| *d > 0).map(|(n, _)| n.to_string()).collect();
    (order, stuck)
}
