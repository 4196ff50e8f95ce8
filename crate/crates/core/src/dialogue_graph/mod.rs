//! Tree-structured dialogue corpus: loading, validation and the three
//! training-data extractions (one-to-one pairs, one-to-many paths, topic pairs).
//!
//! Each topic contributes a forest of utterance trees. A node is keyed by
//! `(topic, depth, candidate)`; an edge is one utterance turn from a parent to
//! a child one level deeper.

mod extract;
mod split;
mod stats;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use extract::{extract_discriminator_pairs, extract_one_to_many, extract_one_to_one, path_prefixes};
pub use split::{split_dataset, DatasetSplit, SplitSpec};
pub use stats::{graph_stats, GraphStats, TokenSummary};

/// Default maximum depth: eight turns below the topic root.
pub const DEFAULT_MAX_DEPTH: u32 = 8;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate node {key}")]
    Duplicate { line: usize, key: NodeKey },
    #[error("node {node} references missing parent {parent}")]
    DanglingParent { node: NodeKey, parent: String },
    #[error("cycle through node {0}")]
    Cycle(NodeKey),
    #[error("need at least 2 topics to form negative pairs, found {0}")]
    TooFewTopics(usize),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("{groups} groups cannot fill {splits} splits")]
    TooFewGroups { groups: usize, splits: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    A,
    B,
}

impl Role {
    pub fn id(self) -> u32 {
        match self {
            Role::A => 0,
            Role::B => 1,
        }
    }

    pub fn other(self) -> Role {
        match self {
            Role::A => Role::B,
            Role::B => Role::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub text: String,
}

impl Utterance {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
        }
    }
}

/// `(topic, depth, candidate)`, written `t-i-j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeKey {
    pub topic: u32,
    pub depth: u32,
    pub candidate: u32,
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.topic, self.depth, self.candidate)
    }
}

impl FromStr for NodeKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() != 3 {
            return Err(format!("node id `{s}` is not of the form t-i-j"));
        }
        let num = |p: &str| {
            p.parse::<u32>()
                .map_err(|_| format!("node id `{s}` has a non-integer part"))
        };
        Ok(NodeKey {
            topic: num(parts[0])?,
            depth: num(parts[1])?,
            candidate: num(parts[2])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueNode {
    pub key: NodeKey,
    pub parent: Option<NodeKey>,
    pub role: Role,
    pub text: String,
}

impl DialogueNode {
    pub fn utterance(&self) -> Utterance {
        Utterance::new(self.role, self.text.clone())
    }
}

/// One line of the corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeRecord {
    topic_id: u32,
    node_id: String,
    parent_id: Option<String>,
    role: Role,
    text: String,
}

#[derive(Debug, Clone)]
pub struct DialogueGraph {
    nodes: Vec<DialogueNode>,
    index: HashMap<NodeKey, usize>,
    children: Vec<Vec<usize>>,
    pub max_depth: u32,
}

impl PartialEq for DialogueGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.max_depth == other.max_depth
    }
}

impl DialogueGraph {
    /// Builds a graph, checking the structural errors that make a corpus unusable.
    pub fn from_nodes(nodes: Vec<DialogueNode>, max_depth: u32) -> Result<Self, GraphError> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.key, i).is_some() {
                return Err(GraphError::Duplicate {
                    line: i + 1,
                    key: n.key,
                });
            }
        }
        let mut children = vec![Vec::new(); nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            if let Some(p) = n.parent {
                let Some(&pi) = index.get(&p) else {
                    return Err(GraphError::DanglingParent {
                        node: n.key,
                        parent: p.to_string(),
                    });
                };
                children[pi].push(i);
            }
        }
        for list in children.iter_mut() {
            list.sort_by_key(|&c| nodes[c].key);
        }
        let graph = Self {
            nodes,
            index,
            children,
            max_depth,
        };
        graph.check_acyclic()?;
        Ok(graph)
    }

    fn check_acyclic(&self) -> Result<(), GraphError> {
        // 0 = unvisited, 1 = on current chain, 2 = known to reach a root
        let mut state = vec![0u8; self.nodes.len()];
        for start in 0..self.nodes.len() {
            let mut chain = Vec::new();
            let mut cur = Some(start);
            while let Some(i) = cur {
                match state[i] {
                    2 => break,
                    1 => return Err(GraphError::Cycle(self.nodes[i].key)),
                    _ => {}
                }
                state[i] = 1;
                chain.push(i);
                cur = self.nodes[i].parent.map(|p| self.index[&p]);
            }
            for i in chain {
                state[i] = 2;
            }
        }
        Ok(())
    }

    pub fn empty() -> Self {
        Self {
            nodes: Vec::new(),
            index: HashMap::new(),
            children: Vec::new(),
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }

    pub fn nodes(&self) -> &[DialogueNode] {
        &self.nodes
    }

    pub fn node(&self, key: &NodeKey) -> Option<&DialogueNode> {
        self.index.get(key).map(|&i| &self.nodes[i])
    }

    pub fn children_of(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    pub fn parent_index(&self, idx: usize) -> Option<usize> {
        self.nodes[idx].parent.map(|p| self.index[&p])
    }

    /// Indices of depth-0 parentless nodes, ordered by key.
    pub fn roots(&self) -> Vec<usize> {
        let mut r: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].parent.is_none())
            .collect();
        r.sort_by_key(|&i| self.nodes[i].key);
        r
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.parent.is_some()).count()
    }

    pub fn topics(&self) -> Vec<u32> {
        let mut t: Vec<u32> = self
            .nodes
            .iter()
            .map(|n| n.key.topic)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        t.sort_unstable();
        t
    }

    pub fn topic_count(&self) -> usize {
        self.topics().len()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let file = std::fs::File::open(path)?;
        Self::read(BufReader::new(file))
    }

    /// Parses line-delimited node records; blank lines are skipped.
    pub fn read(reader: impl BufRead) -> Result<Self, GraphError> {
        let mut nodes = Vec::new();
        let mut seen: HashMap<NodeKey, usize> = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| GraphError::Malformed { line: line_no, message };
            let rec: NodeRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            let key: NodeKey = rec.node_id.parse().map_err(malformed)?;
            if key.topic != rec.topic_id {
                return Err(malformed(format!(
                    "topic_id {} disagrees with node id {}",
                    rec.topic_id, rec.node_id
                )));
            }
            let parent = match rec.parent_id {
                None => None,
                Some(p) => Some(p.parse::<NodeKey>().map_err(|_| GraphError::DanglingParent {
                    node: key,
                    parent: p.clone(),
                })?),
            };
            if seen.insert(key, line_no).is_some() {
                return Err(GraphError::Duplicate { line: line_no, key });
            }
            nodes.push(DialogueNode {
                key,
                parent,
                role: rec.role,
                text: rec.text,
            });
        }
        Self::from_nodes(nodes, DEFAULT_MAX_DEPTH)
    }

    pub fn write(&self, mut w: impl Write) -> Result<(), GraphError> {
        for n in &self.nodes {
            let rec = NodeRecord {
                topic_id: n.key.topic,
                node_id: n.key.to_string(),
                parent_id: n.parent.map(|p| p.to_string()),
                role: n.role,
                text: n.text.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Checks every node and edge invariant; never fails.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.text.is_empty() {
                report.violations.push(Violation::EmptyText(n.key));
            }
            if n.key.depth > self.max_depth {
                report.violations.push(Violation::DepthExceeded {
                    node: n.key,
                    max: self.max_depth,
                });
            }
            match self.parent_index(i) {
                None => {
                    if n.key.depth != 0 {
                        report.violations.push(Violation::OrphanBelowRoot(n.key));
                    }
                }
                Some(pi) => {
                    let p = &self.nodes[pi];
                    if p.key.depth + 1 != n.key.depth {
                        report.violations.push(Violation::ParentDepth {
                            node: n.key,
                            parent: p.key,
                        });
                    }
                    if p.key.topic != n.key.topic {
                        report.violations.push(Violation::CrossTopicEdge {
                            node: n.key,
                            parent: p.key,
                        });
                    }
                    if p.role == n.role {
                        report.violations.push(Violation::RoleAlternation {
                            node: n.key,
                            parent: p.key,
                        });
                    }
                }
            }
            let kids = self.children[i].len();
            if kids > 0 && kids < MIN_CANDIDATES {
                report.warnings.push(Violation::FewCandidates {
                    node: n.key,
                    children: kids,
                });
            }
        }
        report
    }
}

/// Collection guideline: expanded nodes carry at least this many candidates.
/// Reported as a warning only.
pub const MIN_CANDIDATES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyText(NodeKey),
    DepthExceeded { node: NodeKey, max: u32 },
    OrphanBelowRoot(NodeKey),
    ParentDepth { node: NodeKey, parent: NodeKey },
    CrossTopicEdge { node: NodeKey, parent: NodeKey },
    RoleAlternation { node: NodeKey, parent: NodeKey },
    FewCandidates { node: NodeKey, children: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyText(n) => write!(f, "{n}: empty text"),
            Violation::DepthExceeded { node, max } => write!(f, "{node}: depth exceeds max {max}"),
            Violation::OrphanBelowRoot(n) => write!(f, "{n}: non-root node without parent"),
            Violation::ParentDepth { node, parent } => write!(f, "{node}: parent {parent} is not one level up"),
            Violation::CrossTopicEdge { node, parent } => write!(f, "{node}: parent {parent} has another topic"),
            Violation::RoleAlternation { node, parent } => {
                write!(f, "{node}: same role as parent {parent}")
            }
            Violation::FewCandidates { node, children } => {
                write!(f, "{node}: only {children} candidate responses")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Which extraction produced a [`TrainingExample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    OneToOne,
    OneToMany,
    TopicPair,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingExample {
    pub kind: ExampleKind,
    pub context: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
    pub topic_ids: Vec<u32>,
    /// Split unit: examples sharing a group always land in the same split.
    pub group: String,
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[TrainingExample]) -> Result<(), GraphError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>, GraphError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| GraphError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn node(
        t: u32,
        i: u32,
        j: u32,
        parent: Option<(u32, u32, u32)>,
        role: Role,
        text: &str,
    ) -> DialogueNode {
        DialogueNode {
            key: NodeKey {
                topic: t,
                depth: i,
                candidate: j,
            },
            parent: parent.map(|(topic, depth, candidate)| NodeKey {
                topic,
                depth,
                candidate,
            }),
            role,
            text: text.to_string(),
        }
    }

    pub(crate) fn chain(topic: u32, turns: u32) -> Vec<DialogueNode> {
        (0..=turns)
            .map(|i| {
                let role = if i % 2 == 0 { Role::A } else { Role::B };
                let parent = (i > 0).then(|| (topic, i - 1, 0));
                node(topic, i, 0, parent, role, &format!("t{topic} turn {i}"))
            })
            .collect()
    }

    #[test]
    fn three_line_file_loads() {
        let text = r#"{"topic_id":0,"node_id":"0-0-0","parent_id":null,"role":"A","text":"What is your favorite food?"}
{"topic_id":0,"node_id":"0-1-0","parent_id":"0-0-0","role":"B","text":"Sushi."}
{"topic_id":0,"node_id":"0-1-1","parent_id":"0-0-0","role":"B","text":"Ramen, definitely."}
"#;
        let g = DialogueGraph::read(text.as_bytes()).unwrap();
        assert_eq!(g.nodes().len(), 3);
        assert_eq!(g.edge_count(), 2);
        assert!(g.validate().is_valid());
    }

    #[test]
    fn empty_file_is_empty_graph() {
        let g = DialogueGraph::read("".as_bytes()).unwrap();
        assert_eq!(g.nodes().len(), 0);
        assert_eq!(g.topic_count(), 0);
    }

    #[test]
    fn dangling_parent_names_the_id() {
        let text = r#"{"topic_id":0,"node_id":"0-1-0","parent_id":"0-0-7","role":"B","text":"hi"}"#;
        match DialogueGraph::read(text.as_bytes()) {
            Err(GraphError::DanglingParent { parent, .. }) => assert_eq!(parent, "0-0-7"),
            other => panic!("expected dangling parent, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_duplicate_lines_are_reported() {
        let bad = "{\"topic_id\":0,\"node_id\":\"0-0-0\",\"parent_id\":null,\"role\":\"A\",\"text\":\"x\"}\nnot json\n";
        assert!(matches!(
            DialogueGraph::read(bad.as_bytes()),
            Err(GraphError::Malformed { line: 2, .. })
        ));
        let line = "{\"topic_id\":0,\"node_id\":\"0-0-0\",\"parent_id\":null,\"role\":\"A\",\"text\":\"x\"}\n";
        let dup = format!("{line}{line}");
        assert!(matches!(
            DialogueGraph::read(dup.as_bytes()),
            Err(GraphError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn cycle_is_detected() {
        let nodes = vec![
            node(0, 1, 0, Some((0, 2, 0)), Role::A, "a"),
            node(0, 2, 0, Some((0, 1, 0)), Role::B, "b"),
        ];
        assert!(matches!(DialogueGraph::from_nodes(nodes, 8), Err(GraphError::Cycle(_))));
    }

    #[test]
    fn eight_turn_path_validates_clean() {
        let g = DialogueGraph::from_nodes(chain(0, 8), 8).unwrap();
        let report = g.validate();
        assert!(report.violations.is_empty(), "{:?}", report.violations);
    }

    #[test]
    fn depth_bound_violation() {
        let mut nodes = chain(0, 10);
        nodes.truncate(11);
        let g = DialogueGraph::from_nodes(nodes, 8).unwrap();
        let report = g.validate();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::DepthExceeded { node, .. } if node.depth == 10)));
    }

    #[test]
    fn role_alternation_violation() {
        let nodes = vec![
            node(0, 0, 0, None, Role::A, "hello"),
            node(0, 1, 0, Some((0, 0, 0)), Role::A, "hello again"),
        ];
        let g = DialogueGraph::from_nodes(nodes, 8).unwrap();
        assert_eq!(
            g.validate().violations,
            vec![Violation::RoleAlternation {
                node: NodeKey {
                    topic: 0,
                    depth: 1,
                    candidate: 0
                },
                parent: NodeKey {
                    topic: 0,
                    depth: 0,
                    candidate: 0
                },
            }]
        );
    }

    #[test]
    fn save_load_round_trip() {
        let mut nodes = chain(0, 3);
        nodes.extend(chain(1, 2));
        nodes.push(node(1, 1, 1, Some((1, 0, 0)), Role::B, "かしこまりました \"quoted\"\n"));
        let g = DialogueGraph::from_nodes(nodes, 8).unwrap();
        let mut buf = Vec::new();
        g.write(&mut buf).unwrap();
        let back = DialogueGraph::read(buf.as_slice()).unwrap();
        assert_eq!(back, g);
    }
}
