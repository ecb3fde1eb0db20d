//! Knowledge-graph store: loading, concept grounding and k-hop retrieval.
//!
//! Node ids are dense `0..N` in order of first appearance in the edge file,
//! so loading the same file twice produces identical indexes.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = u32;
pub type RelationId = u16;

/// Longest n-gram considered when grounding text to concept labels.
pub const MAX_NGRAM: usize = 3;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: unknown relation `{relation}`")]
    UnknownRelation {
        file: String,
        line: usize,
        relation: String,
    },
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub head: NodeId,
    pub relation: RelationId,
    pub tail: NodeId,
}

/// Immutable labeled multigraph with a fixed relation vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    labels: Vec<String>,
    index: HashMap<String, NodeId>,
    relations: Vec<String>,
    edges: Vec<Edge>,
    /// Edge indices leaving each node.
    out_edges: Vec<Vec<u32>>,
    /// Edge indices entering each node.
    in_edges: Vec<Vec<u32>>,
}

/// Lowercases a concept label and joins words with underscores.
pub fn normalize_label(raw: &str) -> String {
    raw.trim()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
        .to_lowercase()
}

impl KnowledgeGraph {
    pub fn load(edge_file: &Path, relation_file: &Path) -> Result<Self, KgError> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|source| KgError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let relations = read(relation_file)?;
        let edges = read(edge_file)?;
        Self::parse(
            &edges,
            &relations,
            &edge_file.display().to_string(),
            &relation_file.display().to_string(),
        )
    }

    /// Parses the TSV formats from strings; file names only label errors.
    pub fn parse(
        edge_text: &str,
        relation_text: &str,
        edge_name: &str,
        relation_name: &str,
    ) -> Result<Self, KgError> {
        let mut relations = Vec::new();
        let mut rel_index = HashMap::new();
        for (i, line) in relation_text.lines().enumerate() {
            let name = line.trim();
            if name.is_empty() {
                return Err(KgError::Parse {
                    file: relation_name.to_string(),
                    line: i + 1,
                    message: "empty relation name".into(),
                });
            }
            if rel_index.insert(name.to_string(), relations.len()).is_some() {
                return Err(KgError::Parse {
                    file: relation_name.to_string(),
                    line: i + 1,
                    message: format!("duplicate relation `{name}`"),
                });
            }
            relations.push(name.to_string());
        }
        if relations.len() > RelationId::MAX as usize {
            return Err(KgError::Parse {
                file: relation_name.to_string(),
                line: relations.len(),
                message: "relation vocabulary too large".into(),
            });
        }

        let mut builder = GraphBuilder::new(relations);
        for (i, line) in edge_text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| KgError::Parse {
                file: edge_name.to_string(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_err(format!(
                    "expected 3 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let head = normalize_label(fields[0]);
            let tail = normalize_label(fields[2]);
            if head.is_empty() || tail.is_empty() {
                return Err(parse_err("empty concept label".into()));
            }
            let rel_name = fields[1].trim();
            let Some(&rel) = rel_index.get(rel_name) else {
                return Err(KgError::UnknownRelation {
                    file: edge_name.to_string(),
                    line: i + 1,
                    relation: rel_name.to_string(),
                });
            };
            builder.add_edge(&head, rel as RelationId, &tail);
        }
        Ok(builder.build())
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn relation_name(&self, id: RelationId) -> Option<&str> {
        self.relations.get(id as usize).map(String::as_str)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations
            .iter()
            .position(|r| r == name)
            .map(|i| i as RelationId)
    }

    pub fn label(&self, id: NodeId) -> Option<&str> {
        self.labels.get(id as usize).map(String::as_str)
    }

    pub fn node_id(&self, label: &str) -> Option<NodeId> {
        self.index.get(label).copied()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn out_edges(&self, id: NodeId) -> impl Iterator<Item = &Edge> {
        self.out_edges[id as usize]
            .iter()
            .map(|&e| &self.edges[e as usize])
    }

    pub fn in_edges(&self, id: NodeId) -> impl Iterator<Item = &Edge> {
        self.in_edges[id as usize]
            .iter()
            .map(|&e| &self.edges[e as usize])
    }

    /// Number of incident edges, counting both directions.
    pub fn degree(&self, id: NodeId) -> usize {
        self.out_edges[id as usize].len() + self.in_edges[id as usize].len()
    }

    /// Undirected neighbors of a node (may repeat for multi-edges).
    pub fn neighbors(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.out_edges(id)
            .map(|e| e.tail)
            .chain(self.in_edges(id).map(|e| e.head))
    }

    /// Nodes within undirected distance `hops` of any seed, plus induced edges.
    pub fn khop_neighborhood(&self, seeds: &BTreeSet<NodeId>, hops: usize) -> Result<Subgraph, KgError> {
        for &s in seeds {
            if s as usize >= self.node_count() {
                return Err(KgError::UnknownNode(s));
            }
        }
        let mut dist: HashMap<NodeId, usize> = seeds.iter().map(|&s| (s, 0)).collect();
        let mut queue: VecDeque<NodeId> = seeds.iter().copied().collect();
        while let Some(node) = queue.pop_front() {
            let d = dist[&node];
            if d == hops {
                continue;
            }
            for next in self.neighbors(node) {
                if let std::collections::hash_map::Entry::Vacant(slot) = dist.entry(next) {
                    slot.insert(d + 1);
                    queue.push_back(next);
                }
            }
        }
        let nodes: BTreeSet<NodeId> = dist.into_keys().collect();
        Ok(self.induced(nodes))
    }

    /// Subgraph on `nodes` with every edge whose endpoints are both inside.
    pub fn induced(&self, nodes: BTreeSet<NodeId>) -> Subgraph {
        let mut edges = Vec::new();
        for &n in &nodes {
            for e in self.out_edges(n) {
                if nodes.contains(&e.tail) {
                    edges.push(*e);
                }
            }
        }
        edges.sort_unstable();
        Subgraph { nodes, edges }
    }

    /// Matches question and choice text against concept labels.
    pub fn ground(&self, question: &str, choices: &[String]) -> GroundedInput {
        let question_tokens = tokenize(question);
        let question_nodes = self.match_tokens(&question_tokens);
        let choice_nodes: Vec<BTreeSet<NodeId>> = choices
            .iter()
            .map(|c| self.match_tokens(&tokenize(c)))
            .collect();

        let mut full = question.to_string();
        for c in choices {
            full.push(' ');
            full.push_str(c);
        }
        let tokens = tokenize(&full);
        let all = self.match_tokens(&tokens);

        let mut membership: HashMap<NodeId, usize> = HashMap::new();
        for set in std::iter::once(&question_nodes).chain(&choice_nodes) {
            for &n in set {
                *membership.entry(n).or_default() += 1;
            }
        }
        // Full-input matches that no single slot owns exclusively.
        let context: BTreeSet<NodeId> = all
            .iter()
            .copied()
            .filter(|n| membership.get(n).copied().unwrap_or(0) != 1)
            .collect();

        GroundedInput {
            tokens,
            context,
            question: question_nodes,
            choices: choice_nodes,
        }
    }

    /// Greedy left-to-right longest n-gram match over tokens.
    pub fn match_tokens(&self, tokens: &[String]) -> BTreeSet<NodeId> {
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < tokens.len() {
            let mut advanced = false;
            for n in (1..=MAX_NGRAM.min(tokens.len() - i)).rev() {
                let gram = tokens[i..i + n].join("_");
                if let Some(&id) = self.index.get(&gram) {
                    found.insert(id);
                    i += n;
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                i += 1;
            }
        }
        found
    }
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '_' { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Incremental constructor; drops duplicate triples.
#[derive(Debug, Clone, Default)]
pub struct GraphBuilder {
    labels: Vec<String>,
    index: HashMap<String, NodeId>,
    relations: Vec<String>,
    seen: HashSet<Edge>,
    edges: Vec<Edge>,
}

impl GraphBuilder {
    pub fn new(relations: Vec<String>) -> Self {
        Self {
            relations,
            ..Self::default()
        }
    }

    pub fn add_node(&mut self, label: &str) -> NodeId {
        let label = normalize_label(label);
        if let Some(&id) = self.index.get(&label) {
            return id;
        }
        let id = self.labels.len() as NodeId;
        self.labels.push(label.clone());
        self.index.insert(label, id);
        id
    }

    /// Returns false when the triple was already present.
    pub fn add_edge(&mut self, head: &str, relation: RelationId, tail: &str) -> bool {
        assert!(
            (relation as usize) < self.relations.len(),
            "relation id {relation} outside vocabulary"
        );
        let head = self.add_node(head);
        let tail = self.add_node(tail);
        let edge = Edge {
            head,
            relation,
            tail,
        };
        if self.seen.insert(edge) {
            self.edges.push(edge);
            true
        } else {
            false
        }
    }

    pub fn build(self) -> KnowledgeGraph {
        let n = self.labels.len();
        let mut out_edges = vec![Vec::new(); n];
        let mut in_edges = vec![Vec::new(); n];
        for (i, e) in self.edges.iter().enumerate() {
            out_edges[e.head as usize].push(i as u32);
            in_edges[e.tail as usize].push(i as u32);
        }
        KnowledgeGraph {
            labels: self.labels,
            index: self.index,
            relations: self.relations,
            edges: self.edges,
            out_edges,
            in_edges,
        }
    }
}

/// A node-induced piece of the knowledge graph.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Subgraph {
    pub nodes: BTreeSet<NodeId>,
    /// Sorted by (head, relation, tail).
    pub edges: Vec<Edge>,
}

impl Subgraph {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Which part of the input a grounded concept came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Context,
    Question,
    Choice(usize),
}

/// Concepts matched in each slot of a multiple-choice input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundedInput {
    pub tokens: Vec<String>,
    pub context: BTreeSet<NodeId>,
    pub question: BTreeSet<NodeId>,
    pub choices: Vec<BTreeSet<NodeId>>,
}

impl GroundedInput {
    pub fn slots(&self) -> BTreeMap<Slot, &BTreeSet<NodeId>> {
        let mut m = BTreeMap::new();
        m.insert(Slot::Context, &self.context);
        m.insert(Slot::Question, &self.question);
        for (i, c) in self.choices.iter().enumerate() {
            m.insert(Slot::Choice(i), c);
        }
        m
    }

    /// Seeds for one candidate: question concepts plus that choice's concepts.
    pub fn seeds_for(&self, choice: usize) -> BTreeSet<NodeId> {
        self.question
            .iter()
            .chain(&self.choices[choice])
            .copied()
            .collect()
    }
}
