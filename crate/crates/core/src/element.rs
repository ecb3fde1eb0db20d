//! Relevance scoring and top-K pruning of a k-hop subgraph into an
//! element-graph.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingProvider, EmbeddingVector};
use crate::kg::{GroundedInput, KnowledgeGraph, NodeId, RelationId, Subgraph};
use crate::nn::{dot, Activation, Mlp};

/// Default pruning budget.
pub const DEFAULT_BUDGET: usize = 200;

#[derive(Debug, Error)]
pub enum ElementError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Context,
    Question,
    Answer,
    Kg,
}

impl NodeType {
    pub const COUNT: usize = 4;
    pub const ALL: [NodeType; 4] = [
        NodeType::Context,
        NodeType::Question,
        NodeType::Answer,
        NodeType::Kg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Cosine,
    #[default]
    Mlp,
}

impl std::str::FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown score mode `{other}`")),
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Relevance of a concept to the input, from pooled input and node embeddings.
///
/// The perceptron mode is `sigmoid(w₂ · tanh(W₁ [z ; v] + b₁) + b₂)` with
/// hidden width `D`, Glorot weights drawn from a fixed seed and never trained.
#[derive(Debug, Clone)]
pub struct RelevanceScorer {
    mode: ScoreMode,
    dim: usize,
    mlp: Option<Mlp>,
}

impl RelevanceScorer {
    pub fn new(mode: ScoreMode, dim: usize, seed: u64) -> Self {
        let mlp = match mode {
            ScoreMode::Cosine => None,
            ScoreMode::Mlp => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Some(Mlp::new(&[2 * dim, dim, 1], Activation::Tanh, &mut rng))
            }
        };
        Self { mode, dim, mlp }
    }

    pub fn mode(&self) -> ScoreMode {
        self.mode
    }

    pub fn mlp(&self) -> Option<&Mlp> {
        self.mlp.as_ref()
    }

    pub fn score(&self, z: &[f64], v: &[f64]) -> Result<f64, ElementError> {
        if z.len() != v.len() {
            return Err(ElementError::Dimension(z.len(), v.len()));
        }
        match &self.mlp {
            None => Ok(cosine(z, v)),
            Some(mlp) => {
                if z.len() != self.dim {
                    return Err(ElementError::Dimension(self.dim, z.len()));
                }
                let mut input = Vec::with_capacity(2 * self.dim);
                input.extend_from_slice(z);
                input.extend_from_slice(v);
                Ok(sigmoid(mlp.forward(&input)[0]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementNode {
    pub id: NodeId,
    pub label: String,
    pub embedding: EmbeddingVector,
    pub node_type: NodeType,
    pub score: f64,
}

/// Directed typed edge between positions in [`ElementGraph::nodes`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TypedEdge {
    pub head: usize,
    pub relation: RelationId,
    pub tail: usize,
}

/// Pruned reasoning graph; nodes are ordered by knowledge-graph id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementGraph {
    pub nodes: Vec<ElementNode>,
    pub edges: Vec<TypedEdge>,
    pub budget: usize,
}

impl ElementGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    pub fn type_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for n in &self.nodes {
            c[n.node_type.index()] += 1;
        }
        c
    }

    pub fn export(&self, kg: &KnowledgeGraph) -> ElementGraphExport {
        ElementGraphExport {
            budget: self.budget,
            nodes: self
                .nodes
                .iter()
                .map(|n| ExportNode {
                    id: n.id,
                    label: n.label.clone(),
                    node_type: n.node_type,
                    score: n.score,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| ExportEdge {
                    head: self.nodes[e.head].id,
                    relation: kg
                        .relation_name(e.relation)
                        .unwrap_or("unknown")
                        .to_string(),
                    tail: self.nodes[e.tail].id,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportNode {
    pub id: NodeId,
    pub label: String,
    #[serde(rename = "type")]
    pub node_type: NodeType,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportEdge {
    pub head: NodeId,
    pub relation: String,
    pub tail: NodeId,
}

/// JSON shape of an element-graph: `{budget, nodes, edges}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementGraphExport {
    pub budget: usize,
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<ExportEdge>,
}

/// Type of a concept inside the graph built for one answer choice.
pub fn node_type_for(grounded: &GroundedInput, choice: usize, id: NodeId) -> NodeType {
    let in_question = grounded.question.contains(&id);
    let in_answer = grounded.choices.get(choice).is_some_and(|c| c.contains(&id));
    match (in_question, in_answer) {
        (true, true) => NodeType::Context,
        (true, false) => NodeType::Question,
        (false, true) => NodeType::Answer,
        (false, false) if grounded.context.contains(&id) => NodeType::Context,
        (false, false) => NodeType::Kg,
    }
}

/// `(score desc, id asc)`.
pub fn rank_order(a: (f64, NodeId), b: (f64, NodeId)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Keeps seeds first, then fills the budget with the best-scoring others.
///
/// When seeds alone exceed the budget, the best-scoring seeds are kept.
pub fn select_top_k(
    scores: &[(NodeId, f64)],
    seeds: &BTreeSet<NodeId>,
    budget: usize,
) -> BTreeSet<NodeId> {
    let mut ordered: Vec<(f64, NodeId)> = scores.iter().map(|&(id, s)| (s, id)).collect();
    ordered.sort_by(|a, b| rank_order(*a, *b));
    let (mut seeded, others): (Vec<_>, Vec<_>) =
        ordered.into_iter().partition(|(_, id)| seeds.contains(id));
    seeded.extend(others);
    seeded.into_iter().take(budget).map(|(_, id)| id).collect()
}

/// Inputs for building the element-graph of one answer candidate.
pub struct CandidateContext<'a> {
    pub kg: &'a KnowledgeGraph,
    pub grounded: &'a GroundedInput,
    pub choice: usize,
    /// Pooled embedding of the input tokens.
    pub input_embedding: &'a [f64],
}

pub fn build_element_graph(
    ctx: &CandidateContext<'_>,
    neighborhood: &Subgraph,
    budget: usize,
    provider: &dyn EmbeddingProvider,
    scorer: &RelevanceScorer,
) -> Result<ElementGraph, ElementError> {
    if budget == 0 {
        return Err(ElementError::Argument("pruning budget must be >= 1".into()));
    }
    let candidates: Vec<NodeId> = neighborhood.nodes.iter().copied().collect();
    let scored: Vec<(NodeId, EmbeddingVector, f64)> = candidates
        .par_iter()
        .map(|&id| {
            let label = ctx
                .kg
                .label(id)
                .ok_or_else(|| ElementError::Argument(format!("node {id} not in graph")))?;
            let emb = provider.embed_node(label)?;
            let s = scorer.score(ctx.input_embedding, &emb)?;
            Ok((id, emb, s))
        })
        .collect::<Result<_, ElementError>>()?;

    let scores: Vec<(NodeId, f64)> = scored.iter().map(|(id, _, s)| (*id, *s)).collect();
    let seeds: BTreeSet<NodeId> = ctx
        .grounded
        .seeds_for(ctx.choice)
        .into_iter()
        .filter(|id| neighborhood.nodes.contains(id))
        .collect();
    let keep = select_top_k(&scores, &seeds, budget);

    let mut nodes: Vec<ElementNode> = scored
        .into_iter()
        .filter(|(id, _, _)| keep.contains(id))
        .map(|(id, embedding, score)| ElementNode {
            id,
            label: ctx.kg.label(id).unwrap_or_default().to_string(),
            embedding,
            node_type: node_type_for(ctx.grounded, ctx.choice, id),
            score,
        })
        .collect();
    nodes.sort_by_key(|n| n.id);
    let position: HashMap<NodeId, usize> =
        nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    let edges = neighborhood
        .edges
        .iter()
        .filter_map(|e| {
            Some(TypedEdge {
                head: *position.get(&e.head)?,
                relation: e.relation,
                tail: *position.get(&e.tail)?,
            })
        })
        .collect();
    Ok(ElementGraph {
        nodes,
        edges,
        budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_identities() {
        let u = [0.6, 0.8];
        assert!((cosine(&u, &u) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let s = RelevanceScorer::new(ScoreMode::Cosine, 2, 0);
        assert!(matches!(
            s.score(&[1.0, 2.0], &[1.0]),
            Err(ElementError::Dimension(2, 1))
        ));
    }

    #[test]
    fn tie_break_prefers_lower_id() {
        let scores = [(0, 0.9), (1, 0.5), (2, 0.5), (3, 0.1)];
        let keep = select_top_k(&scores, &BTreeSet::new(), 2);
        assert_eq!(keep, BTreeSet::from([0, 1]));
    }

    #[test]
    fn seeds_bypass_pruning() {
        let scores = [(0, 0.9), (1, 0.5), (2, 0.5), (3, 0.1)];
        let keep = select_top_k(&scores, &BTreeSet::from([3]), 2);
        assert_eq!(keep, BTreeSet::from([0, 3]));
        let keep = select_top_k(&scores, &BTreeSet::from([1, 2, 3]), 2);
        assert_eq!(keep, BTreeSet::from([1, 2]));
    }

    #[test]
    fn budget_larger_than_graph_keeps_all() {
        let scores = [(4, 0.1), (7, 0.2)];
        assert_eq!(
            select_top_k(&scores, &BTreeSet::new(), 200),
            BTreeSet::from([4, 7])
        );
    }

    #[test]
    fn one_hot_has_single_bit() {
        for t in NodeType::ALL {
            let v = t.one_hot();
            assert_eq!(v.iter().sum::<f64>(), 1.0);
            assert_eq!(v[t.index()], 1.0);
        }
    }
}
