//! Shared fixtures and independent oracles for integration tests.

#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use lmx_core::element::{ElementGraph, ElementNode, NodeType, TypedEdge};
use lmx_core::embed::EmbeddingVector;
use lmx_core::kg::{GraphBuilder, KnowledgeGraph, NodeId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_element_graph(
    rng: &mut ChaCha8Rng,
    nodes: usize,
    edges: usize,
    dim: usize,
    relations: usize,
) -> ElementGraph {
    let nodes: Vec<ElementNode> = (0..nodes)
        .map(|i| ElementNode {
            id: i as NodeId,
            label: format!("n{i}"),
            embedding: EmbeddingVector((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
            node_type: NodeType::ALL[rng.random_range(0..4)],
            score: rng.random_range(0.0..1.0),
        })
        .collect();
    let n = nodes.len();
    let edges = (0..edges)
        .map(|_| TypedEdge {
            head: rng.random_range(0..n),
            relation: rng.random_range(0..relations) as u16,
            tail: rng.random_range(0..n),
        })
        .filter(|e| e.head != e.tail)
        .collect();
    ElementGraph {
        nodes,
        edges,
        budget: n,
    }
}

pub fn random_kg(rng: &mut ChaCha8Rng, nodes: usize, edges: usize, relations: usize) -> KnowledgeGraph {
    let mut b = GraphBuilder::new((0..relations).map(|r| format!("rel{r}")).collect());
    for i in 0..nodes {
        b.add_node(&format!("c{i}"));
    }
    for _ in 0..edges {
        let h = rng.random_range(0..nodes);
        let t = rng.random_range(0..nodes);
        let r = rng.random_range(0..relations) as u16;
        b.add_edge(&format!("c{h}"), r, &format!("c{t}"));
    }
    b.build()
}

/// Level-synchronous BFS over an explicit undirected adjacency matrix.
pub fn bfs_oracle(kg: &KnowledgeGraph, seeds: &BTreeSet<NodeId>, hops: usize) -> BTreeSet<NodeId> {
    let n = kg.node_count();
    let mut adj = vec![vec![false; n]; n];
    for e in kg.edges() {
        adj[e.head as usize][e.tail as usize] = true;
        adj[e.tail as usize][e.head as usize] = true;
    }
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for &s in seeds {
        dist[s as usize] = 0;
        queue.push_back(s as usize);
    }
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if adj[u][v] && dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    (0..n)
        .filter(|&v| dist[v] <= hops)
        .map(|v| v as NodeId)
        .collect()
}

/// Sort every node by (score desc, id asc), keep seeds, fill to the budget.
pub fn sort_and_cut_oracle(
    scores: &[(NodeId, f64)],
    seeds: &BTreeSet<NodeId>,
    budget: usize,
) -> BTreeSet<NodeId> {
    let mut all = scores.to_vec();
    // insertion sort, deliberately naive
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (all[j - 1], all[j]);
            let swap = b.1 > a.1 || (b.1 == a.1 && b.0 < a.0);
            if !swap {
                break;
            }
            all.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut kept: Vec<NodeId> = all.iter().filter(|(id, _)| seeds.contains(id)).map(|p| p.0).collect();
    kept.truncate(budget);
    for (id, _) in &all {
        if kept.len() >= budget {
            break;
        }
        if !seeds.contains(id) {
            kept.push(*id);
        }
    }
    kept.into_iter().collect()
}

/// Per-tensor relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

/// Central differences for every entry of every tensor of `model`.
pub fn finite_difference<P, F>(model: &P, step: f64, mut loss: F) -> Vec<Vec<f64>>
where
    P: lmx_core::nn::Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    let mut probe = model.clone();
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (t, &len) in sizes.iter().enumerate() {
        let mut grads = Vec::with_capacity(len);
        for j in 0..len {
            let orig = probe.tensors()[t][j];
            probe.tensors_mut()[t][j] = orig + step;
            let plus = loss(&probe);
            probe.tensors_mut()[t][j] = orig - step;
            let minus = loss(&probe);
            probe.tensors_mut()[t][j] = orig;
            grads.push((plus - minus) / (2.0 * step));
        }
        out.push(grads);
    }
    out
}
