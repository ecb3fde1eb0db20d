mod support;

use std::collections::BTreeSet;

use lmx_core::element::*;
use lmx_core::embed::{EmbeddingProvider, Pooling, SyntheticHashProvider};
use lmx_core::kg::{GroundedInput, KnowledgeGraph, NodeId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{bfs_oracle, random_kg, sort_and_cut_oracle};

fn random_seeds(rng: &mut ChaCha8Rng, n: usize) -> BTreeSet<NodeId> {
    let k = rng.random_range(1..=3.min(n));
    (0..k).map(|_| rng.random_range(0..n) as NodeId).collect()
}

#[test]
fn khop_matches_bfs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for case in 0..200 {
        let n = rng.random_range(1..=200);
        let m = rng.random_range(0..3 * n);
        let kg = random_kg(&mut rng, n, m, 4);
        let seeds = random_seeds(&mut rng, n);
        let hops = rng.random_range(0..=3);
        let sub = kg.khop_neighborhood(&seeds, hops).unwrap();
        assert_eq!(sub.nodes, bfs_oracle(&kg, &seeds, hops), "case {case}");
        let induced: Vec<_> = kg
            .edges()
            .iter()
            .filter(|e| sub.nodes.contains(&e.head) && sub.nodes.contains(&e.tail))
            .copied()
            .collect();
        let mut got = sub.edges.clone();
        got.sort();
        let mut want = induced;
        want.sort();
        assert_eq!(got, want, "case {case}");
        if hops < 3 {
            let wider = kg.khop_neighborhood(&seeds, hops + 1).unwrap();
            assert!(sub.nodes.is_subset(&wider.nodes));
        }
    }
}

/// Grounding with a concept per seed, so seeds reach the builder.
fn grounding_for(seeds: &BTreeSet<NodeId>) -> GroundedInput {
    GroundedInput {
        tokens: vec!["x".into()],
        context: BTreeSet::new(),
        question: seeds.clone(),
        choices: vec![BTreeSet::new(), BTreeSet::new()],
    }
}

#[test]
fn element_graph_matches_sort_and_cut_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let provider = SyntheticHashProvider::new(6, 3, Pooling::Mean).unwrap();
    for case in 0..200 {
        let n = rng.random_range(1..=300);
        let m = rng.random_range(0..3 * n);
        let kg = random_kg(&mut rng, n, m, 3);
        let seeds = random_seeds(&mut rng, n);
        let sub = kg.khop_neighborhood(&seeds, 2).unwrap();
        let mode = if case % 2 == 0 { ScoreMode::Cosine } else { ScoreMode::Mlp };
        let scorer = RelevanceScorer::new(mode, 6, case);
        let z: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grounded = grounding_for(&seeds);
        let budget = rng.random_range(1..=40);
        let ctx = CandidateContext {
            kg: &kg,
            grounded: &grounded,
            choice: 0,
            input_embedding: &z,
        };
        let graph = build_element_graph(&ctx, &sub, budget, &provider, &scorer).unwrap();

        let scores: Vec<(NodeId, f64)> = sub
            .nodes
            .iter()
            .map(|&id| {
                let v = provider.embed_node(kg.label(id).unwrap()).unwrap();
                (id, scorer.score(&z, &v).unwrap())
            })
            .collect();
        let kept: BTreeSet<NodeId> = graph.nodes.iter().map(|n| n.id).collect();
        assert_eq!(kept, sort_and_cut_oracle(&scores, &seeds, budget), "case {case}");
        assert!(graph.len() <= budget);

        // induced edges: exactly the subgraph edges with both ends kept
        let mut got: Vec<(NodeId, u16, NodeId)> = graph
            .edges
            .iter()
            .map(|e| (graph.nodes[e.head].id, e.relation, graph.nodes[e.tail].id))
            .collect();
        got.sort();
        let want: Vec<(NodeId, u16, NodeId)> = sub
            .edges
            .iter()
            .filter(|e| kept.contains(&e.head) && kept.contains(&e.tail))
            .map(|e| (e.head, e.relation, e.tail))
            .collect();
        assert_eq!(got, want);
        assert_eq!(graph.type_counts().iter().sum::<usize>(), graph.len());
    }
}

#[test]
fn budget_covering_everything_keeps_the_neighborhood() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let kg = random_kg(&mut rng, 30, 60, 2);
    let seeds = BTreeSet::from([0]);
    let sub = kg.khop_neighborhood(&seeds, 2).unwrap();
    let provider = SyntheticHashProvider::new(4, 0, Pooling::Mean).unwrap();
    let scorer = RelevanceScorer::new(ScoreMode::Cosine, 4, 0);
    let grounded = grounding_for(&seeds);
    let z = [0.1, 0.2, 0.3, 0.4];
    let ctx = CandidateContext {
        kg: &kg,
        grounded: &grounded,
        choice: 0,
        input_embedding: &z,
    };
    let g = build_element_graph(&ctx, &sub, 10_000, &provider, &scorer).unwrap();
    assert_eq!(g.nodes.iter().map(|n| n.id).collect::<BTreeSet<_>>(), sub.nodes);
    assert_eq!(g.edges.len(), sub.edges.len());
}

#[test]
fn relevance_mlp_matches_manual_forward() {
    let scorer = RelevanceScorer::new(ScoreMode::Mlp, 2, 0);
    let mlp = scorer.mlp().unwrap();
    let (l1, l2) = (&mlp.layers[0], &mlp.layers[1]);
    assert_eq!((l1.weight.rows, l1.weight.cols, l2.weight.rows), (2, 4, 1));
    let z = [0.3, -0.7];
    let v = [0.5, 0.25];
    let x = [z[0], z[1], v[0], v[1]];
    let mut out = l2.bias[0];
    for r in 0..2 {
        let mut pre = l1.bias[r];
        for c in 0..4 {
            pre += l1.weight.data[r * 4 + c] * x[c];
        }
        out += l2.weight.data[r] * pre.tanh();
    }
    let expected = 1.0 / (1.0 + (-out).exp());
    assert!((scorer.score(&z, &v).unwrap() - expected).abs() < 1e-15);
}

#[test]
fn synthetic_hash_vectors_match_reference_values() {
    // recomputed outside Rust from the documented fnv1a/splitmix64 procedure
    let war = SyntheticHashProvider::new(8, 7, Pooling::Mean).unwrap().vector("war");
    let expected = [
        -0.30977443325857235,
        0.9956255737889503,
        -0.6321797255964907,
        -0.37533812705789105,
        -0.7450339696199455,
        0.9811431895322611,
        0.6763209064776643,
        -0.5315628255153999,
    ];
    assert_eq!(war.0, expected);
    let multi = SyntheticHashProvider::new(4, 0, Pooling::Mean)
        .unwrap()
        .embed_node("quiet_chattering_mind")
        .unwrap();
    assert_eq!(
        multi.0,
        [-0.5656800812712717, 0.7949895926941737, -0.34356203862364, 0.0006026368079834477]
    );
}

#[test]
fn loading_the_same_files_twice_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let edges = dir.path().join("kg.tsv");
    let rels = dir.path().join("relations.txt");
    std::fs::write(&rels, "is_a\nat_location\n").unwrap();
    std::fs::write(&edges, "Ice Cream\tis_a\tdessert\ncone\tat_location\tice_cream\nfreezer\tat_location\tice_cream\n")
        .unwrap();
    let a = KnowledgeGraph::load(&edges, &rels).unwrap();
    let b = KnowledgeGraph::load(&edges, &rels).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.node_count(), 4);
    assert!(a.node_id("ice_cream").is_some());
}

fn word_graph() -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut b = lmx_core::kg::GraphBuilder::new(vec!["related_to".into()]);
    let labels = ["ice_cream", "cream", "cone", "reading", "mind", "quiet_chattering_mind", "war", "eyes"];
    for l in labels {
        b.add_node(l);
    }
    for _ in 0..10 {
        let h = labels[rng.random_range(0..labels.len())];
        let t = labels[rng.random_range(0..labels.len())];
        b.add_edge(h, 0, t);
    }
    b.build()
}

proptest! {
    #[test]
    fn grounding_is_idempotent_and_case_insensitive(
        words in proptest::collection::vec(
            prop_oneof!["ice", "cream", "cone", "Reading", "MIND", "quiet", "chattering", "War", "eyes", "the", "x"],
            1..12,
        ),
        split in 0usize..12,
    ) {
        let kg = word_graph();
        let question = words.join(" ");
        let choices: Vec<String> = vec![words[split % words.len()].clone(), "Ice Cream cone".into()];
        let once = kg.ground(&question, &choices);
        prop_assert_eq!(&once, &kg.ground(&question, &choices));
        let lower: Vec<String> = choices.iter().map(|c| c.to_lowercase()).collect();
        prop_assert_eq!(&once, &kg.ground(&question.to_lowercase(), &lower));
        prop_assert_eq!(
            once.choices[1].clone(),
            BTreeSet::from([kg.node_id("ice_cream").unwrap(), kg.node_id("cone").unwrap()])
        );
    }

    #[test]
    fn cosine_ignores_positive_scaling(
        u in proptest::collection::vec(-1.0f64..1.0, 4),
        v in proptest::collection::vec(-1.0f64..1.0, 4),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        let s = RelevanceScorer::new(ScoreMode::Cosine, 4, 0);
        let su: Vec<f64> = u.iter().map(|x| x * a).collect();
        let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
        let base = s.score(&u, &v).unwrap();
        prop_assert!((s.score(&su, &sv).unwrap() - base).abs() < 1e-9);
        prop_assert!((s.score(&v, &u).unwrap() - base).abs() < 1e-12);
    }
}
