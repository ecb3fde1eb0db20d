mod support;

use lmx_core::gat::{ForwardMode, GatConfig, GatNetwork, Upstream};
use lmx_core::nn::{dot, Parameters};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{finite_difference, random_element_graph, relative_error};

fn small_config(hidden: usize, layers: usize, relations: usize, seed: u64) -> GatConfig {
    let mut c = GatConfig::new(6, hidden, layers, relations);
    c.seed = seed;
    c.dropout = 0.0;
    c
}

/// `L = Σ c ⊙ h_K + Σ d ⊙ α_K` with fixed random coefficients.
fn linear_objective(net: &GatNetwork, graph: &lmx_core::element::ElementGraph, up: &Upstream) -> f64 {
    let fwd = net.forward(graph, ForwardMode::Eval).unwrap();
    let mut l = dot(fwd.attention.last(), &up.attention);
    for (h, c) in fwd.output().iter().zip(&up.features) {
        l += dot(h, c);
    }
    l
}

fn random_upstream(rng: &mut ChaCha8Rng, fwd: &lmx_core::gat::GatForward) -> Upstream {
    let mut up = Upstream::zeros(fwd);
    for row in &mut up.features {
        for v in row.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    for v in &mut up.attention {
        *v = rng.random_range(-1.0..1.0);
    }
    up
}

/// Relative error below 1e-4, or both sides at round-off level. The last
/// attention bias only shifts every logit equally, so its true gradient is 0.
fn gradients_agree(analytic: &[f64], numeric: &[f64]) -> bool {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    relative_error(analytic, numeric) < 1e-4 || (norm(analytic) < 1e-8 && norm(numeric) < 1e-8)
}

#[test]
fn last_attention_bias_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let graph = random_element_graph(&mut rng, 6, 9, 6, 2);
    let net = GatNetwork::new(small_config(8, 2, 2, 0)).unwrap();
    let fwd = net.forward(&graph, ForwardMode::Eval).unwrap();
    let up = random_upstream(&mut rng, &fwd);
    let grads = net.backward(&fwd, &up).params;
    let names = net.tensor_names();
    for (name, t) in names.iter().zip(grads.tensors()) {
        if name.ends_with("attention.1.bias") {
            assert!(t.iter().all(|v| v.abs() < 1e-12), "{name}: {t:?}");
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let graph = random_element_graph(&mut rng, 5, 8, 6, 3);
        let net = GatNetwork::new(small_config(8, 2, 3, seed)).unwrap();
        let fwd = net.forward(&graph, ForwardMode::Eval).unwrap();
        let up = random_upstream(&mut rng, &fwd);
        let analytic = net.backward(&fwd, &up).params;
        let numeric = finite_difference(&net, 1e-5, |p| linear_objective(p, &graph, &up));
        for ((name, a), n) in net.tensor_names().iter().zip(analytic.tensors()).zip(&numeric) {
            assert!(gradients_agree(a, n), "seed {seed} tensor {name}: relative error {:e}", relative_error(a, n));
        }
    }
}

#[test]
fn gradients_with_dropout_mask_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let graph = random_element_graph(&mut rng, 5, 7, 6, 2);
    let mut cfg = small_config(8, 2, 2, 1);
    cfg.dropout = 0.3;
    let net = GatNetwork::new(cfg).unwrap();
    let mode = ForwardMode::Train { seed: 42 };
    let fwd = net.forward(&graph, mode).unwrap();
    let up = random_upstream(&mut rng, &fwd);
    let analytic = net.backward(&fwd, &up).params;
    let numeric = finite_difference(&net, 1e-5, |p| {
        let f = p.forward(&graph, mode).unwrap();
        let mut l = dot(f.attention.last(), &up.attention);
        for (h, c) in f.output().iter().zip(&up.features) {
            l += dot(h, c);
        }
        l
    });
    for (a, n) in analytic.tensors().iter().zip(&numeric) {
        assert!(gradients_agree(a, n));
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let graph = random_element_graph(&mut rng, 6, 10, 6, 2);
    let net = GatNetwork::new(small_config(8, 3, 2, 0)).unwrap();
    let fwd = net.forward(&graph, ForwardMode::Eval).unwrap();
    let grads = net.backward(&fwd, &Upstream::zeros(&fwd));
    assert!(grads.params.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
}

#[test]
fn residual_path_gradient_is_identity_with_zeroed_output_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let graph = random_element_graph(&mut rng, 5, 8, 6, 2);
    let mut net = GatNetwork::new(small_config(8, 3, 2, 0)).unwrap();
    net.zero_output_transforms();
    let fwd = net.forward(&graph, ForwardMode::Eval).unwrap();
    let mut up = Upstream::zeros(&fwd);
    up.features[2][5] = 1.0;
    let g = net.backward(&fwd, &up);
    for (i, row) in g.input_features.iter().enumerate() {
        for (f, &v) in row.iter().enumerate() {
            let expected = if (i, f) == (2, 5) { 1.0 } else { 0.0 };
            assert_eq!(v, expected);
        }
    }
}

#[test]
fn evaluation_forward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let graph = random_element_graph(&mut rng, 20, 40, 6, 4);
    let net = GatNetwork::new(small_config(16, 3, 4, 2)).unwrap();
    let a = net.forward(&graph, ForwardMode::Eval).unwrap();
    let b = net.forward(&graph, ForwardMode::Eval).unwrap();
    assert_eq!(a.output(), b.output());
    assert_eq!(a.attention, b.attention);
}

/// Directed distance from every node to `target` along edge direction.
fn distances_to(graph: &lmx_core::element::ElementGraph, target: usize) -> Vec<usize> {
    let n = graph.len();
    let mut dist = vec![usize::MAX; n];
    dist[target] = 0;
    let mut frontier = vec![target];
    while let Some(v) = frontier.pop() {
        for e in &graph.edges {
            // information flows head -> tail
            if e.tail == v && dist[e.head] == usize::MAX {
                dist[e.head] = dist[v] + 1;
                frontier.insert(0, e.head);
            }
        }
    }
    dist
}

#[test]
fn information_moves_one_hop_per_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let graph = random_element_graph(&mut rng, 12, 14, 6, 2);
        let net = GatNetwork::new(small_config(8, 3, 2, 3)).unwrap();
        let base = net.forward(&graph, ForwardMode::Eval).unwrap();
        let target = 0;
        let dist = distances_to(&graph, target);
        for far in 0..graph.len() {
            let mut perturbed = graph.clone();
            for v in perturbed.nodes[far].embedding.0.iter_mut() {
                *v += 0.5;
            }
            perturbed.nodes[far].score += 0.25;
            let out = net.forward(&perturbed, ForwardMode::Eval).unwrap();
            for k in 0..=3 {
                if dist[far] > k {
                    assert_eq!(
                        out.features[k][target], base.features[k][target],
                        "node {far} at distance {} changed layer {k}",
                        dist[far]
                    );
                }
            }
        }
    }
}

#[test]
fn two_neighbors_with_equal_logits_split_evenly() {
    // Two identical sources feeding one target through the same relation.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut graph = random_element_graph(&mut rng, 3, 0, 6, 1);
    graph.nodes[1] = lmx_core::element::ElementNode {
        id: 1,
        ..graph.nodes[0].clone()
    };
    graph.nodes[0].id = 0;
    graph.edges = vec![
        lmx_core::element::TypedEdge { head: 0, relation: 0, tail: 2 },
        lmx_core::element::TypedEdge { head: 1, relation: 0, tail: 2 },
    ];
    let net = GatNetwork::new(small_config(8, 1, 1, 0)).unwrap();
    let fwd = net.forward(&graph, ForwardMode::Eval).unwrap();
    let alphas: Vec<f64> = fwd
        .attention
        .neighborhood(0, 2)
        .filter(|(_, r, _)| r.is_some())
        .map(|(_, _, a)| a)
        .collect();
    assert_eq!(alphas.len(), 2);
    assert_eq!(alphas[0], alphas[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_is_normalized(seed in 0u64..10_000, n in 2usize..30, extra in 0usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_element_graph(&mut rng, n, extra, 6, 3);
        let net = GatNetwork::new(small_config(8, 2, 3, seed)).unwrap();
        let fwd = net.forward(&graph, ForwardMode::Eval).unwrap();
        for layer in 0..2 {
            for i in 0..graph.len() {
                let s: f64 = fwd.attention.neighborhood(layer, i).map(|(_, _, a)| a).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
                for (_, _, a) in fwd.attention.neighborhood(layer, i) {
                    prop_assert!((0.0..=1.0).contains(&a));
                }
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
        let base = lmx_core::nn::softmax(&logits);
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        for (a, b) in base.iter().zip(lmx_core::nn::softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}
