//! Typed graph attention network over element-graphs.
//!
//! Each layer computes, for every node `i` and neighbor slot `j ∈ 𝒩ᵢ`
//! (in-edge sources of `i` plus a self-loop),
//!
//! ```text
//! α_ij     = softmax_j a([h_i ; h_j ; t(u_i) ; r_ij ; ρ(s_i) ; ρ(s_j)])
//! h'_i     = σ(Σ_j α_ij · m([h_j ; t(u_i) ; r_ij])) + h_i
//! r_ij     = ζ([onehot(rel) ; onehot(u_i) ; onehot(u_j)])
//! ```
//!
//! where `t` is the node-type embedding table, `ρ` embeds the relevance
//! score and `ζ` embeds (relation, target type, source type). `ζ` and `ρ`
//! are shared by all layers.
//!
//! The first linear layer of `m` and `a` acts on a concatenation, so it is
//! evaluated block-wise: node-dependent blocks once per node, relation
//! blocks once per distinct (relation, type, type) combination, and only
//! the sum per edge slot. The last linear layer of `m` is applied after
//! aggregation, which is exact because `Σ_j α_ij = 1`.

use std::collections::HashMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::element::{ElementGraph, NodeType};
use crate::kg::RelationId;
use crate::nn::{
    add_assign, axpy, dot, linear_tensors, linear_tensors_mut, Activation, Linear, Matrix, Mlp,
    MlpTrace, Parameters,
};

#[derive(Debug, Error, PartialEq)]
pub enum GatError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatConfig {
    /// Node embedding dimension `D`.
    pub input_dim: usize,
    /// Feature width `F`.
    pub hidden: usize,
    /// Number of attention layers.
    pub layers: usize,
    /// Knowledge-graph relation vocabulary size; the self-loop relation is appended.
    pub num_relations: usize,
    pub type_dim: usize,
    pub relation_dim: usize,
    pub score_dim: usize,
    pub message_hidden: usize,
    pub attention_hidden: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub seed: u64,
}

impl GatConfig {
    /// Widths default to `F` (relation, message, attention) and `⌈F/2⌉` (type, score).
    pub fn new(input_dim: usize, hidden: usize, layers: usize, num_relations: usize) -> Self {
        let half = hidden.div_ceil(2).max(1);
        Self {
            input_dim,
            hidden,
            layers,
            num_relations,
            type_dim: half,
            relation_dim: hidden,
            score_dim: half,
            message_hidden: hidden,
            attention_hidden: hidden,
            activation: Activation::Gelu,
            dropout: 0.2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GatError> {
        let positive = [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("type_dim", self.type_dim),
            ("relation_dim", self.relation_dim),
            ("score_dim", self.score_dim),
            ("message_hidden", self.message_hidden),
            ("attention_hidden", self.attention_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(GatError::Config(format!("{name} must be > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GatError::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Relation one-hot width including the self-loop relation.
    pub fn relation_slots(&self) -> usize {
        self.num_relations + 1
    }

    pub fn self_loop_relation(&self) -> usize {
        self.num_relations
    }

    fn message_input(&self) -> usize {
        self.hidden + self.type_dim + self.relation_dim
    }

    fn attention_input(&self) -> usize {
        2 * self.hidden + self.type_dim + self.relation_dim + 2 * self.score_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayerParams {
    /// `m`: `[h_j ; t(u_i) ; r_ij] → F`.
    pub message: Mlp,
    /// `a`: `[h_i ; h_j ; t(u_i) ; r_ij ; ρ_i ; ρ_j] → 1`.
    pub attention: Mlp,
    /// `σ`: `F → F`.
    pub output: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatNetwork {
    pub config: GatConfig,
    /// `v_emb → h₀`.
    pub input_proj: Linear,
    /// Column `u` is the embedding of node type `u`.
    pub type_table: Matrix,
    /// `ζ`
    pub relation_mlp: Mlp,
    /// `ρ`
    pub score_mlp: Mlp,
    pub layers: Vec<GatLayerParams>,
}

/// Where the neighbor in an attention slot comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSlot {
    pub target: usize,
    pub source: usize,
    /// `None` for the self-loop.
    pub relation: Option<RelationId>,
}

/// Attention coefficients of every layer, one entry per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub slots: Vec<AttentionSlot>,
    /// Slot range of each target node.
    pub ranges: Vec<Range<usize>>,
    pub layers: Vec<Vec<f64>>,
}

impl AttentionRecord {
    pub fn last(&self) -> &[f64] {
        self.layers.last().map_or(&[], Vec::as_slice)
    }

    /// `(source, relation, α)` for every slot of node `i` in layer `k`.
    pub fn neighborhood(
        &self,
        layer: usize,
        i: usize,
    ) -> impl Iterator<Item = (usize, Option<RelationId>, f64)> + '_ {
        self.ranges[i]
            .clone()
            .map(move |e| (self.slots[e].source, self.slots[e].relation, self.layers[layer][e]))
    }

    /// `Σ_i α[i→j]` for each node `j` in one layer.
    pub fn incoming_mass(&self, layer: usize, include_self: bool) -> Vec<f64> {
        let mut mass = vec![0.0; self.ranges.len()];
        for (slot, &a) in self.slots.iter().zip(&self.layers[layer]) {
            if include_self || slot.relation.is_some() {
                mass[slot.source] += a;
            }
        }
        mass
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    /// Dropout active; masks drawn from this seed.
    Train { seed: u64 },
}

/// Per-graph structure plus the layer-shared embeddings.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub slots: Vec<AttentionSlot>,
    pub ranges: Vec<Range<usize>>,
    slot_combo: Vec<usize>,
    node_types: Vec<usize>,
    /// `(relation slot, target type, source type)`.
    combos: Vec<(usize, usize, usize)>,
    combo_traces: Vec<MlpTrace>,
    combo_embeddings: Vec<Vec<f64>>,
    score_traces: Vec<MlpTrace>,
    score_embeddings: Vec<Vec<f64>>,
    type_embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    msg_pre: Vec<Vec<f64>>,
    msg_tail: Vec<MlpTrace>,
    msg_x: Vec<Vec<f64>>,
    att_pre: Vec<Vec<f64>>,
    att_tail: Vec<MlpTrace>,
    pub logits: Vec<f64>,
    pub alpha: Vec<f64>,
    agg: Vec<Vec<f64>>,
    out_traces: Vec<MlpTrace>,
    /// Multiplier applied to σ's output (dropout), per node and feature.
    mask: Option<Vec<Vec<f64>>>,
}

/// Result of a full forward pass, retaining what backward needs.
#[derive(Debug, Clone)]
pub struct GatForward {
    /// `h₀ … h_K`.
    pub features: Vec<Vec<Vec<f64>>>,
    pub attention: AttentionRecord,
    pub prepared: Prepared,
    pub layers: Vec<LayerTrace>,
    inputs: Vec<Vec<f64>>,
}

impl GatForward {
    pub fn output(&self) -> &[Vec<f64>] {
        self.features.last().expect("at least h0")
    }
}

/// Gradient of a scalar objective w.r.t. the network outputs.
#[derive(Debug, Clone)]
pub struct Upstream {
    /// `∂L/∂h_K`, one row per node.
    pub features: Vec<Vec<f64>>,
    /// `∂L/∂α_K`, one entry per slot of the last layer.
    pub attention: Vec<f64>,
}

impl Upstream {
    pub fn zeros(fwd: &GatForward) -> Self {
        let f = fwd.output().first().map_or(0, Vec::len);
        Self {
            features: vec![vec![0.0; f]; fwd.output().len()],
            attention: vec![0.0; fwd.attention.slots.len()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatGradients {
    pub params: GatNetwork,
    /// `∂L/∂h₀`.
    pub input_features: Vec<Vec<f64>>,
}

struct AttentionPass {
    pre: Vec<Vec<f64>>,
    tails: Vec<MlpTrace>,
    logits: Vec<f64>,
    alpha: Vec<f64>,
}

fn bernoulli_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let keep = 1.0 - rate;
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        })
        .collect()
}

fn apply_act(act: Activation, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| act.apply(v)).collect()
}

fn act_backward(act: Activation, pre: &[f64], d: &[f64]) -> Vec<f64> {
    d.iter()
        .zip(pre)
        .map(|(g, &p)| g * act.derivative(p))
        .collect()
}

impl GatNetwork {
    pub fn new(config: GatConfig) -> Result<Self, GatError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        let act = c.activation;
        let input_proj = Linear::glorot(c.input_dim, c.hidden, &mut rng);
        let type_table = Linear::glorot(NodeType::COUNT, c.type_dim, &mut rng).weight;
        let relation_mlp = Mlp::new(
            &[c.relation_slots() + 2 * NodeType::COUNT, c.relation_dim, c.relation_dim],
            act,
            &mut rng,
        );
        let score_mlp = Mlp::new(&[1, c.score_dim, c.score_dim], act, &mut rng);
        let layers = (0..c.layers)
            .map(|_| GatLayerParams {
                message: Mlp::new(&[c.message_input(), c.message_hidden, c.hidden], act, &mut rng),
                attention: Mlp::new(&[c.attention_input(), c.attention_hidden, 1], act, &mut rng),
                output: Mlp::new(&[c.hidden, c.hidden, c.hidden], act, &mut rng),
            })
            .collect();
        Ok(Self {
            config,
            input_proj,
            type_table,
            relation_mlp,
            score_mlp,
            layers,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Zeroes every parameter of every output transform `σ`.
    pub fn zero_output_transforms(&mut self) {
        for l in &mut self.layers {
            l.output.zero_all();
        }
    }

    /// `ζ([onehot(rel) ; onehot(u_i) ; onehot(u_j)])`; `rel = None` is the self-loop.
    pub fn relation_embed(
        &self,
        relation: Option<RelationId>,
        target: NodeType,
        source: NodeType,
    ) -> Result<Vec<f64>, GatError> {
        let slot = self.relation_slot(relation)?;
        Ok(self
            .relation_mlp
            .forward(&self.relation_input(slot, target.index(), source.index())))
    }

    fn relation_slot(&self, relation: Option<RelationId>) -> Result<usize, GatError> {
        match relation {
            None => Ok(self.config.self_loop_relation()),
            Some(r) if (r as usize) < self.config.num_relations => Ok(r as usize),
            Some(r) => Err(GatError::Argument(format!(
                "relation id {r} outside vocabulary of {}",
                self.config.num_relations
            ))),
        }
    }

    fn relation_input(&self, slot: usize, target: usize, source: usize) -> Vec<f64> {
        let r = self.config.relation_slots();
        let mut x = vec![0.0; r + 2 * NodeType::COUNT];
        x[slot] = 1.0;
        x[r + target] = 1.0;
        x[r + NodeType::COUNT + source] = 1.0;
        x
    }

    pub fn type_embedding(&self, t: usize) -> Vec<f64> {
        (0..self.config.type_dim)
            .map(|r| self.type_table.get(r, t))
            .collect()
    }

    pub fn prepare(&self, graph: &ElementGraph) -> Result<Prepared, GatError> {
        let n = graph.len();
        for node in &graph.nodes {
            if node.embedding.len() != self.config.input_dim {
                return Err(GatError::Argument(format!(
                    "node `{}` has embedding dimension {}, expected {}",
                    node.label,
                    node.embedding.len(),
                    self.config.input_dim
                )));
            }
        }
        let mut incoming: Vec<Vec<(usize, RelationId)>> = vec![Vec::new(); n];
        for e in &graph.edges {
            if e.head >= n || e.tail >= n {
                return Err(GatError::Argument("edge endpoint outside graph".into()));
            }
            self.relation_slot(Some(e.relation))?;
            incoming[e.tail].push((e.head, e.relation));
        }
        let node_types: Vec<usize> = graph.nodes.iter().map(|n| n.node_type.index()).collect();

        let mut slots = Vec::with_capacity(n + graph.edges.len());
        let mut ranges = Vec::with_capacity(n);
        for (i, inc) in incoming.iter().enumerate() {
            let start = slots.len();
            slots.push(AttentionSlot {
                target: i,
                source: i,
                relation: None,
            });
            for &(j, r) in inc {
                slots.push(AttentionSlot {
                    target: i,
                    source: j,
                    relation: Some(r),
                });
            }
            ranges.push(start..slots.len());
        }

        let mut combo_index: HashMap<(usize, usize, usize), usize> = HashMap::new();
        let mut combos = Vec::new();
        let slot_combo = slots
            .iter()
            .map(|s| {
                let rel = s
                    .relation
                    .map_or(self.config.self_loop_relation(), |r| r as usize);
                let key = (rel, node_types[s.target], node_types[s.source]);
                *combo_index.entry(key).or_insert_with(|| {
                    combos.push(key);
                    combos.len() - 1
                })
            })
            .collect();
        let combo_traces: Vec<MlpTrace> = combos
            .iter()
            .map(|&(r, t, s)| self.relation_mlp.forward_traced(&self.relation_input(r, t, s)))
            .collect();
        let combo_embeddings = combo_traces.iter().map(|t| t.output().to_vec()).collect();
        let score_traces: Vec<MlpTrace> = graph
            .nodes
            .iter()
            .map(|node| self.score_mlp.forward_traced(&[node.score]))
            .collect();
        let score_embeddings = score_traces.iter().map(|t| t.output().to_vec()).collect();
        let type_embeddings = (0..NodeType::COUNT).map(|t| self.type_embedding(t)).collect();
        Ok(Prepared {
            slots,
            ranges,
            slot_combo,
            node_types,
            combos,
            combo_traces,
            combo_embeddings,
            score_traces,
            score_embeddings,
            type_embeddings,
        })
    }

    /// `h₀ = W v_emb + b`.
    pub fn project_inputs(&self, graph: &ElementGraph) -> Vec<Vec<f64>> {
        graph
            .nodes
            .iter()
            .map(|n| self.input_proj.forward(&n.embedding))
            .collect()
    }

    /// Attention coefficients of layer `k` given its input features.
    pub fn attention_coefficients(&self, k: usize, prep: &Prepared, h: &[Vec<f64>]) -> Vec<f64> {
        self.attention_pass(&self.layers[k], prep, h).alpha
    }

    fn attention_pass(&self, layer: &GatLayerParams, prep: &Prepared, h: &[Vec<f64>]) -> AttentionPass {
        let c = &self.config;
        let a0 = &layer.attention.layers[0];
        let hidden = a0.output_dim();
        let off_hj = c.hidden;
        let off_t = 2 * c.hidden;
        let off_r = off_t + c.type_dim;
        let off_si = off_r + c.relation_dim;
        let off_sj = off_si + c.score_dim;

        let n = h.len();
        let mut tgt = vec![vec![0.0; hidden]; n];
        let mut src = vec![vec![0.0; hidden]; n];
        for i in 0..n {
            a0.weight.matvec_block_acc(0, &h[i], &mut tgt[i]);
            a0.weight
                .matvec_block_acc(off_t, &prep.type_embeddings[prep.node_types[i]], &mut tgt[i]);
            a0.weight
                .matvec_block_acc(off_si, &prep.score_embeddings[i], &mut tgt[i]);
            a0.weight.matvec_block_acc(off_hj, &h[i], &mut src[i]);
            a0.weight
                .matvec_block_acc(off_sj, &prep.score_embeddings[i], &mut src[i]);
        }
        let combo: Vec<Vec<f64>> = prep
            .combo_embeddings
            .iter()
            .map(|r| {
                let mut out = a0.bias.clone();
                a0.weight.matvec_block_acc(off_r, r, &mut out);
                out
            })
            .collect();

        let n_layers = layer.attention.layers.len();
        let mut pre = Vec::with_capacity(prep.slots.len());
        let mut tails = Vec::with_capacity(prep.slots.len());
        let mut logits = Vec::with_capacity(prep.slots.len());
        for (e, slot) in prep.slots.iter().enumerate() {
            let mut q = combo[prep.slot_combo[e]].clone();
            add_assign(&mut q, &tgt[slot.target]);
            add_assign(&mut q, &src[slot.source]);
            let act = apply_act(layer.attention.activation, &q);
            let tail = layer.attention.forward_range(1, n_layers, &act);
            logits.push(tail.output()[0]);
            pre.push(q);
            tails.push(tail);
        }
        let mut alpha = vec![0.0; logits.len()];
        for r in &prep.ranges {
            let p = crate::nn::softmax(&logits[r.clone()]);
            alpha[r.clone()].copy_from_slice(&p);
        }
        AttentionPass {
            pre,
            tails,
            logits,
            alpha,
        }
    }

    /// One attention layer: returns `h_{k+1}` and the trace.
    pub fn layer_forward(
        &self,
        k: usize,
        prep: &Prepared,
        h: &[Vec<f64>],
        mode: ForwardMode,
    ) -> (Vec<Vec<f64>>, LayerTrace) {
        let c = &self.config;
        let layer = &self.layers[k];
        let n = h.len();
        let AttentionPass {
            pre: att_pre,
            tails: att_tail,
            logits,
            alpha,
        } = self.attention_pass(layer, prep, h);

        // message first layer, block-wise
        let m0 = &layer.message.layers[0];
        let mh = m0.output_dim();
        let off_t = c.hidden;
        let off_r = c.hidden + c.type_dim;
        let mut src = vec![vec![0.0; mh]; n];
        for j in 0..n {
            m0.weight.matvec_block_acc(0, &h[j], &mut src[j]);
        }
        let type_part: Vec<Vec<f64>> = prep
            .type_embeddings
            .iter()
            .map(|t| {
                let mut out = vec![0.0; mh];
                m0.weight.matvec_block_acc(off_t, t, &mut out);
                out
            })
            .collect();
        let combo: Vec<Vec<f64>> = prep
            .combo_embeddings
            .iter()
            .map(|r| {
                let mut out = m0.bias.clone();
                m0.weight.matvec_block_acc(off_r, r, &mut out);
                out
            })
            .collect();

        let n_msg = layer.message.layers.len();
        let mut msg_pre = Vec::with_capacity(prep.slots.len());
        let mut msg_tail = Vec::with_capacity(prep.slots.len());
        let mut msg_x = Vec::with_capacity(prep.slots.len());
        for (e, slot) in prep.slots.iter().enumerate() {
            let mut g = combo[prep.slot_combo[e]].clone();
            add_assign(&mut g, &src[slot.source]);
            add_assign(&mut g, &type_part[prep.node_types[slot.target]]);
            let act = apply_act(layer.message.activation, &g);
            let tail = layer.message.forward_range(1, n_msg - 1, &act);
            let x = match tail.preacts.last() {
                Some(p) => layer.message.post(n_msg - 2, p),
                None => act,
            };
            msg_pre.push(g);
            msg_tail.push(tail);
            msg_x.push(x);
        }

        let last = &layer.message.layers[n_msg - 1];
        let mut agg = vec![vec![0.0; last.input_dim()]; n];
        for (e, slot) in prep.slots.iter().enumerate() {
            axpy(&mut agg[slot.target], alpha[e], &msg_x[e]);
        }

        let mask = match mode {
            ForwardMode::Train { seed } if c.dropout > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9));
                Some(bernoulli_mask(n, c.hidden, c.dropout, &mut rng))
            }
            _ => None,
        };

        let mut out_traces = Vec::with_capacity(n);
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let msg = last.forward(&agg[i]);
            let trace = layer.output.forward_traced(&msg);
            let mut y = trace.output().to_vec();
            if let Some(m) = &mask {
                for (v, s) in y.iter_mut().zip(&m[i]) {
                    *v *= s;
                }
            }
            add_assign(&mut y, &h[i]);
            out_traces.push(trace);
            next.push(y);
        }
        let trace = LayerTrace {
            msg_pre,
            msg_tail,
            msg_x,
            att_pre,
            att_tail,
            logits,
            alpha,
            agg,
            out_traces,
            mask,
        };
        (next, trace)
    }

    pub fn forward(&self, graph: &ElementGraph, mode: ForwardMode) -> Result<GatForward, GatError> {
        let prepared = self.prepare(graph)?;
        let inputs: Vec<Vec<f64>> = graph.nodes.iter().map(|n| n.embedding.0.clone()).collect();
        let mut features = vec![self.project_inputs(graph)];
        let mut layers = Vec::with_capacity(self.layers.len());
        for k in 0..self.layers.len() {
            let (next, trace) = self.layer_forward(k, &prepared, &features[k], mode);
            features.push(next);
            layers.push(trace);
        }
        let attention = AttentionRecord {
            slots: prepared.slots.clone(),
            ranges: prepared.ranges.clone(),
            layers: layers.iter().map(|l| l.alpha.clone()).collect(),
        };
        Ok(GatForward {
            features,
            attention,
            prepared,
            layers,
            inputs,
        })
    }

    /// Exact reverse-mode gradients for every parameter.
    pub fn backward(&self, fwd: &GatForward, upstream: &Upstream) -> GatGradients {
        let c = &self.config;
        let prep = &fwd.prepared;
        let n = fwd.output().len();
        let mut grads = self.zeros_like();
        let mut dh = upstream.features.clone();
        let mut d_combo = vec![vec![0.0; c.relation_dim]; prep.combos.len()];
        let mut d_score = vec![vec![0.0; c.score_dim]; n];
        let mut d_type = vec![vec![0.0; c.type_dim]; NodeType::COUNT];

        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let lg = &mut grads.layers[k];
            let tr = &fwd.layers[k];
            let h = &fwd.features[k];
            let mut dh_prev = dh.clone();

            // σ and the message's last linear layer, per node
            let n_msg = layer.message.layers.len();
            let last = &layer.message.layers[n_msg - 1];
            let mut dagg = Vec::with_capacity(n);
            for i in 0..n {
                let mut dy = dh[i].clone();
                if let Some(m) = &tr.mask {
                    for (g, s) in dy.iter_mut().zip(&m[i]) {
                        *g *= s;
                    }
                }
                let dmsg = layer.output.backward(&tr.out_traces[i], &dy, &mut lg.output);
                dagg.push(last.backward(&tr.agg[i], &dmsg, &mut lg.message.layers[n_msg - 1]));
            }

            let mut dalpha = if k + 1 == self.layers.len() {
                upstream.attention.clone()
            } else {
                vec![0.0; prep.slots.len()]
            };

            // message first-layer gradients, accumulated by role
            let mh = layer.message.layers[0].output_dim();
            let mut g_src = vec![vec![0.0; mh]; n];
            let mut g_type = vec![vec![0.0; mh]; NodeType::COUNT];
            let mut g_combo = vec![vec![0.0; mh]; prep.combos.len()];
            for (e, slot) in prep.slots.iter().enumerate() {
                let da = &dagg[slot.target];
                dalpha[e] += dot(&tr.msg_x[e], da);
                let dx: Vec<f64> = da.iter().map(|v| v * tr.alpha[e]).collect();
                let tail = &tr.msg_tail[e];
                let d_act = match tail.preacts.last() {
                    Some(p) => {
                        let dpre = act_backward(layer.message.activation, p, &dx);
                        layer.message.backward_range(1, tail, &dpre, &mut lg.message)
                    }
                    None => dx,
                };
                let dg = act_backward(layer.message.activation, &tr.msg_pre[e], &d_act);
                add_assign(&mut g_src[slot.source], &dg);
                add_assign(&mut g_type[prep.node_types[slot.target]], &dg);
                add_assign(&mut g_combo[prep.slot_combo[e]], &dg);
            }

            // softmax within each neighborhood
            let mut dlogit = vec![0.0; prep.slots.len()];
            for r in &prep.ranges {
                let s: f64 = r.clone().map(|e| tr.alpha[e] * dalpha[e]).sum();
                for e in r.clone() {
                    dlogit[e] = tr.alpha[e] * (dalpha[e] - s);
                }
            }

            let ah = layer.attention.layers[0].output_dim();
            let mut a_tgt = vec![vec![0.0; ah]; n];
            let mut a_src = vec![vec![0.0; ah]; n];
            let mut a_combo = vec![vec![0.0; ah]; prep.combos.len()];
            for (e, slot) in prep.slots.iter().enumerate() {
                let d_act =
                    layer
                        .attention
                        .backward_range(1, &tr.att_tail[e], &[dlogit[e]], &mut lg.attention);
                let dq = act_backward(layer.attention.activation, &tr.att_pre[e], &d_act);
                add_assign(&mut a_tgt[slot.target], &dq);
                add_assign(&mut a_src[slot.source], &dq);
                add_assign(&mut a_combo[prep.slot_combo[e]], &dq);
            }

            // scatter first-layer block gradients
            let m0 = &layer.message.layers[0];
            let gm0 = &mut lg.message.layers[0];
            let (off_t, off_r) = (c.hidden, c.hidden + c.type_dim);
            for j in 0..n {
                gm0.weight.outer_block_acc(0, &g_src[j], &h[j]);
                m0.weight.matvec_t_block_acc(0, &g_src[j], &mut dh_prev[j]);
                add_assign(&mut gm0.bias, &g_src[j]);
            }
            for t in 0..NodeType::COUNT {
                gm0.weight
                    .outer_block_acc(off_t, &g_type[t], &prep.type_embeddings[t]);
                m0.weight.matvec_t_block_acc(off_t, &g_type[t], &mut d_type[t]);
            }
            for (ci, g) in g_combo.iter().enumerate() {
                gm0.weight
                    .outer_block_acc(off_r, g, &prep.combo_embeddings[ci]);
                m0.weight.matvec_t_block_acc(off_r, g, &mut d_combo[ci]);
            }

            let a0 = &layer.attention.layers[0];
            let ga0 = &mut lg.attention.layers[0];
            let off_hj = c.hidden;
            let off_t = 2 * c.hidden;
            let off_r = off_t + c.type_dim;
            let off_si = off_r + c.relation_dim;
            let off_sj = off_si + c.score_dim;
            for i in 0..n {
                let t = prep.node_types[i];
                let te = &prep.type_embeddings[t];
                let se = &prep.score_embeddings[i];
                ga0.weight.outer_block_acc(0, &a_tgt[i], &h[i]);
                a0.weight.matvec_t_block_acc(0, &a_tgt[i], &mut dh_prev[i]);
                ga0.weight.outer_block_acc(off_t, &a_tgt[i], te);
                a0.weight.matvec_t_block_acc(off_t, &a_tgt[i], &mut d_type[t]);
                ga0.weight.outer_block_acc(off_si, &a_tgt[i], se);
                a0.weight.matvec_t_block_acc(off_si, &a_tgt[i], &mut d_score[i]);

                ga0.weight.outer_block_acc(off_hj, &a_src[i], &h[i]);
                a0.weight.matvec_t_block_acc(off_hj, &a_src[i], &mut dh_prev[i]);
                ga0.weight.outer_block_acc(off_sj, &a_src[i], se);
                a0.weight.matvec_t_block_acc(off_sj, &a_src[i], &mut d_score[i]);
                add_assign(&mut ga0.bias, &a_src[i]);
            }
            for (ci, g) in a_combo.iter().enumerate() {
                ga0.weight
                    .outer_block_acc(off_r, g, &prep.combo_embeddings[ci]);
                a0.weight.matvec_t_block_acc(off_r, g, &mut d_combo[ci]);
            }

            dh = dh_prev;
        }

        for (ci, d) in d_combo.iter().enumerate() {
            self.relation_mlp
                .backward(&prep.combo_traces[ci], d, &mut grads.relation_mlp);
        }
        for (i, d) in d_score.iter().enumerate() {
            self.score_mlp
                .backward(&prep.score_traces[i], d, &mut grads.score_mlp);
        }
        for (t, d) in d_type.iter().enumerate() {
            for (r, v) in d.iter().enumerate() {
                let cur = grads.type_table.get(r, t);
                grads.type_table.set(r, t, cur + v);
            }
        }
        for (i, d) in dh.iter().enumerate() {
            grads.input_proj.weight.outer_block_acc(0, d, &fwd.inputs[i]);
            add_assign(&mut grads.input_proj.bias, d);
        }
        GatGradients {
            params: grads,
            input_features: dh,
        }
    }
}

impl Parameters for GatNetwork {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = linear_tensors(&self.input_proj).to_vec();
        t.push(&self.type_table.data);
        t.extend(self.relation_mlp.tensors());
        t.extend(self.score_mlp.tensors());
        for l in &self.layers {
            t.extend(l.message.tensors());
            t.extend(l.attention.tensors());
            t.extend(l.output.tensors());
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = linear_tensors_mut(&mut self.input_proj).into_iter().collect();
        t.push(&mut self.type_table.data);
        t.extend(self.relation_mlp.tensors_mut());
        t.extend(self.score_mlp.tensors_mut());
        for l in &mut self.layers {
            t.extend(l.message.tensors_mut());
            t.extend(l.attention.tensors_mut());
            t.extend(l.output.tensors_mut());
        }
        t
    }
}

impl GatNetwork {
    /// Names matching [`Parameters::tensors`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["input_proj.weight".to_string(), "input_proj.bias".to_string()];
        names.push("type_table".into());
        let mlp_names = |prefix: &str, m: &Mlp| -> Vec<String> {
            (0..m.layers.len())
                .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
                .collect()
        };
        names.extend(mlp_names("relation_mlp", &self.relation_mlp));
        names.extend(mlp_names("score_mlp", &self.score_mlp));
        for (k, l) in self.layers.iter().enumerate() {
            names.extend(mlp_names(&format!("layer{k}.message"), &l.message));
            names.extend(mlp_names(&format!("layer{k}.attention"), &l.attention));
            names.extend(mlp_names(&format!("layer{k}.output"), &l.output));
        }
        names
    }
}
