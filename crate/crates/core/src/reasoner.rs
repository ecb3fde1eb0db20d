//! Answer scoring, prediction and end-to-end training.
//!
//! Each candidate is scored by a small head over
//! `[ℍ^LM ; pool(h_K) ; pool(α_K)]`:
//!
//! * `pool(h_K)` is the mean of final node features weighted by each node's
//!   incoming attention mass (self-loops included). Every target's
//!   coefficients sum to one, so the total mass is exactly `N`.
//! * `pool(α_K)` is `[mean mass of answer nodes, max mass, entropy of α_K/N,
//!   mean mass of kg nodes]`. An empty group contributes 0.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::element::{ElementGraph, NodeType};
use crate::embed::splitmix64;
use crate::gat::{ForwardMode, GatConfig, GatError, GatForward, GatNetwork, Upstream};
use crate::nn::{accumulate, axpy, dot, linear_tensors, linear_tensors_mut, softmax, Mlp, MlpTrace, Parameters};
use crate::optim::{AdamW, AdamWConfig};
use crate::pipeline::{AnswerCandidate, GraphPipeline, PipelineError};

pub const ALPHA_SUMMARY: usize = 4;

/// Items per gradient chunk. Chunks run in parallel and are summed in order,
/// so results do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum ReasonerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error(transparent)]
    Gat(#[from] GatError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<usize>,
}

pub fn parse_dataset(text: &str) -> Result<Vec<QaItem>, ReasonerError> {
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: QaItem = serde_json::from_str(line)
            .map_err(|e| ReasonerError::Data(format!("line {}: {e}", n + 1)))?;
        if let Some(a) = item.answer {
            if a >= item.choices.len() {
                return Err(ReasonerError::Data(format!(
                    "line {}: answer index {a} out of range for {} choices",
                    n + 1,
                    item.choices.len()
                )));
            }
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_dataset(path: &Path) -> Result<Vec<QaItem>, ReasonerError> {
    let io = |source| ReasonerError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(io)?);
        text.push('\n');
    }
    parse_dataset(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerConfig {
    pub gat: GatConfig,
    /// Width of `ℍ^LM`.
    pub lm_dim: usize,
    pub head_hidden: usize,
}

impl ReasonerConfig {
    pub fn new(gat: GatConfig, lm_dim: usize) -> Self {
        let head_hidden = gat.hidden;
        Self {
            gat,
            lm_dim,
            head_hidden,
        }
    }

    pub fn head_input(&self) -> usize {
        self.lm_dim + self.gat.hidden + ALPHA_SUMMARY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reasoner {
    pub config: ReasonerConfig,
    pub gat: GatNetwork,
    pub head: Mlp,
}

/// Forward state of one candidate, kept for backprop and explanation.
#[derive(Debug, Clone)]
pub struct CandidateScore {
    pub logit: f64,
    pub head_trace: MlpTrace,
    /// `None` for an empty element-graph.
    pub forward: Option<GatForward>,
}

#[derive(Debug, Clone)]
pub struct PredictionOutput {
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
    pub predicted: usize,
    pub scores: Vec<CandidateScore>,
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `pool(h_K)` and the attention masses it was weighted by.
pub fn pool_features(fwd: &GatForward) -> Vec<f64> {
    let h = fwd.output();
    let n = h.len();
    let width = h.first().map_or(0, Vec::len);
    let mut out = vec![0.0; width];
    if n == 0 {
        return out;
    }
    let mass = fwd.attention.incoming_mass(fwd.attention.layers.len() - 1, true);
    for (hj, &m) in h.iter().zip(&mass) {
        axpy(&mut out, m / n as f64, hj);
    }
    out
}

fn group_mean(graph: &ElementGraph, mass: &[f64], t: NodeType) -> f64 {
    let (sum, count) = graph
        .nodes
        .iter()
        .zip(mass)
        .filter(|(node, _)| node.node_type == t)
        .fold((0.0, 0usize), |(s, c), (_, &m)| (s + m, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// `pool(α_K)`.
pub fn attention_summary(graph: &ElementGraph, fwd: &GatForward) -> [f64; ALPHA_SUMMARY] {
    let n = graph.len();
    if n == 0 {
        return [0.0; ALPHA_SUMMARY];
    }
    let mass = fwd.attention.incoming_mass(fwd.attention.layers.len() - 1, true);
    let max = mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let entropy: f64 = fwd
        .attention
        .last()
        .iter()
        .map(|&a| a / n as f64)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    [
        group_mean(graph, &mass, NodeType::Answer),
        max,
        entropy,
        group_mean(graph, &mass, NodeType::Kg),
    ]
}

/// Seed for one candidate's dropout masks.
pub fn dropout_seed(seed: u64, epoch: usize, step: usize, item: usize, candidate: usize) -> u64 {
    [epoch, step, item, candidate]
        .iter()
        .fold(splitmix64(seed), |acc, &x| splitmix64(acc ^ x as u64))
}

impl Reasoner {
    pub fn new(config: ReasonerConfig) -> Result<Self, ReasonerError> {
        if config.lm_dim == 0 || config.head_hidden == 0 {
            return Err(ReasonerError::Config("lm_dim and head_hidden must be > 0".into()));
        }
        let gat = GatNetwork::new(config.gat.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.gat.seed ^ 0x4845_4144));
        let head = Mlp::new(
            &[config.head_input(), config.head_hidden, 1],
            config.gat.activation,
            &mut rng,
        );
        Ok(Self { config, gat, head })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            gat: self.gat.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = self.gat.tensor_names();
        for i in 0..self.head.layers.len() {
            names.push(format!("head.{i}.weight"));
            names.push(format!("head.{i}.bias"));
        }
        names
    }

    pub fn head_input(&self, candidate: &AnswerCandidate, fwd: Option<&GatForward>) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.config.head_input());
        x.extend_from_slice(&candidate.lm);
        match fwd {
            Some(f) => {
                x.extend(pool_features(f));
                x.extend(attention_summary(&candidate.graph, f));
            }
            None => x.extend(std::iter::repeat_n(0.0, self.config.gat.hidden + ALPHA_SUMMARY)),
        }
        x
    }

    pub fn score(&self, candidate: &AnswerCandidate, mode: ForwardMode) -> Result<CandidateScore, ReasonerError> {
        if candidate.lm.len() != self.config.lm_dim {
            return Err(ReasonerError::Config(format!(
                "LM representation has dimension {}, head expects {}",
                candidate.lm.len(),
                self.config.lm_dim
            )));
        }
        let forward = if candidate.graph.is_empty() {
            None
        } else {
            Some(self.gat.forward(&candidate.graph, mode)?)
        };
        let head_trace = self.head.forward_traced(&self.head_input(candidate, forward.as_ref()));
        Ok(CandidateScore {
            logit: head_trace.output()[0],
            head_trace,
            forward,
        })
    }

    pub fn predict(&self, candidates: &[AnswerCandidate]) -> Result<PredictionOutput, ReasonerError> {
        self.predict_with(candidates, |_| ForwardMode::Eval)
    }

    fn predict_with(
        &self,
        candidates: &[AnswerCandidate],
        mode: impl Fn(usize) -> ForwardMode,
    ) -> Result<PredictionOutput, ReasonerError> {
        if candidates.len() < 2 {
            return Err(ReasonerError::Argument(format!(
                "need at least 2 choices, got {}",
                candidates.len()
            )));
        }
        let scores = candidates
            .iter()
            .enumerate()
            .map(|(c, cand)| self.score(cand, mode(c)))
            .collect::<Result<Vec<_>, _>>()?;
        let logits: Vec<f64> = scores.iter().map(|s| s.logit).collect();
        let probabilities = softmax(&logits);
        Ok(PredictionOutput {
            predicted: argmax(&probabilities),
            probabilities,
            logits,
            scores,
        })
    }

    /// Accumulates `dlogit · ∂logit/∂θ` for one candidate into `grads`.
    pub fn backward_candidate(
        &self,
        candidate: &AnswerCandidate,
        score: &CandidateScore,
        dlogit: f64,
        grads: &mut Reasoner,
    ) {
        let dx = self.head.backward(&score.head_trace, &[dlogit], &mut grads.head);
        let Some(fwd) = &score.forward else {
            return;
        };
        let f = self.config.gat.hidden;
        let d_pool = &dx[self.config.lm_dim..self.config.lm_dim + f];
        let d_sum = &dx[self.config.lm_dim + f..];
        let graph = &candidate.graph;
        let n = graph.len();
        let nf = n as f64;
        let last = fwd.attention.layers.len() - 1;
        let mass = fwd.attention.incoming_mass(last, true);
        let h = fwd.output();

        let mut up = Upstream::zeros(fwd);
        let mut dmass = vec![0.0; n];
        for j in 0..n {
            axpy(&mut up.features[j], mass[j] / nf, d_pool);
            dmass[j] += dot(d_pool, &h[j]) / nf;
        }
        for (slot, t) in [(0, NodeType::Answer), (3, NodeType::Kg)] {
            let members: Vec<usize> = (0..n).filter(|&j| graph.nodes[j].node_type == t).collect();
            for &j in &members {
                dmass[j] += d_sum[slot] / members.len() as f64;
            }
        }
        dmass[argmax(&mass)] += d_sum[1];
        for (e, slot) in fwd.attention.slots.iter().enumerate() {
            let p = fwd.attention.layers[last][e] / nf;
            if p > 0.0 {
                up.attention[e] -= d_sum[2] * (p.ln() + 1.0) / nf;
            }
            up.attention[e] += dmass[slot.source];
        }
        let g = self.gat.backward(fwd, &up);
        accumulate(&mut grads.gat, &g.params);
    }

    /// Cross-entropy of one item, its correctness, and gradients added to `grads`.
    pub fn item_gradient(
        &self,
        candidates: &[AnswerCandidate],
        gold: usize,
        mode: impl Fn(usize) -> ForwardMode,
        grads: &mut Reasoner,
    ) -> Result<(f64, bool), ReasonerError> {
        if gold >= candidates.len() {
            return Err(ReasonerError::Data(format!(
                "gold index {gold} out of range for {} choices",
                candidates.len()
            )));
        }
        let out = self.predict_with(candidates, mode)?;
        let max = out.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + out.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let loss = lse - out.logits[gold];
        for (c, (cand, score)) in candidates.iter().zip(&out.scores).enumerate() {
            let target = if c == gold { 1.0 } else { 0.0 };
            self.backward_candidate(cand, score, out.probabilities[c] - target, grads);
        }
        Ok((loss, out.predicted == gold))
    }
}

impl Parameters for Reasoner {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.gat.tensors();
        t.extend(self.head.layers.iter().flat_map(linear_tensors));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.gat.tensors_mut();
        t.extend(self.head.layers.iter_mut().flat_map(linear_tensors_mut));
        t
    }
}

/// A dataset item with its candidates already built.
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub id: String,
    pub candidates: Vec<AnswerCandidate>,
    pub gold: Option<usize>,
}

pub fn prepare_items(pipeline: &GraphPipeline, items: &[QaItem]) -> Result<Vec<PreparedItem>, ReasonerError> {
    items
        .par_iter()
        .map(|item| {
            Ok(PreparedItem {
                id: item.id.clone(),
                candidates: pipeline.candidates(&item.question, &item.choices)?,
                gold: item.answer,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Rate for the graph network and answer head.
    pub lr_gnn: f64,
    /// Rate for a trainable embedding provider; built-in providers are frozen.
    pub lr_lm: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps (0 = run all epochs).
    pub max_steps: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr_gnn: 1e-3,
            lr_lm: 1e-5,
            weight_decay: 0.01,
            seed: 0,
            max_steps: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), ReasonerError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ReasonerError::Config("epochs and batch size must be >= 1".into()));
        }
        if !(self.lr_gnn > 0.0 && self.lr_lm > 0.0) {
            return Err(ReasonerError::Config("learning rates must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(ReasonerError::Config("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub dev_acc: Option<f64>,
}

pub fn accuracy(reasoner: &Reasoner, items: &[PreparedItem]) -> Result<f64, ReasonerError> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let hits = items
        .par_iter()
        .map(|item| {
            let gold = item
                .gold
                .ok_or_else(|| ReasonerError::Data(format!("item {} has no answer", item.id)))?;
            Ok(usize::from(reasoner.predict(&item.candidates)?.predicted == gold))
        })
        .collect::<Result<Vec<usize>, ReasonerError>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / items.len() as f64)
}

/// Mini-batch AdamW on mean cross-entropy. Calls `on_step` after every step.
pub fn train(
    reasoner: &mut Reasoner,
    train_set: &[PreparedItem],
    dev_set: Option<&[PreparedItem]>,
    config: &TrainingConfig,
    mut on_step: impl FnMut(&MetricRow),
) -> Result<Vec<MetricRow>, ReasonerError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(ReasonerError::Data("training set is empty".into()));
    }
    let golds = train_set
        .iter()
        .map(|it| {
            it.gold
                .ok_or_else(|| ReasonerError::Data(format!("item {} has no answer", it.id)))
        })
        .collect::<Result<Vec<usize>, _>>()?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr_gnn,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        reasoner,
    );
    let mut rows = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ (epoch as u64) << 32));
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (b, batch) in batches.iter().enumerate() {
            let model: &Reasoner = reasoner;
            let partials = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut grads = model.zeros_like();
                    let mut loss = 0.0;
                    let mut hits = 0usize;
                    for &i in chunk {
                        let mode = |c: usize| ForwardMode::Train {
                            seed: dropout_seed(config.seed, epoch, step, i, c),
                        };
                        let (l, ok) = model.item_gradient(&train_set[i].candidates, golds[i], mode, &mut grads)?;
                        loss += l;
                        hits += usize::from(ok);
                    }
                    Ok((grads, loss, hits))
                })
                .collect::<Result<Vec<_>, ReasonerError>>()?;
            let mut total = model.zeros_like();
            let mut loss = 0.0;
            let mut hits = 0;
            for (g, l, h) in &partials {
                accumulate(&mut total, g);
                loss += l;
                hits += h;
            }
            let count = batch.len() as f64;
            loss /= count;
            if !loss.is_finite() {
                return Err(ReasonerError::NonFinite { epoch, step });
            }
            crate::nn::scale(&mut total, 1.0 / count);
            opt.step(reasoner, &total);

            let last_in_epoch = b + 1 == batches.len();
            let stop = config.max_steps > 0 && step + 1 >= config.max_steps;
            let dev_acc = match dev_set {
                Some(dev) if last_in_epoch || stop => Some(accuracy(reasoner, dev)?),
                _ => None,
            };
            let row = MetricRow {
                epoch,
                step,
                loss,
                train_acc: hits as f64 / count,
                dev_acc,
            };
            on_step(&row);
            rows.push(row);
            step += 1;
            if stop {
                break 'epochs;
            }
        }
    }
    Ok(rows)
}

pub fn write_metrics(rows: &[MetricRow], out: impl std::io::Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
