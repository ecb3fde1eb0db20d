//! Reason-element ranking and the two-stage why / why-not explanation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::element::ElementGraph;
use crate::gat::AttentionRecord;
use crate::kg::NodeId;
use crate::llm::{LlmError, TextGenerator};
use crate::pipeline::AnswerCandidate;
use crate::reasoner::PredictionOutput;
use crate::template::{self, TemplateError};

pub const DEFAULT_TOP_W: usize = 5;
pub const DEFAULT_TASK_TYPE: &str = "multiple-choice question answering";

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Render(#[from] TemplateError),
    #[error("stage {stage} generation failed: {source}")]
    Generation { stage: u8, source: LlmError },
    #[error("stage 1 returned an empty explanation")]
    EmptyStage1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonElement {
    pub id: NodeId,
    pub label: String,
    pub mass: f64,
    pub rank: usize,
}

/// Top-`w` nodes by final-layer incoming attention mass, self-loops excluded.
///
/// Ties go to the lower node id. `w` larger than the graph returns every node.
pub fn rank_reason_elements(
    graph: &ElementGraph,
    attention: &AttentionRecord,
    w: usize,
) -> Result<Vec<ReasonElement>, ExplainError> {
    if w == 0 {
        return Err(ExplainError::Argument("w must be >= 1".into()));
    }
    if attention.layers.is_empty() || attention.ranges.len() != graph.len() {
        return Err(ExplainError::Argument("attention record does not match the graph".into()));
    }
    let mass = attention.incoming_mass(attention.layers.len() - 1, false);
    let mut order: Vec<usize> = (0..graph.len()).collect();
    order.sort_by(|&a, &b| {
        mass[b]
            .partial_cmp(&mass[a])
            .unwrap_or(Ordering::Equal)
            .then(graph.nodes[a].id.cmp(&graph.nodes[b].id))
    });
    Ok(order
        .into_iter()
        .take(w)
        .enumerate()
        .map(|(r, i)| ReasonElement {
            id: graph.nodes[i].id,
            label: graph.nodes[i].label.clone(),
            mass: mass[i],
            rank: r + 1,
        })
        .collect())
}

/// Predicted answer, its reason-elements and the attention they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyComponents {
    pub prediction: usize,
    pub reasons: Vec<ReasonElement>,
    pub attention: AttentionRecord,
}

/// Ranks reason-elements on the predicted candidate's own element-graph.
pub fn key_components(
    output: &PredictionOutput,
    candidates: &[AnswerCandidate],
    w: usize,
) -> Result<KeyComponents, ExplainError> {
    let prediction = output.predicted;
    let candidate = candidates
        .get(prediction)
        .ok_or_else(|| ExplainError::Argument(format!("prediction {prediction} has no candidate")))?;
    let forward = output
        .scores
        .get(prediction)
        .and_then(|s| s.forward.as_ref())
        .ok_or_else(|| ExplainError::Argument("predicted candidate has an empty element-graph".into()))?;
    Ok(KeyComponents {
        prediction,
        reasons: rank_reason_elements(&candidate.graph, &forward.attention, w)?,
        attention: forward.attention.clone(),
    })
}

/// `A`, `B`, … for the first 26 choices, then the 1-based index.
pub fn choice_letter(index: usize) -> String {
    if index < 26 {
        char::from(b'A' + index as u8).to_string()
    } else {
        (index + 1).to_string()
    }
}

pub fn format_choice(choices: &[String], index: usize) -> String {
    format!("{}. {}", choice_letter(index), choices[index])
}

/// `A. x, B. y, …` for the listed indices.
pub fn format_choices(choices: &[String], indices: impl IntoIterator<Item = usize>) -> String {
    indices
        .into_iter()
        .map(|i| format_choice(choices, i))
        .collect::<Vec<_>>()
        .join(", ")
}

/// `quiet_chattering_mind` → `Quiet chattering mind`.
pub fn display_label(label: &str) -> String {
    let spaced = label.replace('_', " ");
    let mut chars = spaced.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub fn format_reason_elements(elements: &[ReasonElement]) -> String {
    elements
        .iter()
        .map(|e| format!("{}. {}", e.rank, display_label(&e.label)))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Everything the explanation prompts are built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainInput<'a> {
    pub task_type: &'a str,
    pub question: &'a str,
    pub choices: &'a [String],
    pub prediction: Option<usize>,
    pub reasons: &'a [ReasonElement],
}

impl ExplainInput<'_> {
    fn prediction(&self) -> Result<usize, ExplainError> {
        match self.prediction {
            Some(p) if p < self.choices.len() => Ok(p),
            Some(p) => Err(ExplainError::Argument(format!(
                "prediction {p} is not one of {} choices",
                self.choices.len()
            ))),
            None => Err(ExplainError::Argument("missing prediction".into())),
        }
    }
}

pub fn render_stage1(input: &ExplainInput<'_>) -> Result<String, ExplainError> {
    let prediction = input.prediction()?;
    if input.reasons.is_empty() {
        return Err(ExplainError::Argument("reason-element list is empty".into()));
    }
    let values = BTreeMap::from([
        ("task_type", input.task_type.to_string()),
        ("question", input.question.to_string()),
        ("choices", format_choices(input.choices, 0..input.choices.len())),
        ("prediction", format_choice(input.choices, prediction)),
        ("reason_elements", format_reason_elements(input.reasons)),
    ]);
    Ok(template::stage1().render(&values)?)
}

pub fn render_stage2(e0: &str, choices: &[String], prediction: usize) -> Result<String, ExplainError> {
    if e0.trim().is_empty() {
        return Err(ExplainError::Argument("E0 is empty".into()));
    }
    if prediction >= choices.len() {
        return Err(ExplainError::Argument(format!("prediction {prediction} out of range")));
    }
    let remaining: Vec<usize> = (0..choices.len()).filter(|&i| i != prediction).collect();
    if remaining.is_empty() {
        return Err(ExplainError::Argument("no remaining choices".into()));
    }
    let values = BTreeMap::from([
        ("e0", e0.to_string()),
        ("remaining_choices", format_choices(choices, remaining)),
    ]);
    Ok(template::stage2().render(&values)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedReason {
    pub label: String,
    pub mass: f64,
    pub rank: usize,
}

/// Export record for one explained item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationBundle {
    pub id: String,
    pub task_type: String,
    pub question: String,
    pub choices: Vec<String>,
    pub prediction: usize,
    pub probabilities: Vec<f64>,
    pub reason_elements: Vec<ExportedReason>,
    pub e0: String,
    pub e1: String,
    pub model: String,
    pub ts: String,
    pub complete: bool,
}

impl ExplanationBundle {
    /// `E` for the debugger: both stages separated by a blank line.
    pub fn explanation(&self) -> String {
        format!("{}\n\n{}", self.e0, self.e1)
    }
}

/// Item metadata carried into the bundle unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleMeta {
    pub id: String,
    pub probabilities: Vec<f64>,
    pub ts: String,
}

/// A bundle cut short by a failed generation call.
#[derive(Debug)]
pub struct IncompleteBundle {
    pub bundle: ExplanationBundle,
    pub error: ExplainError,
}

/// Stage 1, then stage 2 with `E₀` embedded. Stage 2 is never attempted
/// unless stage 1 produced a non-empty `E₀`.
pub fn generate_explanations(
    input: &ExplainInput<'_>,
    meta: BundleMeta,
    generator: &dyn TextGenerator,
) -> Result<ExplanationBundle, Box<IncompleteBundle>> {
    let prediction = match input.prediction() {
        Ok(p) => p,
        Err(error) => {
            return Err(Box::new(IncompleteBundle {
                bundle: empty_bundle(input, 0, meta, generator),
                error,
            }))
        }
    };
    let mut bundle = empty_bundle(input, prediction, meta, generator);
    let fail = |bundle: ExplanationBundle, error| Err(Box::new(IncompleteBundle { bundle, error }));

    let stage1 = match render_stage1(input) {
        Ok(p) => p,
        Err(e) => return fail(bundle, e),
    };
    match generator.complete(&generator.request(&stage1)) {
        Ok(c) if c.text.trim().is_empty() => return fail(bundle, ExplainError::EmptyStage1),
        Ok(c) => bundle.e0 = c.text,
        Err(source) => return fail(bundle, ExplainError::Generation { stage: 1, source }),
    }
    let stage2 = match render_stage2(&bundle.e0, input.choices, prediction) {
        Ok(p) => p,
        Err(e) => return fail(bundle, e),
    };
    match generator.complete(&generator.request(&stage2)) {
        Ok(c) => bundle.e1 = c.text,
        Err(source) => return fail(bundle, ExplainError::Generation { stage: 2, source }),
    }
    bundle.complete = true;
    Ok(bundle)
}

fn empty_bundle(
    input: &ExplainInput<'_>,
    prediction: usize,
    meta: BundleMeta,
    generator: &dyn TextGenerator,
) -> ExplanationBundle {
    ExplanationBundle {
        id: meta.id,
        task_type: input.task_type.to_string(),
        question: input.question.to_string(),
        choices: input.choices.to_vec(),
        prediction,
        probabilities: meta.probabilities,
        reason_elements: input
            .reasons
            .iter()
            .map(|r| ExportedReason {
                label: r.label.clone(),
                mass: r.mass,
                rank: r.rank,
            })
            .collect(),
        e0: String::new(),
        e1: String::new(),
        model: generator.model_name().to_string(),
        ts: meta.ts,
        complete: false,
    }
}
