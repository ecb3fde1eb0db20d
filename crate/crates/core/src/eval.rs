//! Accuracy, reason-element recall, verdict agreement and Likert scaling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::debugger::DebugExport;
use crate::explain::ExportedReason;
use crate::reasoner::QaItem;
use crate::synthetic::PlantedPath;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("Likert score {0} is outside 1..=3")]
    Likert(i64),
    #[error("schema mismatch: {0}")]
    Schema(String),
}

/// 3-point Likert score onto `[0, 1]` via `(s − 1) / 2`.
pub fn likert_normalize(score: i64) -> Result<f64, EvalError> {
    if !(1..=3).contains(&score) {
        return Err(EvalError::Likert(score));
    }
    Ok((score - 1) as f64 / 2.0)
}

/// One scored item, read from either an `infer` or an `explain` export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub prediction: usize,
    #[serde(default)]
    pub reason_elements: Vec<ExportedReason>,
}

/// Fraction of planted-path concepts among the top-`w` reason-elements.
pub fn path_recall(reasons: &[ExportedReason], path: &PlantedPath, w: usize) -> f64 {
    if path.concepts.is_empty() {
        return 0.0;
    }
    let mut top: Vec<&ExportedReason> = reasons.iter().collect();
    top.sort_by_key(|r| r.rank);
    let top: BTreeSet<&str> = top.iter().take(w).map(|r| r.label.as_str()).collect();
    let hits = path.concepts.iter().filter(|c| top.contains(c.as_str())).count();
    hits as f64 / path.concepts.len() as f64
}

/// Debugger verdict against prediction correctness.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReliabilityMatrix {
    pub reliable_correct: usize,
    pub reliable_incorrect: usize,
    pub unreliable_correct: usize,
    pub unreliable_incorrect: usize,
}

impl ReliabilityMatrix {
    pub fn add(&mut self, reliable: bool, correct: bool) {
        match (reliable, correct) {
            (true, true) => self.reliable_correct += 1,
            (true, false) => self.reliable_incorrect += 1,
            (false, true) => self.unreliable_correct += 1,
            (false, false) => self.unreliable_incorrect += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.reliable_correct + self.reliable_incorrect + self.unreliable_correct + self.unreliable_incorrect
    }

    /// Share of items whose verdict matches correctness.
    pub fn agreement(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.reliable_correct + self.unreliable_incorrect) as f64 / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikertSummary {
    pub count: usize,
    pub mean: f64,
    pub normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: usize,
    pub accuracy: f64,
    pub recall: Option<f64>,
    pub recall_items: usize,
    pub reliability: Option<ReliabilityMatrix>,
    pub reliability_agreement: Option<f64>,
    pub likert: Option<LikertSummary>,
}

pub fn summarize_likert(scores: &[i64]) -> Result<LikertSummary, EvalError> {
    let normalized = scores.iter().map(|&s| likert_normalize(s)).collect::<Result<Vec<_>, _>>()?;
    let mean = if normalized.is_empty() {
        0.0
    } else {
        normalized.iter().sum::<f64>() / normalized.len() as f64
    };
    Ok(LikertSummary {
        count: normalized.len(),
        mean,
        normalized,
    })
}

/// Inputs beyond the scored records are optional; missing ones leave their
/// report fields empty.
pub struct EvalInputs<'a> {
    pub records: &'a [EvalRecord],
    pub dataset: &'a [QaItem],
    pub planted: Option<&'a [PlantedPath]>,
    pub debug: Option<&'a [DebugExport]>,
    pub likert: Option<&'a [i64]>,
    pub top_w: usize,
}

/// Recall is averaged over correctly answered items only.
pub fn evaluate(inputs: &EvalInputs<'_>) -> Result<EvalReport, EvalError> {
    let gold: BTreeMap<&str, &QaItem> = inputs.dataset.iter().map(|i| (i.id.as_str(), i)).collect();
    let planted: Option<BTreeMap<&str, &PlantedPath>> =
        inputs.planted.map(|p| p.iter().map(|x| (x.id.as_str(), x)).collect());
    let verdicts: Option<BTreeMap<&str, bool>> =
        inputs.debug.map(|d| d.iter().map(|x| (x.id.as_str(), x.reliable)).collect());

    let mut correct_count = 0;
    let mut recall_sum = 0.0;
    let mut recall_items = 0;
    let mut matrix = ReliabilityMatrix::default();
    for record in inputs.records {
        let item = gold
            .get(record.id.as_str())
            .ok_or_else(|| EvalError::Schema(format!("item `{}` is not in the dataset", record.id)))?;
        let answer = item
            .answer
            .ok_or_else(|| EvalError::Schema(format!("item `{}` has no gold answer", record.id)))?;
        if record.prediction >= item.choices.len() {
            return Err(EvalError::Schema(format!(
                "item `{}`: prediction {} but only {} choices",
                record.id,
                record.prediction,
                item.choices.len()
            )));
        }
        let correct = record.prediction == answer;
        correct_count += usize::from(correct);
        if let (Some(planted), true) = (&planted, correct) {
            let path = planted
                .get(record.id.as_str())
                .ok_or_else(|| EvalError::Schema(format!("no planted path for `{}`", record.id)))?;
            if record.reason_elements.is_empty() {
                return Err(EvalError::Schema(format!("item `{}` has no reason-elements", record.id)));
            }
            recall_sum += path_recall(&record.reason_elements, path, inputs.top_w);
            recall_items += 1;
        }
        if let Some(verdicts) = &verdicts {
            if let Some(&reliable) = verdicts.get(record.id.as_str()) {
                matrix.add(reliable, correct);
            }
        }
    }
    let n = inputs.records.len();
    let reliability = verdicts.map(|_| matrix);
    Ok(EvalReport {
        items: n,
        accuracy: if n == 0 { 0.0 } else { correct_count as f64 / n as f64 },
        recall: (planted.is_some() && recall_items > 0).then(|| recall_sum / recall_items as f64),
        recall_items,
        reliability_agreement: reliability.and_then(|m| m.agreement()),
        reliability,
        likert: inputs.likert.map(summarize_likert).transpose()?,
    })
}
