//! Debugger prompt, response parsing and the reliability rule.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explain::{format_choice, format_choices, ExplainError, ExplanationBundle, ExportedReason, ReasonElement};
use crate::template::{self, TemplateError};

pub const DEFAULT_THRESHOLD: u8 = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DebugError {
    #[error("cannot render debugger prompt: {0}")]
    Render(String),
    #[error("missing score for {0}")]
    Missing(Dimension),
    #[error("duplicate score for {0}")]
    Duplicate(Dimension),
    #[error("{dimension} score {value} is outside 1..=5")]
    OutOfRange { dimension: Dimension, value: u64 },
}

impl From<TemplateError> for DebugError {
    fn from(e: TemplateError) -> Self {
        Self::Render(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Faithfulness,
    Completeness,
    Minimality,
    Accuracy,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Faithfulness,
        Dimension::Completeness,
        Dimension::Minimality,
        Dimension::Accuracy,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Dimension::Faithfulness => "Faithfulness",
            Dimension::Completeness => "Completeness",
            Dimension::Minimality => "Minimality",
            Dimension::Accuracy => "Accuracy",
        }
    }
}

impl std::fmt::Display for Dimension {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.title())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scores {
    pub faithfulness: u8,
    pub completeness: u8,
    pub minimality: u8,
    pub accuracy: u8,
}

impl Scores {
    pub fn get(&self, d: Dimension) -> u8 {
        match d {
            Dimension::Faithfulness => self.faithfulness,
            Dimension::Completeness => self.completeness,
            Dimension::Minimality => self.minimality,
            Dimension::Accuracy => self.accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DebugReport {
    pub scores: Scores,
    pub advice: String,
    pub raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReliabilityVerdict {
    pub reliable: bool,
    pub faithfulness: u8,
    pub accuracy: u8,
    pub threshold: u8,
}

pub fn render_debug_prompt(model_name: &str, bundle: &ExplanationBundle) -> Result<String, DebugError> {
    if !bundle.complete || bundle.e0.trim().is_empty() || bundle.e1.trim().is_empty() {
        return Err(DebugError::Render("explanation bundle is incomplete".into()));
    }
    if bundle.prediction >= bundle.choices.len() {
        return Err(DebugError::Render("prediction is not one of the choices".into()));
    }
    if bundle.reason_elements.is_empty() {
        return Err(DebugError::Render("no reason-elements".into()));
    }
    let reasons: Vec<ReasonElement> = bundle
        .reason_elements
        .iter()
        .map(|r: &ExportedReason| ReasonElement {
            id: 0,
            label: r.label.clone(),
            mass: r.mass,
            rank: r.rank,
        })
        .collect();
    let values = BTreeMap::from([
        ("model_name", model_name.to_string()),
        ("task_type", bundle.task_type.clone()),
        ("question", bundle.question.clone()),
        ("choices", format_choices(&bundle.choices, 0..bundle.choices.len())),
        ("prediction", format_choice(&bundle.choices, bundle.prediction)),
        ("reason_elements", crate::explain::format_reason_elements(&reasons)),
        ("explanation", bundle.explanation()),
    ]);
    Ok(template::debugger().render(&values)?)
}

fn score_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(faithfulness|completeness|minimality|accuracy)[*_\s]*:[*_\s]*(\d+)\s*/\s*5")
            .expect("valid pattern")
    })
}

fn advice_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\badvice[^:\n]*:[*_]*").expect("valid pattern"))
}

pub fn parse_debug_response(text: &str) -> Result<DebugReport, DebugError> {
    let mut found: BTreeMap<Dimension, u8> = BTreeMap::new();
    for cap in score_pattern().captures_iter(text) {
        let dimension = match cap[1].to_ascii_lowercase().as_str() {
            "faithfulness" => Dimension::Faithfulness,
            "completeness" => Dimension::Completeness,
            "minimality" => Dimension::Minimality,
            _ => Dimension::Accuracy,
        };
        let value: u64 = cap[2].parse().unwrap_or(u64::MAX);
        if !(1..=5).contains(&value) {
            return Err(DebugError::OutOfRange { dimension, value });
        }
        if found.insert(dimension, value as u8).is_some() {
            return Err(DebugError::Duplicate(dimension));
        }
    }
    let score = |d| found.get(&d).copied().ok_or(DebugError::Missing(d));
    let scores = Scores {
        faithfulness: score(Dimension::Faithfulness)?,
        completeness: score(Dimension::Completeness)?,
        minimality: score(Dimension::Minimality)?,
        accuracy: score(Dimension::Accuracy)?,
    };
    let advice = advice_pattern()
        .find(text)
        .map(|m| text[m.end()..].trim().to_string())
        .unwrap_or_default();
    Ok(DebugReport {
        scores,
        advice,
        raw: text.to_string(),
    })
}

/// Canonical response layout; [`parse_debug_response`] reads it back exactly.
pub fn render_canonical(scores: &Scores, advice: &str) -> String {
    let mut out = String::new();
    for d in Dimension::ALL {
        out.push_str(&format!("- **{}:** {}/5\n\n", d.title(), scores.get(d)));
    }
    out.push_str(&format!("- **Advice for Improvement:** {}", advice.trim()));
    out
}

/// Reliable iff both faithfulness and accuracy reach the threshold.
pub fn classify_reliability(report: &DebugReport, threshold: u8) -> ReliabilityVerdict {
    let s = report.scores;
    ReliabilityVerdict {
        reliable: s.faithfulness.min(s.accuracy) >= threshold,
        faithfulness: s.faithfulness,
        accuracy: s.accuracy,
        threshold,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebugExport {
    pub id: String,
    pub scores: Scores,
    pub advice: String,
    pub reliable: bool,
    pub threshold: u8,
}

impl DebugExport {
    pub fn new(id: &str, report: &DebugReport, verdict: &ReliabilityVerdict) -> Self {
        Self {
            id: id.to_string(),
            scores: report.scores,
            advice: report.advice.clone(),
            reliable: verdict.reliable,
            threshold: verdict.threshold,
        }
    }
}

impl From<ExplainError> for DebugError {
    fn from(e: ExplainError) -> Self {
        Self::Render(e.to_string())
    }
}
