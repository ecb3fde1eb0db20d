//! Minimal `{{slot}}` template engine.
//!
//! In template text `{{{{` stands for a literal `{{`. Slot values are
//! escaped the same way on output, so a rendered prompt never contains a
//! bare `{{` that did not come from the template. Template files end with
//! one newline, which is not part of the template.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template}: unterminated slot at byte {at}")]
    Unterminated { template: String, at: usize },
    #[error("template {template}: invalid slot name `{name}`")]
    BadName { template: String, name: String },
    #[error("template {template}: no value for slot `{slot}`")]
    Missing { template: String, slot: String },
    #[error("template {template}: slot `{slot}` is empty")]
    Empty { template: String, slot: String },
    #[error("template {template}: unknown slot `{slot}`")]
    Unknown { template: String, slot: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    parts: Vec<Part>,
}

pub fn escape(value: &str) -> String {
    value.replace("{{", "{{{{")
}

impl Template {
    pub fn parse(name: &str, source: &str) -> Result<Self, TemplateError> {
        let source = source.strip_suffix('\n').unwrap_or(source);
        let mut parts = Vec::new();
        let mut text = String::new();
        let mut rest = source;
        while let Some(open) = rest.find("{{") {
            text.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            if let Some(tail) = after.strip_prefix("{{") {
                text.push_str("{{");
                rest = tail;
                continue;
            }
            let close = after.find("}}").ok_or_else(|| TemplateError::Unterminated {
                template: name.to_string(),
                at: source.len() - rest.len() + open,
            })?;
            let slot = &after[..close];
            let first_ok = slot.starts_with(|c: char| c.is_ascii_lowercase());
            if !first_ok || !slot.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
                return Err(TemplateError::BadName {
                    template: name.to_string(),
                    name: slot.to_string(),
                });
            }
            if !text.is_empty() {
                parts.push(Part::Text(std::mem::take(&mut text)));
            }
            parts.push(Part::Slot(slot.to_string()));
            rest = &after[close + 2..];
        }
        text.push_str(rest);
        if !text.is_empty() {
            parts.push(Part::Text(text));
        }
        Ok(Self {
            name: name.to_string(),
            parts,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn slots(&self) -> BTreeSet<&str> {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Slot(s) => Some(s.as_str()),
                Part::Text(_) => None,
            })
            .collect()
    }

    /// How many times `slot` occurs.
    pub fn occurrences(&self, slot: &str) -> usize {
        self.parts
            .iter()
            .filter(|p| matches!(p, Part::Slot(s) if s == slot))
            .count()
    }

    /// Every slot needs a non-empty value; values for unknown slots are rejected.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let slots = self.slots();
        if let Some(extra) = values.keys().find(|k| !slots.contains(*k)) {
            return Err(TemplateError::Unknown {
                template: self.name.clone(),
                slot: extra.to_string(),
            });
        }
        let mut out = String::new();
        for part in &self.parts {
            match part {
                Part::Text(t) => out.push_str(t),
                Part::Slot(s) => {
                    let v = values.get(s.as_str()).ok_or_else(|| TemplateError::Missing {
                        template: self.name.clone(),
                        slot: s.clone(),
                    })?;
                    if v.trim().is_empty() {
                        return Err(TemplateError::Empty {
                            template: self.name.clone(),
                            slot: s.clone(),
                        });
                    }
                    out.push_str(&escape(v));
                }
            }
        }
        Ok(out)
    }
}

pub const STAGE1_SOURCE: &str = include_str!("../templates/stage1.txt");
pub const STAGE2_SOURCE: &str = include_str!("../templates/stage2.txt");
pub const DEBUGGER_SOURCE: &str = include_str!("../templates/debugger.txt");

pub fn stage1() -> Template {
    Template::parse("stage1", STAGE1_SOURCE).expect("bundled template parses")
}

pub fn stage2() -> Template {
    Template::parse("stage2", STAGE2_SOURCE).expect("bundled template parses")
}

pub fn debugger() -> Template {
    Template::parse("debugger", DEBUGGER_SOURCE).expect("bundled template parses")
}
