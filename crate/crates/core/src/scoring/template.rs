use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Text prompt with `{name}` slots, e.g. `"This is the {part} of a bird"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    pattern: String,
    slots: Vec<String>,
}

enum Piece<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

fn pieces(pattern: &str) -> Result<Vec<Piece<'_>>> {
    let mut out = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find(['{', '}']) {
        if rest.as_bytes()[open] == b'}' {
            return Err(Error::arg(format!("unmatched '}}' in template {pattern:?}")));
        }
        let close = rest[open..]
            .find('}')
            .map(|i| open + i)
            .ok_or_else(|| Error::arg(format!("unclosed '{{' in template {pattern:?}")))?;
        let name = &rest[open + 1..close];
        if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
            return Err(Error::arg(format!("bad slot name {name:?} in template {pattern:?}")));
        }
        out.push(Piece::Literal(&rest[..open]));
        out.push(Piece::Slot(name));
        rest = &rest[close + 1..];
    }
    out.push(Piece::Literal(rest));
    Ok(out)
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        let mut slots = Vec::new();
        for piece in pieces(&pattern)? {
            if let Piece::Slot(name) = piece {
                if !slots.iter().any(|s| s == name) {
                    slots.push(name.to_string());
                }
            }
        }
        Ok(PromptTemplate { pattern, slots })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    /// Slot names in order of first appearance.
    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn has_slot(&self, name: &str) -> bool {
        self.slots.iter().any(|s| s == name)
    }

    /// Literal substitution. Every slot must be provided and every provided
    /// value must be used.
    pub fn render(&self, values: &BTreeMap<&str, &str>) -> Result<String> {
        let provided: BTreeSet<&str> = values.keys().copied().collect();
        let wanted: BTreeSet<&str> = self.slots.iter().map(String::as_str).collect();
        if let Some(missing) = wanted.difference(&provided).next() {
            return Err(Error::arg(format!(
                "template {:?} needs slot {{{missing}}}",
                self.pattern
            )));
        }
        if let Some(extra) = provided.difference(&wanted).next() {
            return Err(Error::arg(format!(
                "slot {{{extra}}} is not used by template {:?}",
                self.pattern
            )));
        }
        let mut out = String::with_capacity(self.pattern.len());
        for piece in pieces(&self.pattern)? {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(name) => out.push_str(values[name]),
            }
        }
        Ok(out)
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        PromptTemplate::new(s)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> Self {
        t.pattern
    }
}

impl std::fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.pattern)
    }
}
