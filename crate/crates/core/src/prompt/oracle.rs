use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Diagnostic;

/// Which pipeline stage produced an assertion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Origin {
    Tentative,
    Panelist(String),
    Curator,
    Refined(u32),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Tentative => f.write_str("tentative"),
            Origin::Panelist(role) => write!(f, "panelist:{role}"),
            Origin::Curator => f.write_str("curator"),
            Origin::Refined(i) => write!(f, "refined:{i}"),
        }
    }
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tentative" => return Ok(Origin::Tentative),
            "curator" => return Ok(Origin::Curator),
            _ => {}
        }
        if let Some(role) = s.strip_prefix("panelist:") {
            return Ok(Origin::Panelist(role.to_string()));
        }
        if let Some(i) = s.strip_prefix("refined:") {
            return i
                .parse()
                .map(Origin::Refined)
                .map_err(|_| format!("bad refinement iteration in origin {s:?}"));
        }
        Err(format!("unknown origin {s:?}"))
    }
}

impl From<Origin> for String {
    fn from(o: Origin) -> String {
        o.to_string()
    }
}

impl TryFrom<String> for Origin {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub source_text: String,
    pub input_index: usize,
    pub origin: Origin,
}

/// True for a single-line statement whose first token is `assert`.
pub fn is_assert_line(line: &str) -> bool {
    if line.contains('\n') || line.contains('\r') {
        return false;
    }
    let Some(rest) = line.trim_start().strip_prefix("assert") else {
        return false;
    };
    match rest.chars().next() {
        None => false,
        Some(c) => !(c == '_' || c.is_alphanumeric()),
    }
}

/// Assertions positionally aligned with a task's test inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleSet {
    pub task_id: String,
    pub assertions: Vec<Assertion>,
}

impl OracleSet {
    /// Build from lines; position `i` becomes input index `i`.
    pub fn from_lines<S: AsRef<str>>(task_id: &str, lines: &[S], origin: Origin) -> Self {
        Self {
            task_id: task_id.to_string(),
            assertions: lines
                .iter()
                .enumerate()
                .map(|(i, l)| Assertion {
                    source_text: l.as_ref().to_string(),
                    input_index: i,
                    origin: origin.clone(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.assertions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assertions.is_empty()
    }

    pub fn texts(&self) -> Vec<String> {
        self.assertions.iter().map(|a| a.source_text.clone()).collect()
    }

    /// One assertion per line, trailing newline included.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for a in &self.assertions {
            out.push_str(&a.source_text);
            out.push('\n');
        }
        out
    }

    pub fn check_invariants(&self, expected_len: usize) -> Result<(), String> {
        if self.len() != expected_len {
            return Err(format!(
                "oracle set has {} assertions, expected {expected_len}",
                self.len()
            ));
        }
        for (i, a) in self.assertions.iter().enumerate() {
            if a.input_index != i {
                return Err(format!("position {i} carries input_index {}", a.input_index));
            }
            if !is_assert_line(&a.source_text) {
                return Err(format!("position {i} is not a single-line assert"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Aligned {
    pub set: OracleSet,
    pub diagnostics: Vec<Diagnostic>,
}

/// Positional alignment: line `i` replaces assertion `i`. Missing positions
/// keep the previous stage's assertion and surplus lines are dropped.
pub fn align<S: AsRef<str>>(extracted: &[S], previous: &OracleSet, origin: Origin) -> Aligned {
    let slots: Vec<usize> = (0..previous.len()).collect();
    align_slots(extracted, previous, &slots, origin)
}

/// Like [`align`], restricted to `slots` (ascending): line `i` replaces the
/// assertion at `slots[i]`; every other position is untouched.
pub fn align_slots<S: AsRef<str>>(extracted: &[S], previous: &OracleSet, slots: &[usize], origin: Origin) -> Aligned {
    let mut set = previous.clone();
    let mut diagnostics = Vec::new();
    for (line, &slot) in extracted.iter().zip(slots) {
        let a = &mut set.assertions[slot];
        a.source_text = line.as_ref().to_string();
        a.origin = origin.clone();
    }
    if extracted.len() < slots.len() {
        diagnostics.push(Diagnostic::Backfilled {
            positions: slots[extracted.len()..].to_vec(),
        });
    } else if extracted.len() > slots.len() {
        diagnostics.push(Diagnostic::Truncated {
            found: extracted.len(),
            kept: slots.len(),
        });
    }
    Aligned { set, diagnostics }
}
