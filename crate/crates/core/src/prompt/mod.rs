//! Prompt templates for every agent in the pipeline and parsers for the
//! artifacts (assertion lists, code) that come back.
//!
//! Templates are plain UTF-8 files under `templates/`, one `<id>.system.txt`
//! and one `<id>.user.txt` per agent, using `{placeholder}` markers with
//! `{{` / `}}` for literal braces. The built-in set is embedded at compile
//! time; [`TemplateSet::from_dir`] loads an edited copy.

mod extract;
mod oracle;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use extract::{
    extract_assertions, extract_code_block, fenced_blocks, strip_trailing_comment, ExtractionResult, NoCodeFound,
};
pub use oracle::{align, align_slots, is_assert_line, Aligned, Assertion, OracleSet, Origin};

use crate::task::Task;

/// Recoverable anomalies met while parsing or aligning replies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Diagnostic {
    NoCodeFence,
    NoAssertions,
    CountMismatch { found: usize, expected: usize },
    Backfilled { positions: Vec<usize> },
    Truncated { found: usize, kept: usize },
    EmptyReply,
    Note(String),
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NoCodeFence => f.write_str("no_code_fence"),
            Diagnostic::NoAssertions => f.write_str("no_assertions"),
            Diagnostic::CountMismatch { found, .. } => write!(f, "count_mismatch(found={found})"),
            Diagnostic::Backfilled { positions } => {
                let p: Vec<String> = positions.iter().map(usize::to_string).collect();
                write!(f, "backfilled({})", p.join(","))
            }
            Diagnostic::Truncated { found, kept } => write!(f, "truncated(found={found},kept={kept})"),
            Diagnostic::EmptyReply => f.write_str("empty_reply"),
            Diagnostic::Note(s) => write!(f, "note({s})"),
        }
    }
}

impl From<Diagnostic> for String {
    /// Serialized form; unlike `Display` it keeps the expected count.
    fn from(d: Diagnostic) -> String {
        match d {
            Diagnostic::CountMismatch { found, expected } => {
                format!("count_mismatch(found={found},expected={expected})")
            }
            other => other.to_string(),
        }
    }
}

impl TryFrom<String> for Diagnostic {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        fn inner<'a>(s: &'a str, name: &str) -> Option<&'a str> {
            s.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')')
        }
        fn field<T: FromStr>(part: &str, key: &str) -> Option<T> {
            part.trim().strip_prefix(key)?.strip_prefix('=')?.parse().ok()
        }
        let bad = || format!("unrecognized diagnostic {s:?}");
        match s.as_str() {
            "no_code_fence" => return Ok(Diagnostic::NoCodeFence),
            "no_assertions" => return Ok(Diagnostic::NoAssertions),
            "empty_reply" => return Ok(Diagnostic::EmptyReply),
            _ => {}
        }
        if let Some(body) = inner(&s, "count_mismatch") {
            let mut parts = body.split(',');
            let found = parts.next().and_then(|p| field(p, "found")).ok_or_else(bad)?;
            let expected = match parts.next() {
                Some(p) => field(p, "expected").ok_or_else(bad)?,
                None => 0,
            };
            return Ok(Diagnostic::CountMismatch { found, expected });
        }
        if let Some(body) = inner(&s, "backfilled") {
            let positions = body
                .split(',')
                .filter(|p| !p.is_empty())
                .map(|p| p.parse().map_err(|_| bad()))
                .collect::<Result<_, _>>()?;
            return Ok(Diagnostic::Backfilled { positions });
        }
        if let Some(body) = inner(&s, "truncated") {
            let mut parts = body.split(',');
            let found = parts.next().and_then(|p| field(p, "found")).ok_or_else(bad)?;
            let kept = parts.next().and_then(|p| field(p, "kept")).ok_or_else(bad)?;
            return Ok(Diagnostic::Truncated { found, kept });
        }
        if let Some(body) = inner(&s, "note") {
            return Ok(Diagnostic::Note(body.to_string()));
        }
        Err(bad())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Tentative,
    Requirements,
    Panelist,
    Interpreter,
    Curator,
    CandidateCode,
    Refinement,
    SelfDebugFeedback,
}

impl TemplateId {
    pub const ALL: [TemplateId; 8] = [
        TemplateId::Tentative,
        TemplateId::Requirements,
        TemplateId::Panelist,
        TemplateId::Interpreter,
        TemplateId::Curator,
        TemplateId::CandidateCode,
        TemplateId::Refinement,
        TemplateId::SelfDebugFeedback,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::Tentative => "tentative",
            TemplateId::Requirements => "requirements",
            TemplateId::Panelist => "panelist",
            TemplateId::Interpreter => "interpreter",
            TemplateId::Curator => "curator",
            TemplateId::CandidateCode => "candidate_code",
            TemplateId::Refinement => "refinement",
            TemplateId::SelfDebugFeedback => "self_debug_feedback",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("missing binding for placeholder {0:?}")]
    MissingBinding(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut chars = text.char_indices().peekable();
        while let Some((offset, c)) = chars.next() {
            match c {
                '{' if chars.peek().map(|&(_, n)| n) == Some('{') => {
                    chars.next();
                    literal.push('{');
                }
                '}' if chars.peek().map(|&(_, n)| n) == Some('}') => {
                    chars.next();
                    literal.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some((_, '}')) => break,
                            Some((at, '{')) => {
                                return Err(PromptError::Syntax {
                                    offset: at,
                                    message: "nested '{' in placeholder".into(),
                                })
                            }
                            Some((_, ch)) => name.push(ch),
                            None => {
                                return Err(PromptError::Syntax {
                                    offset,
                                    message: "unterminated placeholder".into(),
                                })
                            }
                        }
                    }
                    if name.is_empty() || !name.chars().all(|ch| ch == '_' || ch.is_alphanumeric()) {
                        return Err(PromptError::Syntax {
                            offset,
                            message: format!("bad placeholder name {name:?}"),
                        });
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Placeholder(name));
                }
                '}' => {
                    return Err(PromptError::Syntax {
                        offset,
                        message: "unmatched '}'".into(),
                    })
                }
                _ => literal.push(c),
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self { segments })
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Placeholder(p) => Some(p.as_str()),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    /// Pure splicing; bound values are inserted unescaped.
    pub fn render(&self, bindings: &Bindings) -> Result<String, PromptError> {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(l) => out.push_str(l),
                Segment::Placeholder(p) => out.push_str(
                    bindings
                        .get(p.as_str())
                        .ok_or_else(|| PromptError::MissingBinding(p.clone()))?,
                ),
            }
        }
        Ok(out)
    }
}

pub type Bindings = BTreeMap<String, String>;

/// Convenience constructor for binding maps.
pub fn bindings<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Bindings {
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub system: Template,
    pub user: Template,
}

impl PromptTemplate {
    pub fn required_bindings(&self) -> BTreeSet<&str> {
        let mut all = self.system.placeholders();
        all.extend(self.user.placeholders());
        all
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system_text: String,
    pub user_text: String,
}

macro_rules! builtin {
    ($name:literal) => {
        (
            include_str!(concat!("../../templates/", $name, ".system.txt")),
            include_str!(concat!("../../templates/", $name, ".user.txt")),
        )
    };
}

fn builtin_text(id: TemplateId) -> (&'static str, &'static str) {
    match id {
        TemplateId::Tentative => builtin!("tentative"),
        TemplateId::Requirements => builtin!("requirements"),
        TemplateId::Panelist => builtin!("panelist"),
        TemplateId::Interpreter => builtin!("interpreter"),
        TemplateId::Curator => builtin!("curator"),
        TemplateId::CandidateCode => builtin!("candidate_code"),
        TemplateId::Refinement => builtin!("refinement"),
        TemplateId::SelfDebugFeedback => builtin!("self_debug_feedback"),
    }
}

/// Template files end with a single newline that is not part of the prompt.
fn file_body(text: &str) -> &str {
    text.strip_suffix('\n').unwrap_or(text)
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: HashMap<TemplateId, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = TemplateId::ALL
            .into_iter()
            .map(|id| {
                let (sys, user) = builtin_text(id);
                let t = PromptTemplate {
                    id,
                    system: Template::parse(file_body(sys)).expect("builtin template parses"),
                    user: Template::parse(file_body(user)).expect("builtin template parses"),
                };
                (id, t)
            })
            .collect();
        Self { templates }
    }

    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let read = |id: TemplateId, part: &str| -> Result<Template, PromptError> {
            let path = dir.join(format!("{}.{part}.txt", id.name()));
            let text = fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            Template::parse(file_body(&text))
        };
        let mut templates = HashMap::new();
        for id in TemplateId::ALL {
            templates.insert(
                id,
                PromptTemplate {
                    id,
                    system: read(id, "system")?,
                    user: read(id, "user")?,
                },
            );
        }
        Ok(Self { templates })
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn render(&self, id: TemplateId, bindings: &Bindings) -> Result<RenderedPrompt, PromptError> {
        let t = self.get(id);
        Ok(RenderedPrompt {
            system_text: t.system.render(bindings)?,
            user_text: t.user.render(bindings)?,
        })
    }

    pub fn render_named(&self, name: &str, bindings: &Bindings) -> Result<RenderedPrompt, PromptError> {
        self.render(name.parse()?, bindings)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

// Binding formatters shared by the agents.

/// `1. add(1, 2)` style listing of every input as a call.
pub fn format_test_inputs(task: &Task) -> String {
    (0..task.input_count())
        .map(|i| format!("{}. {}", i + 1, task.call_expr(i)))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn format_assertions(set: &OracleSet) -> String {
    set.assertions
        .iter()
        .map(|a| a.source_text.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Up to `limit` example calls for the candidate-code prompt.
pub fn format_examples(task: &Task, limit: usize) -> String {
    (0..task.input_count().min(limit))
        .map(|i| task.call_expr(i))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The numbered fifth consideration in the refinement prompt, shown only
/// after the first refinement round (1-based display).
pub fn refinement_followup(iteration: u32) -> String {
    if iteration > 0 {
        format!(
            "5. Why the previous iteration's fixes didn't work (iteration {})",
            iteration + 1
        )
    } else {
        String::new()
    }
}

pub fn refinement_iteration_note(iteration: u32) -> String {
    if iteration > 0 {
        format!(
            "This is refinement iteration {}; the previous fixes still failed.",
            iteration + 1
        )
    } else {
        String::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set() -> TemplateSet {
        TemplateSet::builtin()
    }

    #[test]
    fn tentative_exact_count_line() {
        let b = bindings([
            ("task_description", "adds two ints"),
            ("test_inputs_formatted", "(1,2)"),
            ("len", "1"),
        ]);
        let p = set().render(TemplateId::Tentative, &b).unwrap();
        assert!(p.user_text.contains("You MUST provide EXACTLY 1 assertions"));
        assert!(p.system_text.starts_with("You are generating initial test oracles."));
        assert!(!p.user_text.contains('{'));
    }

    #[test]
    fn panelist_missing_role_name() {
        let b = bindings([
            ("role_focus", "f"),
            ("task_description", "d"),
            ("requirements", "r"),
            ("tentative_formatted", "t"),
            ("test_inputs_formatted", "i"),
            ("len", "1"),
        ]);
        assert_eq!(
            set().render(TemplateId::Panelist, &b),
            Err(PromptError::MissingBinding("role_name".into()))
        );
    }

    fn refinement_bindings(iteration: u32) -> Bindings {
        bindings([
            ("iteration_note", refinement_iteration_note(iteration)),
            ("task_description", "d".into()),
            ("candidate_code", "def f(): pass".into()),
            ("passed_examples", String::new()),
            ("failed_oracles_formatted", "1. assert f() == 1".into()),
            ("followup_note", refinement_followup(iteration)),
            ("len", "1".into()),
        ])
    }

    #[test]
    fn refinement_first_round_has_no_followup() {
        let p = set().render(TemplateId::Refinement, &refinement_bindings(0)).unwrap();
        assert!(p.user_text.starts_with("Fix ALL the following failed test oracles"));
        assert!(!p.user_text.contains("previous iteration's fixes"));
    }

    #[test]
    fn refinement_later_round_shows_one_based_iteration() {
        let p = set().render(TemplateId::Refinement, &refinement_bindings(2)).unwrap();
        assert!(p
            .user_text
            .contains("5. Why the previous iteration's fixes didn't work (iteration 3)"));
    }

    #[test]
    fn unknown_template_name() {
        assert_eq!(
            set().render_named("oracle", &Bindings::new()),
            Err(PromptError::UnknownTemplate("oracle".into()))
        );
    }

    #[test]
    fn required_bindings_per_template() {
        let s = set();
        let req: Vec<_> = s.get(TemplateId::Curator).required_bindings().into_iter().collect();
        assert_eq!(
            req,
            [
                "len",
                "panel_discussion",
                "task_description",
                "tentative_formatted",
                "test_inputs_formatted"
            ]
        );
        assert!(s
            .get(TemplateId::Interpreter)
            .required_bindings()
            .contains("test_code_formatted"));
    }

    #[test]
    fn escaped_braces_and_syntax_errors() {
        let t = Template::parse("{{literal}} {x}").unwrap();
        assert_eq!(t.render(&bindings([("x", "1")])).unwrap(), "{literal} 1");
        assert!(matches!(Template::parse("{open"), Err(PromptError::Syntax { .. })));
        assert!(matches!(Template::parse("close}"), Err(PromptError::Syntax { .. })));
        assert!(matches!(Template::parse("{a b}"), Err(PromptError::Syntax { .. })));
    }

    #[test]
    fn values_are_spliced_verbatim() {
        let t = Template::parse("<{x}>").unwrap();
        assert_eq!(t.render(&bindings([("x", "{y}}")])).unwrap(), "<{y}}>");
    }

    #[test]
    fn from_dir_matches_builtin() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
        let loaded = TemplateSet::from_dir(dir).unwrap();
        for id in TemplateId::ALL {
            assert_eq!(loaded.get(id), set().get(id));
        }
    }

    #[test]
    fn diagnostics_roundtrip_as_strings() {
        for d in [
            Diagnostic::NoCodeFence,
            Diagnostic::CountMismatch { found: 3, expected: 2 },
            Diagnostic::Backfilled {
                positions: vec![18, 19],
            },
            Diagnostic::Truncated { found: 3, kept: 2 },
            Diagnostic::Note("x".into()),
        ] {
            let s = String::from(d.clone());
            assert_eq!(Diagnostic::try_from(s).unwrap(), d);
        }
    }

    proptest! {
        #[test]
        fn rendering_is_injective_on_required_values(a in ".{0,30}", b in ".{0,30}") {
            prop_assume!(a != b);
            let s = set();
            let mk = |d: &str| bindings([
                ("task_description", d.to_string()),
                ("test_inputs_formatted", "x".to_string()),
                ("len", "2".to_string()),
            ]);
            let ra = s.render(TemplateId::Tentative, &mk(&a)).unwrap();
            let rb = s.render(TemplateId::Tentative, &mk(&b)).unwrap();
            prop_assert_ne!(ra.user_text, rb.user_text);
        }
    }
}
