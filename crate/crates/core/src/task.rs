//! Benchmark task suites: JSONL loading, validation and normalization.
//!
//! One task object per line:
//!
//! ```text
//! {"task_id": str, "description": str, "function_name": str, "test_inputs": [str],
//!  "canonical_solution": str?, "hidden_tests": [str]?, "buggy_variants": [str]?}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Input count carried by every task of a reference suite.
pub const REFERENCE_INPUT_COUNT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub description: String,
    pub function_name: String,
    /// Raw argument-tuple snippets such as `"(1, 2)"`, kept textually.
    pub test_inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical_solution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_tests: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buggy_variants: Option<Vec<String>>,
}

impl Task {
    pub fn input_count(&self) -> usize {
        self.test_inputs.len()
    }

    /// Call expression for input `index`, e.g. `add(1, 2)` for input `(1, 2)`.
    pub fn call_expr(&self, index: usize) -> String {
        call_expr(&self.function_name, &self.test_inputs[index])
    }
}

/// Splice an argument snippet onto a function name.
///
/// A snippet that is a single parenthesized group is used as the argument
/// list verbatim; anything else is wrapped in parentheses.
pub fn call_expr(function_name: &str, input: &str) -> String {
    let input = input.trim();
    if is_single_group(input) {
        format!("{function_name}{input}")
    } else {
        format!("{function_name}({input})")
    }
}

fn is_single_group(s: &str) -> bool {
    if !s.starts_with('(') || !s.ends_with(')') {
        return false;
    }
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '\'' | '"' => quote = Some(c),
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => {
                depth -= 1;
                if depth == 0 && i + c.len_utf8() != s.len() {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

impl Diagnostic {
    fn error(message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            message: message.into(),
        }
    }

    fn warning(message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Warning,
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

const PYTHON_KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue", "def", "del",
    "elif", "else", "except", "finally", "for", "from", "global", "if", "import", "in", "is", "lambda", "nonlocal",
    "not", "or", "pass", "raise", "return", "try", "while", "with", "yield",
];

pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    let Some(first) = chars.next() else {
        return false;
    };
    (first == '_' || first.is_alphabetic())
        && chars.all(|c| c == '_' || c.is_alphanumeric())
        && !PYTHON_KEYWORDS.contains(&name)
}

/// Check every task invariant. Warnings do not block loading; errors do.
pub fn validate_task(task: &Task) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if task.task_id.trim().is_empty() {
        out.push(Diagnostic::error("task_id empty"));
    }
    if task.test_inputs.is_empty() {
        out.push(Diagnostic::error("test_inputs empty"));
    } else if task.test_inputs.len() < REFERENCE_INPUT_COUNT {
        out.push(Diagnostic::warning(format!(
            "test_inputs has {} entries; reference suites carry {REFERENCE_INPUT_COUNT}",
            task.test_inputs.len()
        )));
    }
    for (i, input) in task.test_inputs.iter().enumerate() {
        if input.contains('\n') || input.contains('\r') {
            out.push(Diagnostic::error(format!("test_inputs[{i}] spans multiple lines")));
        }
        if input.trim().is_empty() {
            out.push(Diagnostic::error(format!("test_inputs[{i}] is blank")));
        }
    }
    if !is_identifier(&task.function_name) {
        out.push(Diagnostic::error(format!(
            "function_name {:?} is not a valid identifier",
            task.function_name
        )));
    } else {
        let in_description = task.description.contains(&task.function_name);
        let in_solution = task
            .canonical_solution
            .as_deref()
            .is_some_and(|s| s.contains(&task.function_name));
        if !in_description && !in_solution {
            out.push(Diagnostic::error(format!(
                "function_name {:?} occurs in neither description nor canonical_solution",
                task.function_name
            )));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub suite_id: String,
    pub tasks: Vec<Task>,
    pub source_path: String,
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("line {line}: duplicate task_id {task_id:?}")]
    DuplicateId { line: usize, task_id: String },
}

impl TaskSuite {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SuiteError> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|source| SuiteError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let suite_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse(&content, suite_id, path.display().to_string())
    }

    /// Parse JSONL text. Blank lines are skipped; line numbers are 1-based
    /// physical lines.
    pub fn parse(
        content: &str,
        suite_id: impl Into<String>,
        source_path: impl Into<String>,
    ) -> Result<Self, SuiteError> {
        let mut tasks = Vec::new();
        let mut seen = HashSet::new();
        for (idx, raw) in content.split('\n').enumerate() {
            let line = idx + 1;
            let text = raw.strip_suffix('\r').unwrap_or(raw);
            if text.trim().is_empty() {
                continue;
            }
            let task: Task = serde_json::from_str(text).map_err(|e| SuiteError::Format {
                line,
                message: e.to_string(),
            })?;
            let errors: Vec<String> = validate_task(&task)
                .into_iter()
                .filter(Diagnostic::is_error)
                .map(|d| d.message)
                .collect();
            if !errors.is_empty() {
                return Err(SuiteError::Format {
                    line,
                    message: errors.join("; "),
                });
            }
            if !seen.insert(task.task_id.clone()) {
                return Err(SuiteError::DuplicateId {
                    line,
                    task_id: task.task_id,
                });
            }
            tasks.push(task);
        }
        Ok(Self {
            suite_id: suite_id.into(),
            tasks,
            source_path: source_path.into(),
        })
    }

    /// Serialize back to JSONL, one task per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for task in &self.tasks {
            out.push_str(&serde_json::to_string(task).expect("task serializes"));
            out.push('\n');
        }
        out
    }

    pub fn get(&self, task_id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    /// Non-blocking warnings for every task, prefixed with the task id.
    pub fn warnings(&self) -> Vec<String> {
        self.tasks
            .iter()
            .flat_map(|t| {
                validate_task(t)
                    .into_iter()
                    .filter(|d| !d.is_error())
                    .map(move |d| format!("{}: {}", t.task_id, d))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(n: usize, name: &str) -> Task {
        Task {
            task_id: "t1".into(),
            description: format!("def {name}(a, b): adds two ints"),
            function_name: name.into(),
            test_inputs: (0..n).map(|i| format!("({i}, {i})")).collect(),
            canonical_solution: None,
            hidden_tests: None,
            buggy_variants: None,
        }
    }

    fn line(id: &str) -> String {
        format!(
            r#"{{"task_id": "{id}", "description": "def add(a, b)", "function_name": "add", "test_inputs": ["(1, 2)"]}}"#
        )
    }

    #[test]
    fn twenty_inputs_valid_name_is_clean() {
        assert!(validate_task(&task(20, "add")).is_empty());
    }

    #[test]
    fn empty_inputs_is_an_error() {
        let d = validate_task(&task(0, "add"));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].message, "test_inputs empty");
        assert!(d[0].is_error());
    }

    #[test]
    fn bad_identifier_reported() {
        let mut t = task(20, "add");
        t.function_name = "2bad".into();
        let d = validate_task(&t);
        assert!(d.iter().any(|d| d.message.contains("identifier")), "{d:?}");
    }

    #[test]
    fn short_input_list_warns() {
        let d = validate_task(&task(3, "add"));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].severity, Severity::Warning);
    }

    #[test]
    fn name_must_occur_somewhere() {
        let mut t = task(20, "add");
        t.description = "sums things".into();
        assert!(validate_task(&t).iter().any(Diagnostic::is_error));
        t.canonical_solution = Some("def add(a, b):\n    return a + b\n".into());
        assert!(validate_task(&t).is_empty());
    }

    #[test]
    fn parses_three_lines_in_order() {
        let text = [line("a"), line("b"), line("c")].join("\n");
        let suite = TaskSuite::parse(&text, "s", "mem").unwrap();
        let ids: Vec<_> = suite.tasks.iter().map(|t| t.task_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn missing_field_names_the_line() {
        let bad = r#"{"task_id": "b", "description": "d", "test_inputs": ["(1)"]}"#;
        let text = format!("{}\n{}\n{}", line("a"), bad, line("c"));
        match TaskSuite::parse(&text, "s", "mem") {
            Err(SuiteError::Format { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("function_name"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!("{}\n{}\n", line("t1"), line("t1"));
        assert!(matches!(
            TaskSuite::parse(&text, "s", "mem"),
            Err(SuiteError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn call_expr_splices_argument_tuples() {
        assert_eq!(call_expr("add", "(1, 2)"), "add(1, 2)");
        assert_eq!(call_expr("f", "[1, 2]"), "f([1, 2])");
        assert_eq!(call_expr("f", "(1)+(2)"), "f((1)+(2))");
        assert_eq!(call_expr("f", "(')', 1)"), "f(')', 1)");
        assert_eq!(call_expr("f", "()"), "f()");
    }
}
