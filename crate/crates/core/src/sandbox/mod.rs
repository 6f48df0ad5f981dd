//! Candidate implementations and execution-based validation of oracle sets.

pub mod protocol;
mod runner;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use runner::{RunnerCommand, Sandbox};

use crate::agent::AgentContext;
use crate::error::PipelineError;
use crate::gateway::ChatExchange;
use crate::prompt::{bindings, extract_code_block, format_examples, Assertion, OracleSet, TemplateId};
use crate::task::Task;

pub const MAX_ERROR_MESSAGE_CHARS: usize = 2000;
/// Example calls shown to the candidate-code generator.
pub const CANDIDATE_EXAMPLES: usize = 3;

pub(crate) fn truncate_message(message: &str) -> String {
    match message.char_indices().nth(MAX_ERROR_MESSAGE_CHARS) {
        Some((i, _)) => message[..i].to_string(),
        None => message.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    AssertionFailed,
    RuntimeError,
    Timeout,
    ParseError,
    NotExecuted,
    CandidateError,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::AssertionFailed => "assertion_failed",
            Status::RuntimeError => "runtime_error",
            Status::Timeout => "timeout",
            Status::ParseError => "parse_error",
            Status::NotExecuted => "not_executed",
            Status::CandidateError => "candidate_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub input_index: usize,
    pub status: Status,
    pub error_type: Option<String>,
    pub error_message: Option<String>,
    pub elapsed_ms: f64,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    /// `TypeError: can only concatenate ...` style one-liner for prompts.
    pub fn describe(&self) -> String {
        match (&self.error_type, &self.error_message) {
            (Some(t), Some(m)) if !m.is_empty() => format!("{t}: {m}"),
            (Some(t), _) => t.clone(),
            (None, Some(m)) if !m.is_empty() => format!("{}: {m}", self.status.as_str()),
            _ => self.status.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecLimits {
    pub timeout_ms: u64,
    pub total_timeout_ms: u64,
    pub memory_limit_mb: u64,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            timeout_ms: 5000,
            total_timeout_ms: 60_000,
            memory_limit_mb: 512,
        }
    }
}

impl ExecLimits {
    pub fn check(&self) -> Result<(), SandboxError> {
        if self.timeout_ms == 0 || self.total_timeout_ms == 0 || self.memory_limit_mb == 0 {
            return Err(SandboxError::Limits("limits must be positive".into()));
        }
        if self.total_timeout_ms < self.timeout_ms {
            return Err(SandboxError::Limits(format!(
                "total timeout {} ms is below the per-assertion timeout {} ms",
                self.total_timeout_ms, self.timeout_ms
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("cannot start runner `{command}`: {message}")]
    RunnerSpawn { command: String, message: String },
    #[error("runner protocol violation: {message}; raw output: {raw:?}")]
    Protocol { message: String, raw: String },
    #[error("invalid execution limits: {0}")]
    Limits(String),
}

/// One batch: a candidate plus the assertions to run against it.
#[derive(Debug, Clone, Copy)]
pub struct ExecJob<'a> {
    pub candidate_code: &'a str,
    pub function_name: &'a str,
    pub assertions: &'a [String],
}

/// Runs assertion batches and returns exactly one verdict per assertion.
pub trait Executor: Send + Sync {
    fn execute(&self, job: &ExecJob<'_>, limits: &ExecLimits) -> Result<Vec<Verdict>, SandboxError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateCode {
    pub source_text: String,
    pub function_name: String,
    /// Cache key of the exchange that produced the source.
    pub generation_exchange: String,
}

impl CandidateCode {
    pub fn digest(&self) -> String {
        hex::encode(&Sha256::digest(self.source_text.as_bytes())[..8])
    }
}

/// True when `source` has a top-level or nested `def <name>(`.
pub fn defines(source: &str, function_name: &str) -> bool {
    source.lines().any(|line| {
        let t = line.trim_start();
        let t = t.strip_prefix("async ").unwrap_or(t);
        t.strip_prefix("def ")
            .and_then(|rest| rest.trim_start().strip_prefix(function_name))
            .is_some_and(|rest| rest.trim_start().starts_with('('))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    /// `None` marks the task candidate-unavailable.
    pub candidate: Option<CandidateCode>,
    pub exchanges: Vec<ChatExchange>,
    pub notes: Vec<String>,
}

/// Ask for a plausible implementation of the function under test, with one
/// corrective re-prompt when the reply lacks a usable definition.
pub fn generate_candidate(agents: &AgentContext<'_>, task: &Task) -> Result<CandidateOutcome, PipelineError> {
    let b = bindings([
        ("task_description", task.description.clone()),
        ("function_name", task.function_name.clone()),
        ("test_examples", format_examples(task, CANDIDATE_EXAMPLES)),
    ]);
    let prompt = agents.templates.render(TemplateId::CandidateCode, &b)?;
    let mut exchanges = Vec::new();
    let mut notes = Vec::new();

    let attempts = [
        ("candidate_code".to_string(), prompt.user_text.clone()),
        (
            "candidate_code:retry".to_string(),
            format!(
                "{}\n\nYour previous reply did not contain a complete definition of `{}`. \
                 Reply with the full function in a single ```python code block.",
                prompt.user_text, task.function_name
            ),
        ),
    ];
    for (tag, user_text) in attempts {
        let exchange = agents
            .gateway
            .complete(agents.settings.request(tag, prompt.system_text.clone(), user_text))?;
        let key = exchange.key();
        let extracted = extract_code_block(&exchange.reply_text);
        exchanges.push(exchange);
        match extracted {
            Ok(source) if defines(&source, &task.function_name) => {
                return Ok(CandidateOutcome {
                    candidate: Some(CandidateCode {
                        source_text: source,
                        function_name: task.function_name.clone(),
                        generation_exchange: key,
                    }),
                    exchanges,
                    notes,
                });
            }
            Ok(_) => notes.push(format!("candidate reply does not define {}", task.function_name)),
            Err(e) => notes.push(e.to_string()),
        }
    }
    notes.push("candidate unavailable".into());
    Ok(CandidateOutcome {
        candidate: None,
        exchanges,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub task_id: String,
    /// Short digest of the candidate source the report was produced against.
    pub candidate: String,
    pub verdicts: Vec<Verdict>,
    pub all_pass: bool,
}

impl ValidationReport {
    pub fn candidate_failed(&self) -> bool {
        self.verdicts.iter().any(|v| v.status == Status::CandidateError)
    }

    pub fn statuses(&self) -> Vec<Status> {
        self.verdicts.iter().map(|v| v.status).collect()
    }
}

/// Execute `oracles` against `source` and check verdict completeness.
pub fn run_oracles(
    executor: &dyn Executor,
    source: &str,
    function_name: &str,
    assertions: &[String],
    limits: &ExecLimits,
) -> Result<Vec<Verdict>, SandboxError> {
    let verdicts = executor.execute(
        &ExecJob {
            candidate_code: source,
            function_name,
            assertions,
        },
        limits,
    )?;
    if verdicts.len() != assertions.len() {
        return Err(SandboxError::Protocol {
            message: format!(
                "executor returned {} verdicts for {} assertions",
                verdicts.len(),
                assertions.len()
            ),
            raw: String::new(),
        });
    }
    Ok(verdicts)
}

pub fn validate(
    executor: &dyn Executor,
    candidate: &CandidateCode,
    oracles: &OracleSet,
    limits: &ExecLimits,
) -> Result<ValidationReport, SandboxError> {
    let verdicts = run_oracles(
        executor,
        &candidate.source_text,
        &candidate.function_name,
        &oracles.texts(),
        limits,
    )?;
    let all_pass = verdicts.iter().all(Verdict::passed);
    Ok(ValidationReport {
        task_id: oracles.task_id.clone(),
        candidate: candidate.digest(),
        verdicts,
        all_pass,
    })
}

/// Non-passing entries in ascending index order.
pub fn failed_subset(report: &ValidationReport, oracles: &OracleSet) -> Vec<(usize, Assertion, Verdict)> {
    report
        .verdicts
        .iter()
        .zip(&oracles.assertions)
        .enumerate()
        .filter(|(_, (v, _))| !v.passed())
        .map(|(i, (v, a))| (i, a.clone(), v.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::Origin;

    fn verdict(i: usize, status: Status) -> Verdict {
        Verdict {
            input_index: i,
            status,
            error_type: None,
            error_message: None,
            elapsed_ms: 0.0,
        }
    }

    fn report(statuses: &[Status]) -> (ValidationReport, OracleSet) {
        let lines: Vec<String> = (0..statuses.len()).map(|i| format!("assert f({i}) == {i}")).collect();
        let set = OracleSet::from_lines("t", &lines, Origin::Curator);
        let verdicts: Vec<_> = statuses.iter().enumerate().map(|(i, s)| verdict(i, *s)).collect();
        let all_pass = verdicts.iter().all(Verdict::passed);
        (
            ValidationReport {
                task_id: "t".into(),
                candidate: "c".into(),
                verdicts,
                all_pass,
            },
            set,
        )
    }

    #[test]
    fn failed_subset_single() {
        let (r, s) = report(&[Status::Pass, Status::AssertionFailed, Status::Pass]);
        let f = failed_subset(&r, &s);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].0, 1);
    }

    #[test]
    fn failed_subset_all_pass() {
        let (r, s) = report(&[Status::Pass; 3]);
        assert!(failed_subset(&r, &s).is_empty());
    }

    #[test]
    fn failed_subset_candidate_error() {
        let (r, s) = report(&[Status::CandidateError; 4]);
        let idx: Vec<_> = failed_subset(&r, &s).into_iter().map(|e| e.0).collect();
        assert_eq!(idx, [0, 1, 2, 3]);
    }

    #[test]
    fn definition_detection() {
        assert!(defines("def add(a, b):\n    return a + b\n", "add"));
        assert!(defines("class X:\n    def add (self): pass", "add"));
        assert!(defines("async def add(a): pass", "add"));
        assert!(!defines("def adder(a): pass", "add"));
        assert!(!defines("add = lambda a: a", "add"));
    }

    #[test]
    fn limits_invariant() {
        assert!(ExecLimits::default().check().is_ok());
        let bad = ExecLimits {
            timeout_ms: 10,
            total_timeout_ms: 5,
            memory_limit_mb: 1,
        };
        assert!(bad.check().is_err());
    }

    #[test]
    fn messages_truncated_to_limit() {
        let long = "é".repeat(5000);
        assert_eq!(truncate_message(&long).chars().count(), MAX_ERROR_MESSAGE_CHARS);
    }

    #[test]
    fn describe_formats() {
        let mut v = verdict(0, Status::RuntimeError);
        v.error_type = Some("TypeError".into());
        v.error_message = Some("bad".into());
        assert_eq!(v.describe(), "TypeError: bad");
        assert_eq!(verdict(0, Status::Timeout).describe(), "timeout");
    }
}
