//! Phase one: tentative draft, requirements, specialist panel, interpreters
//! and the curator's consolidated candidate set.

use std::fmt;
use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::agent::AgentContext;
use crate::error::{Aborted, PipelineError};
use crate::gateway::{ChatExchange, GatewayError};
use crate::prompt::{
    align, bindings, extract_assertions, format_assertions, format_test_inputs, Diagnostic, OracleSet, Origin,
    TemplateId,
};
use crate::task::Task;

pub const TAG_TENTATIVE: &str = "tentative";
pub const TAG_REQUIREMENTS: &str = "requirements";
pub const TAG_CURATOR: &str = "curator";

/// Exchanges made by one full deliberation.
pub const FULL_EXCHANGES: usize = 2 + 2 * PanelistRole::ALL.len() + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelistRole {
    SpecificationExpert,
    EdgeCaseSpecialist,
    FunctionalValidator,
    AlgorithmicAnalyst,
}

impl PanelistRole {
    /// Fixed report order.
    pub const ALL: [PanelistRole; 4] = [
        PanelistRole::SpecificationExpert,
        PanelistRole::EdgeCaseSpecialist,
        PanelistRole::FunctionalValidator,
        PanelistRole::AlgorithmicAnalyst,
    ];

    pub fn role_id(self) -> &'static str {
        match self {
            PanelistRole::SpecificationExpert => "specification_expert",
            PanelistRole::EdgeCaseSpecialist => "edge_case_specialist",
            PanelistRole::FunctionalValidator => "functional_validator",
            PanelistRole::AlgorithmicAnalyst => "algorithmic_analyst",
        }
    }

    pub fn role_name(self) -> &'static str {
        match self {
            PanelistRole::SpecificationExpert => "Specification Expert",
            PanelistRole::EdgeCaseSpecialist => "Edge Case Specialist",
            PanelistRole::FunctionalValidator => "Functional Validator",
            PanelistRole::AlgorithmicAnalyst => "Algorithmic Analyst",
        }
    }

    pub fn role_focus(self) -> &'static str {
        match self {
            PanelistRole::SpecificationExpert => "Focuses on adherence to documented specifications and requirements.",
            PanelistRole::EdgeCaseSpecialist => "Focuses on boundary conditions, corner cases, and error scenarios.",
            PanelistRole::FunctionalValidator => {
                "Focuses on core functionality and expected input-output relationships."
            }
            PanelistRole::AlgorithmicAnalyst => "Focuses on step-by-step algorithm execution and correctness.",
        }
    }

    pub fn panelist_tag(self) -> String {
        format!("panelist:{}", self.role_id())
    }

    pub fn interpreter_tag(self) -> String {
        format!("interpreter:{}", self.role_id())
    }

    pub fn origin(self) -> Origin {
        Origin::Panelist(self.role_id().to_string())
    }
}

impl fmt::Display for PanelistRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.role_id())
    }
}

impl FromStr for PanelistRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|r| r.role_id() == s)
            .ok_or_else(|| format!("unknown panelist role {s:?}"))
    }
}

/// Diagnostic tagged with the stage that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDiagnostic {
    pub stage: String,
    pub diagnostic: Diagnostic,
}

fn tag_all(stage: &str, diagnostics: Vec<Diagnostic>) -> Vec<StageDiagnostic> {
    diagnostics
        .into_iter()
        .map(|diagnostic| StageDiagnostic {
            stage: stage.to_string(),
            diagnostic,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelistReport {
    pub role_id: PanelistRole,
    pub raw_reply: String,
    pub proposed: OracleSet,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpreterSummary {
    pub role_id: PanelistRole,
    pub summary_text: String,
    pub extracted: OracleSet,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliberationResult {
    pub tentative: OracleSet,
    pub requirements_text: String,
    pub reports: Vec<PanelistReport>,
    pub summaries: Vec<InterpreterSummary>,
    pub candidate: OracleSet,
    /// Kept out of serialized records; exchanges are stored by cache key.
    #[serde(skip)]
    pub exchanges: Vec<ChatExchange>,
    pub diagnostics: Vec<StageDiagnostic>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DeliberationOptions {
    /// Continue with three reports when exactly one panelist's provider fails.
    pub allow_degraded_panel: bool,
}

/// Assertions standing in for positions the tentative reply leaves empty.
pub fn placeholder_set(task: &Task) -> OracleSet {
    let lines: Vec<String> = (0..task.input_count())
        .map(|i| format!("assert {} == None", task.call_expr(i)))
        .collect();
    OracleSet::from_lines(&task.task_id, &lines, Origin::Tentative)
}

fn len_str(task: &Task) -> String {
    task.input_count().to_string()
}

pub struct Tentative {
    pub set: OracleSet,
    pub diagnostics: Vec<Diagnostic>,
    pub exchange: ChatExchange,
}

pub fn generate_tentative(agents: &AgentContext<'_>, task: &Task) -> Result<Tentative, PipelineError> {
    let b = bindings([
        ("task_description", task.description.clone()),
        ("test_inputs_formatted", format_test_inputs(task)),
        ("len", len_str(task)),
    ]);
    let exchange = agents.ask(TemplateId::Tentative, &b, TAG_TENTATIVE)?;
    let extracted = extract_assertions(&exchange.reply_text, task.input_count());
    let aligned = align(&extracted.assertions, &placeholder_set(task), Origin::Tentative);
    let mut diagnostics = extracted.diagnostics;
    diagnostics.extend(aligned.diagnostics);
    Ok(Tentative {
        set: aligned.set,
        diagnostics,
        exchange,
    })
}

pub struct Requirements {
    pub text: String,
    pub diagnostics: Vec<Diagnostic>,
    pub exchange: ChatExchange,
}

pub fn extract_requirements(agents: &AgentContext<'_>, task: &Task) -> Result<Requirements, PipelineError> {
    let b = bindings([("task_description", task.description.clone())]);
    let exchange = agents.ask(TemplateId::Requirements, &b, TAG_REQUIREMENTS)?;
    let mut diagnostics = Vec::new();
    if exchange.reply_text.trim().is_empty() {
        diagnostics.push(Diagnostic::EmptyReply);
    }
    Ok(Requirements {
        text: exchange.reply_text.clone(),
        diagnostics,
        exchange,
    })
}

fn ask_panelist(
    agents: &AgentContext<'_>,
    task: &Task,
    tentative: &OracleSet,
    requirements_text: &str,
    role: PanelistRole,
) -> Result<(PanelistReport, ChatExchange), PipelineError> {
    let b = bindings([
        ("role_name", role.role_name().to_string()),
        ("role_focus", role.role_focus().to_string()),
        ("task_description", task.description.clone()),
        ("requirements", requirements_text.to_string()),
        ("tentative_formatted", format_assertions(tentative)),
        ("test_inputs_formatted", format_test_inputs(task)),
        ("len", len_str(task)),
    ]);
    let exchange = agents.ask(TemplateId::Panelist, &b, role.panelist_tag())?;
    let extracted = extract_assertions(&exchange.reply_text, task.input_count());
    let aligned = align(&extracted.assertions, tentative, role.origin());
    let mut diagnostics = extracted.diagnostics;
    diagnostics.extend(aligned.diagnostics);
    Ok((
        PanelistReport {
            role_id: role,
            raw_reply: exchange.reply_text.clone(),
            proposed: aligned.set,
            diagnostics,
        },
        exchange,
    ))
}

/// Run `f` once per item on scoped threads; results come back in input order.
fn fan_out<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    thread::scope(|s| {
        let handles: Vec<_> = items.iter().map(|item| s.spawn(|| f(item))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    })
}

pub struct Panel {
    pub reports: Vec<PanelistReport>,
    pub exchanges: Vec<ChatExchange>,
    pub notes: Vec<String>,
}

pub fn run_panel(
    agents: &AgentContext<'_>,
    task: &Task,
    tentative: &OracleSet,
    requirements_text: &str,
    options: DeliberationOptions,
) -> Result<Panel, Aborted> {
    let outcomes = fan_out(&PanelistRole::ALL, |&role| {
        ask_panelist(agents, task, tentative, requirements_text, role)
    });
    let mut panel = Panel {
        reports: Vec::new(),
        exchanges: Vec::new(),
        notes: Vec::new(),
    };
    let mut failures = Vec::new();
    for (role, outcome) in PanelistRole::ALL.into_iter().zip(outcomes) {
        match outcome {
            Ok((report, exchange)) => {
                panel.reports.push(report);
                panel.exchanges.push(exchange);
            }
            Err(e) => failures.push((role, e)),
        }
    }
    let degradable = options.allow_degraded_panel
        && failures.len() == 1
        && matches!(failures[0].1, PipelineError::Gateway(GatewayError::Provider { .. }));
    if degradable {
        let (role, e) = failures.remove(0);
        log::warn!(
            "{}: panelist {role} failed, continuing with three reports: {e}",
            task.task_id
        );
        panel.notes.push(format!("degraded panel: {role} unavailable ({e})"));
    }
    match failures.into_iter().next() {
        Some((_, e)) => Err(Aborted::new(e, panel.exchanges)),
        None => Ok(panel),
    }
}

/// The proposed set as a code listing for the interpreter.
pub fn format_test_code(set: &OracleSet) -> String {
    format!("```python\n{}\n```", format_assertions(set))
}

pub fn interpret(
    agents: &AgentContext<'_>,
    report: &PanelistReport,
) -> Result<(InterpreterSummary, ChatExchange), PipelineError> {
    let role = report.role_id;
    let b = bindings([
        ("panelist_output", report.raw_reply.clone()),
        ("test_code_formatted", format_test_code(&report.proposed)),
    ]);
    let exchange = agents.ask(TemplateId::Interpreter, &b, role.interpreter_tag())?;
    let n = report.proposed.len();
    let extracted = extract_assertions(&exchange.reply_text, n);
    let aligned = align(&extracted.assertions, &report.proposed, role.origin());
    let mut diagnostics = extracted.diagnostics;
    diagnostics.extend(aligned.diagnostics);
    Ok((
        InterpreterSummary {
            role_id: role,
            summary_text: exchange.reply_text.clone(),
            extracted: aligned.set,
            diagnostics,
        },
        exchange,
    ))
}

/// Summaries joined under role headers, in role order.
pub fn format_panel_discussion(summaries: &[InterpreterSummary]) -> String {
    summaries
        .iter()
        .map(|s| format!("### {}\n{}", s.role_id.role_name(), s.summary_text.trim_end()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub struct Curated {
    pub set: OracleSet,
    pub diagnostics: Vec<Diagnostic>,
    pub exchange: ChatExchange,
}

pub fn curate(
    agents: &AgentContext<'_>,
    task: &Task,
    tentative: &OracleSet,
    summaries: &[InterpreterSummary],
) -> Result<Curated, PipelineError> {
    let b = bindings([
        ("task_description", task.description.clone()),
        ("tentative_formatted", format_assertions(tentative)),
        ("test_inputs_formatted", format_test_inputs(task)),
        ("panel_discussion", format_panel_discussion(summaries)),
        ("len", len_str(task)),
    ]);
    let exchange = agents.ask(TemplateId::Curator, &b, TAG_CURATOR)?;
    let extracted = extract_assertions(&exchange.reply_text, task.input_count());
    let aligned = align(&extracted.assertions, tentative, Origin::Curator);
    let mut diagnostics = extracted.diagnostics;
    diagnostics.extend(aligned.diagnostics);
    Ok(Curated {
        set: aligned.set,
        diagnostics,
        exchange,
    })
}

pub fn deliberate(
    agents: &AgentContext<'_>,
    task: &Task,
    options: DeliberationOptions,
) -> Result<DeliberationResult, Aborted> {
    let mut exchanges = Vec::with_capacity(FULL_EXCHANGES);
    let mut diagnostics = Vec::new();

    let tentative = generate_tentative(agents, task).map_err(|e| Aborted::new(e, Vec::new()))?;
    exchanges.push(tentative.exchange);
    diagnostics.extend(tag_all(TAG_TENTATIVE, tentative.diagnostics));
    let tentative = tentative.set;

    let requirements = match extract_requirements(agents, task) {
        Ok(r) => r,
        Err(e) => return Err(Aborted::new(e, exchanges)),
    };
    exchanges.push(requirements.exchange);
    diagnostics.extend(tag_all(TAG_REQUIREMENTS, requirements.diagnostics));

    let panel = match run_panel(agents, task, &tentative, &requirements.text, options) {
        Ok(p) => p,
        Err(mut aborted) => {
            exchanges.append(&mut aborted.exchanges);
            aborted.exchanges = exchanges;
            return Err(aborted);
        }
    };
    exchanges.extend(panel.exchanges);
    for r in &panel.reports {
        diagnostics.extend(tag_all(&r.role_id.panelist_tag(), r.diagnostics.clone()));
    }

    let mut summaries = Vec::with_capacity(panel.reports.len());
    let mut failure = None;
    for outcome in fan_out(&panel.reports, |r| interpret(agents, r)) {
        match outcome {
            Ok((summary, exchange)) => {
                diagnostics.extend(tag_all(&summary.role_id.interpreter_tag(), summary.diagnostics.clone()));
                summaries.push(summary);
                exchanges.push(exchange);
            }
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    }
    if let Some(e) = failure {
        return Err(Aborted::new(e, exchanges));
    }

    let curated = match curate(agents, task, &tentative, &summaries) {
        Ok(c) => c,
        Err(e) => return Err(Aborted::new(e, exchanges)),
    };
    exchanges.push(curated.exchange);
    diagnostics.extend(tag_all(TAG_CURATOR, curated.diagnostics));

    let mut notes = panel.notes;
    notes.push(format!(
        "curator prompt text names three team members; {} summaries supplied",
        summaries.len()
    ));
    Ok(DeliberationResult {
        tentative,
        requirements_text: requirements.text,
        reports: panel.reports,
        summaries,
        candidate: curated.set,
        exchanges,
        diagnostics,
        notes,
    })
}
