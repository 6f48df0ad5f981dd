//! Phase three: repair failed oracles from execution feedback, re-validating
//! the whole set after every round.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::agent::AgentContext;
use crate::error::{Aborted, PipelineError};
use crate::gateway::ChatExchange;
use crate::prompt::{
    align_slots, bindings, extract_assertions, refinement_followup, refinement_iteration_note, Assertion, Diagnostic,
    OracleSet, Origin, PromptError, RenderedPrompt, TemplateId, TemplateSet,
};
use crate::sandbox::{validate, CandidateCode, ExecLimits, Executor, ValidationReport, Verdict};
use crate::task::Task;

pub const DEFAULT_MAX_ITERATIONS: u32 = 5;
pub const MAX_ITERATIONS_LIMIT: u32 = 10;
/// Passing oracles shown as exemplars in the repair prompt.
pub const PASSING_EXEMPLARS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AllPass,
    IterationCap,
    CandidateUnavailable,
    /// Every remaining failure sits on an index that passed earlier and is
    /// therefore locked.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementIteration {
    pub iteration_index: u32,
    pub failed_before: Vec<usize>,
    /// Assertions actually replaced this round.
    pub repaired: Vec<Assertion>,
    pub report_after: ValidationReport,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub iterations: Vec<RefinementIteration>,
    pub stop_reason: StopReason,
}

impl RefinementTrace {
    /// `(iteration, index)` pairs where an assertion was rewritten after it
    /// had already passed. Empty for every trace this module produces.
    pub fn touch_violations(&self, initial: &ValidationReport) -> Vec<(u32, usize)> {
        let mut passed: BTreeSet<usize> = passing(initial).collect();
        let mut out = Vec::new();
        for it in &self.iterations {
            for a in &it.repaired {
                if passed.contains(&a.input_index) {
                    out.push((it.iteration_index, a.input_index));
                }
            }
            passed.extend(passing(&it.report_after));
        }
        out
    }
}

fn passing(report: &ValidationReport) -> impl Iterator<Item = usize> + '_ {
    report
        .verdicts
        .iter()
        .enumerate()
        .filter(|(_, v)| v.passed())
        .map(|(i, _)| i)
}

pub fn refinement_tag(iteration: u32) -> String {
    format!("refinement:{iteration}")
}

/// Numbered failures, each followed by its execution error.
pub fn format_failed_oracles(failed: &[(usize, Assertion, Verdict)]) -> String {
    failed
        .iter()
        .enumerate()
        .map(|(n, (_, a, v))| format!("{}. {}\n   Error: {}", n + 1, a.source_text, v.describe()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn format_passed_examples(passed: &[Assertion]) -> String {
    if passed.is_empty() {
        return String::new();
    }
    let lines: Vec<&str> = passed
        .iter()
        .take(PASSING_EXEMPLARS)
        .map(|a| a.source_text.as_str())
        .collect();
    format!("Passing Oracles (for reference):\n{}", lines.join("\n"))
}

pub fn build_refinement_prompt(
    templates: &TemplateSet,
    task: &Task,
    candidate: &CandidateCode,
    failed: &[(usize, Assertion, Verdict)],
    passed_examples: &[Assertion],
    iteration: u32,
) -> Result<RenderedPrompt, PromptError> {
    let b = bindings([
        ("iteration_note", refinement_iteration_note(iteration)),
        ("task_description", task.description.clone()),
        ("candidate_code", candidate.source_text.trim_end().to_string()),
        ("passed_examples", format_passed_examples(passed_examples)),
        ("failed_oracles_formatted", format_failed_oracles(failed)),
        ("followup_note", refinement_followup(iteration)),
        ("len", failed.len().to_string()),
    ]);
    templates.render(TemplateId::Refinement, &b)
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Flag repairs that call the function with another slot's input instead
/// of their own.
fn suspicious_mappings(task: &Task, slots: &[usize], lines: &[String]) -> Vec<Diagnostic> {
    let calls: Vec<(usize, String)> = slots.iter().map(|&s| (s, squash(&task.call_expr(s)))).collect();
    let mut out = Vec::new();
    for (line, (slot, own)) in lines.iter().zip(&calls) {
        let text = squash(line);
        if text.contains(own.as_str()) {
            continue;
        }
        if let Some((other, _)) = calls.iter().find(|(o, c)| o != slot && text.contains(c.as_str())) {
            out.push(Diagnostic::Note(format!(
                "suspicious mapping: repair for input {slot} calls input {other}"
            )));
        }
    }
    out
}

pub struct RefineStep {
    pub oracles: OracleSet,
    /// Indices rewritten by this step.
    pub replaced: Vec<usize>,
    pub diagnostics: Vec<Diagnostic>,
    pub exchange: ChatExchange,
}

/// One batched repair call. Reply line `i` replaces the oracle at `slots[i]`.
pub fn refine_once(
    agents: &AgentContext<'_>,
    task: &Task,
    candidate: &CandidateCode,
    oracles: &OracleSet,
    report: &ValidationReport,
    slots: &[usize],
    iteration: u32,
) -> Result<RefineStep, PipelineError> {
    let failed: Vec<(usize, Assertion, Verdict)> = slots
        .iter()
        .map(|&i| (i, oracles.assertions[i].clone(), report.verdicts[i].clone()))
        .collect();
    let passed: Vec<Assertion> = passing(report).map(|i| oracles.assertions[i].clone()).collect();
    let prompt = build_refinement_prompt(agents.templates, task, candidate, &failed, &passed, iteration)?;
    let request = agents
        .settings
        .request(refinement_tag(iteration), prompt.system_text, prompt.user_text);
    let exchange = agents.gateway.complete(request)?;

    let extracted = extract_assertions(&exchange.reply_text, slots.len());
    let aligned = align_slots(&extracted.assertions, oracles, slots, Origin::Refined(iteration));
    let mut diagnostics = extracted.diagnostics;
    diagnostics.extend(aligned.diagnostics);
    diagnostics.extend(suspicious_mappings(task, slots, &extracted.assertions));
    let replaced = slots[..extracted.assertions.len().min(slots.len())].to_vec();
    Ok(RefineStep {
        oracles: aligned.set,
        replaced,
        diagnostics,
        exchange,
    })
}

pub struct RefinementOutcome {
    pub oracles: OracleSet,
    pub report: Option<ValidationReport>,
    pub trace: RefinementTrace,
    pub exchanges: Vec<ChatExchange>,
}

/// Repair and re-validate until every oracle passes, the cap is reached, or
/// only locked failures remain. Indices that ever passed are never rewritten.
#[allow(clippy::too_many_arguments)]
pub fn run_refinement_loop(
    agents: &AgentContext<'_>,
    executor: &dyn Executor,
    task: &Task,
    candidate: Option<&CandidateCode>,
    oracles: OracleSet,
    initial: Option<&ValidationReport>,
    limits: &ExecLimits,
    max_iterations: u32,
) -> Result<RefinementOutcome, Aborted> {
    let unavailable = |oracles| RefinementOutcome {
        oracles,
        report: initial.cloned(),
        trace: RefinementTrace {
            iterations: Vec::new(),
            stop_reason: StopReason::CandidateUnavailable,
        },
        exchanges: Vec::new(),
    };
    let (Some(candidate), Some(initial)) = (candidate, initial) else {
        return Ok(unavailable(oracles));
    };
    if initial.candidate_failed() {
        return Ok(unavailable(oracles));
    }

    let mut oracles = oracles;
    let mut report = initial.clone();
    let mut locked: BTreeSet<usize> = passing(&report).collect();
    let mut iterations = Vec::new();
    let mut exchanges = Vec::new();
    let mut stop_reason = None;

    for iteration in 0..max_iterations {
        if report.all_pass {
            stop_reason = Some(StopReason::AllPass);
            break;
        }
        let failed_before: Vec<usize> = (0..report.verdicts.len())
            .filter(|i| !report.verdicts[*i].passed())
            .collect();
        let slots: Vec<usize> = failed_before.iter().copied().filter(|i| !locked.contains(i)).collect();
        if slots.is_empty() {
            stop_reason = Some(StopReason::Stalled);
            break;
        }
        let step = match refine_once(agents, task, candidate, &oracles, &report, &slots, iteration) {
            Ok(s) => s,
            Err(e) => return Err(Aborted::new(e, exchanges)),
        };
        exchanges.push(step.exchange);
        oracles = step.oracles;
        report = match validate(executor, candidate, &oracles, limits) {
            Ok(r) => r,
            Err(e) => return Err(Aborted::new(e, exchanges)),
        };
        locked.extend(passing(&report));
        iterations.push(RefinementIteration {
            iteration_index: iteration,
            failed_before,
            repaired: step.replaced.iter().map(|&i| oracles.assertions[i].clone()).collect(),
            report_after: report.clone(),
            diagnostics: step.diagnostics,
        });
    }
    let stop_reason = stop_reason.unwrap_or(if report.all_pass {
        StopReason::AllPass
    } else {
        StopReason::IterationCap
    });
    Ok(RefinementOutcome {
        oracles,
        report: Some(report),
        trace: RefinementTrace {
            iterations,
            stop_reason,
        },
        exchanges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, ModelSettings, ProviderScript, ScriptRule, ScriptedProvider};
    use crate::sandbox::{ExecJob, SandboxError, Status};
    use std::sync::Arc;

    /// Passes assertions whose expected value equals the sum of the call's
    /// two integer arguments.
    struct SumExecutor;

    fn sum_ok(assertion: &str) -> bool {
        let parse = || -> Option<bool> {
            let args = assertion.strip_prefix("assert add(")?;
            let (args, rest) = args.split_once(')')?;
            let expected: i64 = rest.trim().strip_prefix("==")?.trim().parse().ok()?;
            let sum: i64 = args
                .split(',')
                .map(|a| a.trim().parse::<i64>().ok())
                .sum::<Option<i64>>()?;
            Some(sum == expected)
        };
        parse().unwrap_or(false)
    }

    impl Executor for SumExecutor {
        fn execute(&self, job: &ExecJob<'_>, _: &ExecLimits) -> Result<Vec<Verdict>, SandboxError> {
            Ok(job
                .assertions
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let ok = sum_ok(a);
                    Verdict {
                        input_index: i,
                        status: if ok { Status::Pass } else { Status::AssertionFailed },
                        error_type: (!ok).then(|| "AssertionError".into()),
                        error_message: (!ok).then(|| "mismatch".into()),
                        elapsed_ms: 0.0,
                    }
                })
                .collect())
        }
    }

    fn task() -> Task {
        Task {
            task_id: "t/add".into(),
            description: "def add(a, b): return the sum".into(),
            function_name: "add".into(),
            test_inputs: (0..8).map(|i| format!("({i}, {i})")).collect(),
            canonical_solution: None,
            hidden_tests: None,
            buggy_variants: None,
        }
    }

    fn candidate() -> CandidateCode {
        CandidateCode {
            source_text: "def add(a, b):\n    return a + b\n".into(),
            function_name: "add".into(),
            generation_exchange: "k".into(),
        }
    }

    fn oracles(wrong: &[usize]) -> OracleSet {
        let lines: Vec<String> = (0..8)
            .map(|i| {
                format!(
                    "assert add({i}, {i}) == {}",
                    if wrong.contains(&i) { 2 * i + 1 } else { 2 * i }
                )
            })
            .collect();
        OracleSet::from_lines("t/add", &lines, Origin::Curator)
    }

    fn fence(lines: &[String]) -> String {
        format!("```python\n{}\n```", lines.join("\n"))
    }

    fn run_loop(rules: Vec<ScriptRule>, wrong: &[usize], cap: u32) -> (RefinementOutcome, ValidationReport) {
        let g = Gateway::new(Arc::new(ScriptedProvider::new(ProviderScript { rules })));
        let s = ModelSettings::default();
        let t = TemplateSet::builtin();
        let a = AgentContext::new(&g, &s, &t);
        let set = oracles(wrong);
        let initial = validate(&SumExecutor, &candidate(), &set, &ExecLimits::default()).unwrap();
        let out = run_refinement_loop(
            &a,
            &SumExecutor,
            &task(),
            Some(&candidate()),
            set,
            Some(&initial),
            &ExecLimits::default(),
            cap,
        )
        .unwrap();
        (out, initial)
    }

    #[test]
    fn prompt_iteration_zero() {
        let set = oracles(&[2, 7]);
        let r = validate(&SumExecutor, &candidate(), &set, &ExecLimits::default()).unwrap();
        let failed = crate::sandbox::failed_subset(&r, &set);
        let p = build_refinement_prompt(&TemplateSet::builtin(), &task(), &candidate(), &failed, &[], 0).unwrap();
        assert!(p
            .user_text
            .contains("1. assert add(2, 2) == 5\n   Error: AssertionError: mismatch"));
        assert!(p.user_text.contains("2. assert add(7, 7) == 15"));
        assert!(!p.user_text.contains("previous iteration"));
        assert!(!p.user_text.contains("Passing Oracles"));
        assert!(p.user_text.contains("Output your final 2 test assertions"));
    }

    #[test]
    fn prompt_later_iteration_and_exemplar_cap() {
        let set = oracles(&[0]);
        let r = validate(&SumExecutor, &candidate(), &set, &ExecLimits::default()).unwrap();
        let failed = crate::sandbox::failed_subset(&r, &set);
        let passed: Vec<_> = set.assertions[1..].to_vec();
        let p = build_refinement_prompt(&TemplateSet::builtin(), &task(), &candidate(), &failed, &passed, 2).unwrap();
        assert!(p.user_text.contains("(iteration 3)"));
        assert!(p.user_text.contains("assert add(5, 5) == 10"));
        assert!(!p.user_text.contains("assert add(6, 6) == 12"));
    }

    #[test]
    fn positional_mapping_onto_failed_slots() {
        let reply = fence(&["assert add(2, 2) == 4".into(), "assert add(7, 7) == 14".into()]);
        let (out, _) = run_loop(vec![ScriptRule::new("refinement:*", reply)], &[2, 7], 5);
        assert_eq!(out.trace.stop_reason, StopReason::AllPass);
        assert_eq!(out.trace.iterations.len(), 1);
        assert_eq!(out.oracles.assertions[2].source_text, "assert add(2, 2) == 4");
        assert_eq!(out.oracles.assertions[7].origin, Origin::Refined(0));
        assert_eq!(out.oracles.assertions[3].origin, Origin::Curator);
    }

    #[test]
    fn short_repair_backfills_later_slot() {
        let reply = fence(&["assert add(2, 2) == 4".into()]);
        let (out, _) = run_loop(vec![ScriptRule::new("refinement:*", reply)], &[2, 7], 1);
        let it = &out.trace.iterations[0];
        assert_eq!(out.oracles.assertions[7].source_text, "assert add(7, 7) == 15");
        assert!(it.diagnostics.contains(&Diagnostic::Backfilled { positions: vec![7] }));
        assert_eq!(it.repaired.len(), 1);
        assert_eq!(out.trace.stop_reason, StopReason::IterationCap);
    }

    #[test]
    fn surplus_repair_truncated() {
        let reply = fence(&[
            "assert add(2, 2) == 4".into(),
            "assert add(7, 7) == 14".into(),
            "assert add(9, 9) == 18".into(),
        ]);
        let (out, _) = run_loop(vec![ScriptRule::new("refinement:*", reply)], &[2, 7], 5);
        assert!(out.trace.iterations[0]
            .diagnostics
            .contains(&Diagnostic::CountMismatch { found: 3, expected: 2 }));
        assert_eq!(out.trace.stop_reason, StopReason::AllPass);
    }

    #[test]
    fn swapped_repairs_are_flagged() {
        let reply = fence(&["assert add(7, 7) == 14".into(), "assert add(2, 2) == 4".into()]);
        let (out, _) = run_loop(vec![ScriptRule::new("refinement:*", reply)], &[2, 7], 1);
        let notes: Vec<String> = out.trace.iterations[0]
            .diagnostics
            .iter()
            .map(|d| d.to_string())
            .collect();
        assert!(
            notes.iter().any(|n| n.contains("repair for input 2 calls input 7")),
            "{notes:?}"
        );
    }

    #[test]
    fn one_fix_per_iteration() {
        let rules = vec![
            ScriptRule::new(
                "refinement:0",
                fence(&["assert add(2, 2) == 4".into(), "assert add(7, 7) == 99".into()]),
            ),
            ScriptRule::new("refinement:1", fence(&["assert add(7, 7) == 14".into()])),
        ];
        let (out, initial) = run_loop(rules, &[2, 7], 5);
        assert_eq!(out.trace.iterations.len(), 2);
        assert_eq!(out.trace.stop_reason, StopReason::AllPass);
        assert_eq!(out.trace.iterations[1].failed_before, [7]);
        assert!(out.trace.touch_violations(&initial).is_empty());
        assert_eq!(out.exchanges.len(), 2);
    }

    #[test]
    fn never_repairing_hits_cap() {
        let (out, _) = run_loop(vec![ScriptRule::new("refinement:*", "no idea")], &[1], 5);
        assert_eq!(out.trace.iterations.len(), 5);
        assert_eq!(out.trace.stop_reason, StopReason::IterationCap);
        let idx: Vec<u32> = out.trace.iterations.iter().map(|i| i.iteration_index).collect();
        assert_eq!(idx, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn already_passing_needs_no_calls() {
        let (out, _) = run_loop(vec![], &[], 5);
        assert!(out.trace.iterations.is_empty());
        assert_eq!(out.trace.stop_reason, StopReason::AllPass);
    }

    #[test]
    fn zero_cap_returns_input() {
        let (out, _) = run_loop(vec![], &[3], 0);
        assert!(out.trace.iterations.is_empty());
        assert_eq!(out.oracles, oracles(&[3]));
        assert_eq!(out.trace.stop_reason, StopReason::IterationCap);
    }

    #[test]
    fn missing_candidate_short_circuits() {
        let g = Gateway::new(Arc::new(ScriptedProvider::new(ProviderScript::default())));
        let s = ModelSettings::default();
        let t = TemplateSet::builtin();
        let a = AgentContext::new(&g, &s, &t);
        let out = run_refinement_loop(
            &a,
            &SumExecutor,
            &task(),
            None,
            oracles(&[1]),
            None,
            &ExecLimits::default(),
            5,
        )
        .unwrap();
        assert_eq!(out.trace.stop_reason, StopReason::CandidateUnavailable);
        assert_eq!(g.provider_calls(), 0);
    }
}
