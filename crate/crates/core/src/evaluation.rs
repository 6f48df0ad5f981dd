//! Scoring against canonical solutions, bug detection and the single-round
//! self-debug harness.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agent::AgentContext;
use crate::error::PipelineError;
use crate::gateway::ChatExchange;
use crate::prompt::{bindings, extract_code_block, Assertion, OracleSet, TemplateId};
use crate::sandbox::{defines, run_oracles, ExecLimits, Executor, SandboxError};
use crate::task::Task;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("task {0} has no canonical solution")]
    MissingCanonical(String),
    #[error("task {0} has no hidden tests")]
    MissingHiddenTests(String),
    #[error("task {0} has no buggy variants")]
    NoBuggyVariants(String),
    #[error("nothing to aggregate")]
    EmptyInput,
    #[error("record for {record} does not match oracle set for {oracles} ({detail})")]
    Mismatch {
        record: String,
        oracles: String,
        detail: String,
    },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// `100 * num / den` kept exact; rounded half-up to two decimals only when
/// displayed or serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Percentage {
    pub num: u64,
    pub den: u64,
}

impl Percentage {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0 && num <= den, "percentage {num}/{den} out of range");
        Self { num, den }
    }

    /// Value in hundredths of a percent, rounded half-up.
    pub fn hundredths(self) -> u64 {
        let scaled = 10_000u128 * self.num as u128;
        let den = self.den as u128;
        ((2 * scaled + den) / (2 * den)) as u64
    }

    pub fn rounded(self) -> f64 {
        self.hundredths() as f64 / 100.0
    }
}

impl fmt::Display for Percentage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = self.hundredths();
        write!(f, "{}.{:02}", h / 100, h % 100)
    }
}

impl Serialize for Percentage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.rounded())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub task_id: String,
    pub per_assertion_correct: Vec<bool>,
    pub task_correct: bool,
}

impl AccuracyRecord {
    pub fn from_flags(task_id: impl Into<String>, per_assertion_correct: Vec<bool>) -> Self {
        let task_correct = per_assertion_correct.iter().all(|c| *c);
        Self {
            task_id: task_id.into(),
            per_assertion_correct,
            task_correct,
        }
    }

    pub fn correct_count(&self) -> usize {
        self.per_assertion_correct.iter().filter(|c| **c).count()
    }
}

/// Run the oracle set against the canonical solution; only `pass` counts.
pub fn score_oracles(
    executor: &dyn Executor,
    oracles: &OracleSet,
    task: &Task,
    limits: &ExecLimits,
) -> Result<AccuracyRecord, EvalError> {
    let canonical = task
        .canonical_solution
        .as_deref()
        .ok_or_else(|| EvalError::MissingCanonical(task.task_id.clone()))?;
    let verdicts = run_oracles(executor, canonical, &task.function_name, &oracles.texts(), limits)?;
    Ok(AccuracyRecord::from_flags(
        task.task_id.clone(),
        verdicts.iter().map(|v| v.passed()).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MetricsSummary {
    pub task_level_pct: Percentage,
    pub test_level_pct: Percentage,
    pub n_tasks: usize,
    pub n_assertions: usize,
    pub n_correct_tasks: usize,
    pub n_correct_assertions: usize,
}

pub fn aggregate(records: &[AccuracyRecord]) -> Result<MetricsSummary, EvalError> {
    let n_tasks = records.len();
    let n_assertions: usize = records.iter().map(|r| r.per_assertion_correct.len()).sum();
    if n_tasks == 0 || n_assertions == 0 {
        return Err(EvalError::EmptyInput);
    }
    let n_correct_tasks = records.iter().filter(|r| r.task_correct).count();
    let n_correct_assertions: usize = records.iter().map(AccuracyRecord::correct_count).sum();
    Ok(MetricsSummary {
        task_level_pct: Percentage::new(n_correct_tasks as u64, n_tasks as u64),
        test_level_pct: Percentage::new(n_correct_assertions as u64, n_assertions as u64),
        n_tasks,
        n_assertions,
        n_correct_tasks,
        n_correct_assertions,
    })
}

/// Oracles marked correct in `record`, with their positions.
pub fn correct_subset(oracles: &OracleSet, record: &AccuracyRecord) -> Vec<Assertion> {
    oracles
        .assertions
        .iter()
        .zip(&record.per_assertion_correct)
        .filter(|(_, ok)| **ok)
        .map(|(a, _)| a.clone())
        .collect()
}

fn check_pair(oracles: &OracleSet, record: &AccuracyRecord) -> Result<(), EvalError> {
    if oracles.task_id != record.task_id || oracles.len() != record.per_assertion_correct.len() {
        return Err(EvalError::Mismatch {
            record: record.task_id.clone(),
            oracles: oracles.task_id.clone(),
            detail: format!(
                "{} flags for {} oracles",
                record.per_assertion_correct.len(),
                oracles.len()
            ),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugDetectionRecord {
    pub task_id: String,
    pub variant_index: usize,
    pub detected: bool,
    pub triggering_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugDetectionReport {
    pub task_id: String,
    /// Empty when the task has no verified-correct oracle.
    pub records: Vec<BugDetectionRecord>,
    pub excluded_variants: usize,
    pub diagnostics: Vec<String>,
}

/// Execute only the verified-correct oracles against each buggy variant.
pub fn bug_detection(
    executor: &dyn Executor,
    oracles: &OracleSet,
    record: &AccuracyRecord,
    task: &Task,
    limits: &ExecLimits,
) -> Result<BugDetectionReport, EvalError> {
    let variants = match task.buggy_variants.as_deref() {
        Some(v) if !v.is_empty() => v,
        _ => return Err(EvalError::NoBuggyVariants(task.task_id.clone())),
    };
    check_pair(oracles, record)?;
    let correct = correct_subset(oracles, record);
    if correct.is_empty() {
        return Ok(BugDetectionReport {
            task_id: task.task_id.clone(),
            records: Vec::new(),
            excluded_variants: variants.len(),
            diagnostics: vec![format!(
                "no verified-correct oracle; {} variant(s) excluded from the denominator",
                variants.len()
            )],
        });
    }
    let texts: Vec<String> = correct.iter().map(|a| a.source_text.clone()).collect();
    let mut records = Vec::with_capacity(variants.len());
    for (variant_index, source) in variants.iter().enumerate() {
        let verdicts = run_oracles(executor, source, &task.function_name, &texts, limits)?;
        let triggering_indices: Vec<usize> = verdicts
            .iter()
            .zip(&correct)
            .filter(|(v, _)| !v.passed())
            .map(|(_, a)| a.input_index)
            .collect();
        records.push(BugDetectionRecord {
            task_id: task.task_id.clone(),
            variant_index,
            detected: !triggering_indices.is_empty(),
            triggering_indices,
        });
    }
    Ok(BugDetectionReport {
        task_id: task.task_id.clone(),
        records,
        excluded_variants: 0,
        diagnostics: Vec::new(),
    })
}

/// Detected variants over all variants that had correct oracles available.
pub fn detection_rate(reports: &[BugDetectionReport]) -> Option<Percentage> {
    let records = reports.iter().flat_map(|r| &r.records);
    let (hit, total) = records.fold((0u64, 0u64), |(h, t), r| (h + r.detected as u64, t + 1));
    (total > 0).then(|| Percentage::new(hit, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfDebugFallback {
    /// No oracle fails on the buggy source; the unrepaired source was scored.
    NoFailingOracle,
    /// The reply held no definition of the function; the buggy source was scored.
    NoCodeInReply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfDebugRecord {
    pub task_id: String,
    pub variant_index: usize,
    pub feedback_assertion: Option<Assertion>,
    pub feedback_error: Option<String>,
    /// Whether the feedback oracle was itself verified correct, when known.
    pub feedback_oracle_correct: Option<bool>,
    pub repaired_source: String,
    pub hidden_pass: bool,
    pub fallback: Option<SelfDebugFallback>,
}

pub fn self_debug_tag(task: &Task, variant_index: usize) -> String {
    format!("self_debug:{}:{variant_index}", task.task_id)
}

fn hidden_pass(
    executor: &dyn Executor,
    task: &Task,
    hidden: &[String],
    source: &str,
    limits: &ExecLimits,
) -> Result<bool, EvalError> {
    let verdicts = run_oracles(executor, source, &task.function_name, hidden, limits)?;
    Ok(verdicts.iter().all(|v| v.passed()))
}

/// One feedback-driven repair of `buggy_source`, judged by the hidden tests.
/// The lowest-index oracle failing on the buggy source is the feedback.
#[allow(clippy::too_many_arguments)]
pub fn self_debug(
    agents: &AgentContext<'_>,
    executor: &dyn Executor,
    task: &Task,
    variant_index: usize,
    buggy_source: &str,
    oracles: &OracleSet,
    record: Option<&AccuracyRecord>,
    limits: &ExecLimits,
) -> Result<(SelfDebugRecord, Option<ChatExchange>), EvalError> {
    let hidden = task
        .hidden_tests
        .as_deref()
        .filter(|h| !h.is_empty())
        .ok_or_else(|| EvalError::MissingHiddenTests(task.task_id.clone()))?;
    if let Some(r) = record {
        check_pair(oracles, r)?;
    }
    let verdicts = run_oracles(executor, buggy_source, &task.function_name, &oracles.texts(), limits)?;
    let Some((index, verdict)) = verdicts.iter().enumerate().find(|(_, v)| !v.passed()) else {
        let pass = hidden_pass(executor, task, hidden, buggy_source, limits)?;
        return Ok((
            SelfDebugRecord {
                task_id: task.task_id.clone(),
                variant_index,
                feedback_assertion: None,
                feedback_error: None,
                feedback_oracle_correct: None,
                repaired_source: buggy_source.to_string(),
                hidden_pass: pass,
                fallback: Some(SelfDebugFallback::NoFailingOracle),
            },
            None,
        ));
    };
    let feedback = oracles.assertions[index].clone();
    let error = verdict.describe();
    let b = bindings([
        ("task_description", task.description.clone()),
        ("buggy_code", buggy_source.trim_end().to_string()),
        ("failing_assertion", feedback.source_text.clone()),
        ("error_message", error.clone()),
        ("function_name", task.function_name.clone()),
    ]);
    let exchange = agents.ask(TemplateId::SelfDebugFeedback, &b, self_debug_tag(task, variant_index))?;
    let (repaired, fallback) = match extract_code_block(&exchange.reply_text) {
        Ok(code) if defines(&code, &task.function_name) => (code, None),
        _ => (buggy_source.to_string(), Some(SelfDebugFallback::NoCodeInReply)),
    };
    let pass = hidden_pass(executor, task, hidden, &repaired, limits)?;
    Ok((
        SelfDebugRecord {
            task_id: task.task_id.clone(),
            variant_index,
            feedback_assertion: Some(feedback),
            feedback_error: Some(error),
            feedback_oracle_correct: record.map(|r| r.per_assertion_correct[index]),
            repaired_source: repaired,
            hidden_pass: pass,
            fallback,
        },
        Some(exchange),
    ))
}

pub fn self_debug_rate(records: &[SelfDebugRecord]) -> Option<Percentage> {
    let pass = records.iter().filter(|r| r.hidden_pass).count() as u64;
    (!records.is_empty()).then(|| Percentage::new(pass, records.len() as u64))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskMetrics {
    pub task_id: String,
    pub n_assertions: usize,
    pub n_correct: usize,
    pub task_correct: bool,
}

/// Machine-readable accuracy report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MetricsReport {
    pub suite: String,
    pub mode: String,
    pub task_level_pct: Percentage,
    pub test_level_pct: Percentage,
    pub per_task: Vec<TaskMetrics>,
    /// Tasks that could not be scored, with the reason.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn new(
        suite: impl Into<String>,
        mode: impl Into<String>,
        records: &[AccuracyRecord],
        skipped: Vec<(String, String)>,
    ) -> Result<Self, EvalError> {
        let summary = aggregate(records)?;
        Ok(Self {
            suite: suite.into(),
            mode: mode.into(),
            task_level_pct: summary.task_level_pct,
            test_level_pct: summary.test_level_pct,
            per_task: records
                .iter()
                .map(|r| TaskMetrics {
                    task_id: r.task_id.clone(),
                    n_assertions: r.per_assertion_correct.len(),
                    n_correct: r.correct_count(),
                    task_correct: r.task_correct,
                })
                .collect(),
            skipped,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self
            .per_task
            .iter()
            .map(|t| t.task_id.chars().count())
            .chain([4])
            .max()
            .unwrap_or(4);
        let mut out = format!("suite: {}  mode: {}\n", self.suite, self.mode);
        out.push_str(&format!(
            "{:<width$}  {:>7}  {:>7}  {:>8}\n",
            "task", "correct", "total", "all_pass"
        ));
        for t in &self.per_task {
            out.push_str(&format!(
                "{:<width$}  {:>7}  {:>7}  {:>8}\n",
                t.task_id,
                t.n_correct,
                t.n_assertions,
                if t.task_correct { "yes" } else { "no" }
            ));
        }
        for (id, why) in &self.skipped {
            out.push_str(&format!("{id:<width$}  skipped: {why}\n"));
        }
        out.push_str(&format!(
            "task-level accuracy: {:>6}%\n",
            self.task_level_pct.to_string()
        ));
        out.push_str(&format!(
            "test-level accuracy: {:>6}%\n",
            self.test_level_pct.to_string()
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_up_rounding() {
        assert_eq!(Percentage::new(2, 3).to_string(), "66.67");
        assert_eq!(Percentage::new(1, 3).to_string(), "33.33");
        assert_eq!(Percentage::new(1, 8).to_string(), "12.50");
        // 1/1600 = 0.0625% -> 0.06; 1/800 = 0.125% -> 0.13 (tie rounds up)
        assert_eq!(Percentage::new(1, 1600).to_string(), "0.06");
        assert_eq!(Percentage::new(1, 800).to_string(), "0.13");
        assert_eq!(Percentage::new(5, 5).to_string(), "100.00");
        assert_eq!(Percentage::new(0, 7).to_string(), "0.00");
    }

    #[test]
    fn serialized_as_rounded_number() {
        assert_eq!(serde_json::to_string(&Percentage::new(2, 3)).unwrap(), "66.67");
    }

    fn rec(id: &str, flags: &[bool]) -> AccuracyRecord {
        AccuracyRecord::from_flags(id, flags.to_vec())
    }

    #[test]
    fn aggregate_single_all_correct() {
        let m = aggregate(&[rec("a", &[true; 20])]).unwrap();
        assert_eq!(m.task_level_pct.to_string(), "100.00");
        assert_eq!(m.test_level_pct.to_string(), "100.00");
    }

    #[test]
    fn aggregate_one_wrong() {
        let mut flags = [true; 20];
        flags[4] = false;
        let r = rec("a", &flags);
        assert!(!r.task_correct);
        assert_eq!(r.correct_count(), 19);
        let m = aggregate(&[r]).unwrap();
        assert_eq!(m.test_level_pct.to_string(), "95.00");
        assert_eq!(m.task_level_pct.to_string(), "0.00");
    }

    #[test]
    fn aggregate_empty() {
        assert!(matches!(aggregate(&[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn correct_subset_idempotent() {
        let lines: Vec<String> = (0..4).map(|i| format!("assert f({i}) == {i}")).collect();
        let set = OracleSet::from_lines("t", &lines, crate::prompt::Origin::Curator);
        let r = rec("t", &[true, false, true, false]);
        let once = correct_subset(&set, &r);
        let as_set = OracleSet {
            task_id: "t".into(),
            assertions: once.clone(),
        };
        let twice = correct_subset(&as_set, &rec("t", &[true; 2]));
        assert_eq!(once, twice);
        assert_eq!(once.iter().map(|a| a.input_index).collect::<Vec<_>>(), [0, 2]);
    }

    #[test]
    fn detection_rate_counts_included_only() {
        let hit = BugDetectionRecord {
            task_id: "a".into(),
            variant_index: 0,
            detected: true,
            triggering_indices: vec![1],
        };
        let miss = BugDetectionRecord {
            detected: false,
            triggering_indices: vec![],
            variant_index: 1,
            ..hit.clone()
        };
        let reports = [
            BugDetectionReport {
                task_id: "a".into(),
                records: vec![hit, miss],
                excluded_variants: 0,
                diagnostics: vec![],
            },
            BugDetectionReport {
                task_id: "b".into(),
                records: vec![],
                excluded_variants: 3,
                diagnostics: vec!["excluded".into()],
            },
        ];
        assert_eq!(detection_rate(&reports).unwrap().to_string(), "50.00");
        assert_eq!(detection_rate(&reports[1..]), None);
    }

    #[test]
    fn table_layout() {
        let report = MetricsReport::new(
            "s",
            "full",
            &[rec("a", &[true, true]), rec("bb", &[true, false])],
            vec![],
        )
        .unwrap();
        let table = report.to_table();
        assert!(table.contains("task-level accuracy:  50.00%"));
        assert!(table.contains("test-level accuracy:  75.00%"));
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["task_level_pct"], 50.0);
        assert_eq!(json["per_task"][1]["n_correct"], 1);
        for key in ["suite", "mode", "task_level_pct", "test_level_pct", "per_task"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
