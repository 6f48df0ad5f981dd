//! Run configuration and the per-task pipeline for each mode.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::AgentContext;
use crate::deliberation::{deliberate, generate_tentative, DeliberationOptions, DeliberationResult};
use crate::error::{Aborted, PipelineError};
use crate::gateway::{ChatExchange, ModelSettings};
use crate::prompt::{Diagnostic, OracleSet};
use crate::refinement::{run_refinement_loop, RefinementTrace, DEFAULT_MAX_ITERATIONS, MAX_ITERATIONS_LIMIT};
use crate::sandbox::{
    generate_candidate, validate, CandidateCode, ExecLimits, Executor, RunnerCommand, ValidationReport,
};
use crate::task::Task;

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
/// Provider calls allowed per task before a run is cut off.
pub const CALLS_PER_TASK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Direct,
    PlanningOnly,
    RefinementOnly,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Direct, Mode::PlanningOnly, Mode::RefinementOnly, Mode::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Direct => "direct",
            Mode::PlanningOnly => "planning_only",
            Mode::RefinementOnly => "refinement_only",
            Mode::Full => "full",
        }
    }

    pub fn deliberates(self) -> bool {
        matches!(self, Mode::PlanningOnly | Mode::Full)
    }

    /// Candidate generation, validation and refinement.
    pub fn refines(self) -> bool {
        matches!(self, Mode::RefinementOnly | Mode::Full)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.replace('-', "_");
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| format!("unknown mode {s:?} (expected direct, planning_only, refinement_only or full)"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub model: ModelSettings,
    /// Scripted transcript; required when the provider is `script`.
    pub script_path: Option<PathBuf>,
    pub base_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub suite_path: PathBuf,
    pub mode: Mode,
    pub provider: ProviderConfig,
    pub max_refinement_iterations: u32,
    pub limits: ExecLimits,
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
    /// Runner program followed by its arguments.
    pub runner: Vec<String>,
    pub allow_degraded_panel: bool,
    /// Defaults to `CALLS_PER_TASK` times the task count.
    pub call_budget: Option<usize>,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(suite_path: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, mode: Mode) -> Self {
        Self {
            suite_path: suite_path.into(),
            mode,
            provider: ProviderConfig::default(),
            max_refinement_iterations: if mode.refines() { DEFAULT_MAX_ITERATIONS } else { 0 },
            limits: ExecLimits::default(),
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            cache_dir: None,
            runner: vec!["python3".into(), "-I".into(), "runner.py".into()],
            allow_degraded_panel: false,
            call_budget: None,
            out_dir: out_dir.into(),
        }
    }

    pub fn runner_command(&self) -> Result<RunnerCommand, String> {
        let (program, args) = self.runner.split_first().ok_or("runner command is empty")?;
        Ok(RunnerCommand::new(program.clone(), args.iter().cloned()))
    }

    /// Hard errors, or warnings for settings the mode will not use.
    pub fn check(&self) -> Result<Vec<String>, String> {
        if self.max_refinement_iterations > MAX_ITERATIONS_LIMIT {
            return Err(format!(
                "max refinement iterations {} outside 0..={MAX_ITERATIONS_LIMIT}",
                self.max_refinement_iterations
            ));
        }
        self.limits.check().map_err(|e| e.to_string())?;
        if self.workers == 0 {
            return Err("worker bound must be at least 1".into());
        }
        self.runner_command()?;
        if self.provider.model.provider_id == "script" && self.provider.script_path.is_none() {
            return Err("provider `script` needs a script file".into());
        }
        let mut warnings = Vec::new();
        if !self.mode.refines() && self.max_refinement_iterations > 0 {
            warnings.push(format!(
                "mode {} does not refine; {} refinement iteration(s) will not be applied",
                self.mode, self.max_refinement_iterations
            ));
        }
        Ok(warnings)
    }

    pub fn task_settings(&self) -> TaskSettings {
        TaskSettings {
            mode: self.mode,
            max_refinement_iterations: if self.mode.refines() {
                self.max_refinement_iterations
            } else {
                0
            },
            limits: self.limits.clone(),
            deliberation: DeliberationOptions {
                allow_degraded_panel: self.allow_degraded_panel,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSettings {
    pub mode: Mode,
    pub max_refinement_iterations: u32,
    pub limits: ExecLimits,
    pub deliberation: DeliberationOptions,
}

/// Where an exchange's full text lives in the record, plus its bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeRef {
    pub tag: String,
    pub key: String,
    pub latency_ms: u64,
    pub cache_hit: bool,
    pub attempt_count: u32,
}

impl From<&ChatExchange> for ExchangeRef {
    fn from(e: &ChatExchange) -> Self {
        Self {
            tag: e.request.request_tag.clone(),
            key: e.key(),
            latency_ms: e.latency_ms,
            cache_hit: e.cache_hit,
            attempt_count: e.attempt_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Completed,
    Failed,
}

pub const FLAG_CANDIDATE_UNAVAILABLE: &str = "candidate_unavailable";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: Task,
    pub mode: Mode,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Tentative set when the mode skips deliberation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tentative: Option<OracleSet>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tentative_diagnostics: Vec<Diagnostic>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deliberation: Option<DeliberationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<CandidateCode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_report: Option<ValidationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<RefinementTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_oracles: Option<OracleSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_report: Option<ValidationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    pub exchanges: Vec<ExchangeRef>,
    pub elapsed_ms: u64,
}

impl TaskRecord {
    fn empty(task: &Task, mode: Mode) -> Self {
        Self {
            task: task.clone(),
            mode,
            status: TaskStatus::Failed,
            error: None,
            tentative: None,
            tentative_diagnostics: Vec::new(),
            deliberation: None,
            candidate: None,
            candidate_notes: Vec::new(),
            initial_report: None,
            refinement: None,
            final_oracles: None,
            final_report: None,
            flags: Vec::new(),
            exchanges: Vec::new(),
            elapsed_ms: 0,
        }
    }

    pub fn is_completed(&self) -> bool {
        self.status == TaskStatus::Completed
    }

    /// Exchanges made during deliberation (or the tentative call alone).
    pub fn phase_one_exchanges(&self) -> usize {
        self.exchanges
            .iter()
            .filter(|e| !e.tag.starts_with("candidate_code") && !e.tag.starts_with("refinement:"))
            .count()
    }
}

pub struct TaskRun {
    pub record: TaskRecord,
    pub exchanges: Vec<ChatExchange>,
    pub error: Option<PipelineError>,
}

/// Execute every phase the mode calls for on one task. Hard failures are
/// reported in `error`; the record then holds whatever finished before.
pub fn run_task(agents: &AgentContext<'_>, executor: &dyn Executor, task: &Task, settings: &TaskSettings) -> TaskRun {
    let started = Instant::now();
    let mut record = TaskRecord::empty(task, settings.mode);
    let mut exchanges = Vec::new();
    let result = run_phases(agents, executor, task, settings, &mut record, &mut exchanges);
    record.exchanges = exchanges.iter().map(ExchangeRef::from).collect();
    record.elapsed_ms = u64::try_from(started.elapsed().as_millis()).unwrap_or(u64::MAX);
    let error = match result {
        Ok(()) => {
            record.status = TaskStatus::Completed;
            None
        }
        Err(e) => {
            record.status = TaskStatus::Failed;
            record.error = Some(e.to_string());
            Some(e)
        }
    };
    TaskRun {
        record,
        exchanges,
        error,
    }
}

fn run_phases(
    agents: &AgentContext<'_>,
    executor: &dyn Executor,
    task: &Task,
    settings: &TaskSettings,
    record: &mut TaskRecord,
    exchanges: &mut Vec<ChatExchange>,
) -> Result<(), PipelineError> {
    let absorb = |exchanges: &mut Vec<ChatExchange>, aborted: Aborted| {
        exchanges.extend(aborted.exchanges);
        aborted.error
    };

    let candidate_oracles = if settings.mode.deliberates() {
        let mut result = deliberate(agents, task, settings.deliberation).map_err(|a| absorb(exchanges, a))?;
        exchanges.append(&mut result.exchanges);
        let candidate = result.candidate.clone();
        record.deliberation = Some(result);
        candidate
    } else {
        let t = generate_tentative(agents, task)?;
        exchanges.push(t.exchange);
        record.tentative = Some(t.set.clone());
        record.tentative_diagnostics = t.diagnostics;
        t.set
    };

    if !settings.mode.refines() {
        record.final_oracles = Some(candidate_oracles);
        return Ok(());
    }

    let outcome = generate_candidate(agents, task)?;
    exchanges.extend(outcome.exchanges);
    record.candidate_notes = outcome.notes;
    let Some(candidate) = outcome.candidate else {
        record.flags.push(FLAG_CANDIDATE_UNAVAILABLE.into());
        record.final_oracles = Some(candidate_oracles);
        return Ok(());
    };
    let initial = validate(executor, &candidate, &candidate_oracles, &settings.limits)?;
    if initial.candidate_failed() {
        record.flags.push(FLAG_CANDIDATE_UNAVAILABLE.into());
    }
    let refined = run_refinement_loop(
        agents,
        executor,
        task,
        Some(&candidate),
        candidate_oracles,
        Some(&initial),
        &settings.limits,
        settings.max_refinement_iterations,
    )
    .map_err(|a| absorb(exchanges, a))?;
    exchanges.extend(refined.exchanges);
    record.candidate = Some(candidate);
    record.initial_report = Some(initial);
    record.refinement = Some(refined.trace);
    record.final_oracles = Some(refined.oracles);
    record.final_report = refined.report;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("planning-only".parse::<Mode>().unwrap(), Mode::PlanningOnly);
        assert!("fast".parse::<Mode>().is_err());
    }

    #[test]
    fn refinement_defaults_follow_mode() {
        assert_eq!(RunConfig::new("s", "o", Mode::Full).max_refinement_iterations, 5);
        assert_eq!(RunConfig::new("s", "o", Mode::Direct).max_refinement_iterations, 0);
    }

    #[test]
    fn direct_mode_warns_about_refinement() {
        let mut c = RunConfig::new("s", "o", Mode::Direct);
        c.provider.script_path = Some("x.json".into());
        assert!(c.check().unwrap().is_empty());
        c.max_refinement_iterations = 3;
        let w = c.check().unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("direct"));
        assert_eq!(c.task_settings().max_refinement_iterations, 0);
    }

    #[test]
    fn config_errors() {
        let mut c = RunConfig::new("s", "o", Mode::Full);
        assert!(c.check().unwrap_err().contains("script"));
        c.provider.script_path = Some("x.json".into());
        c.max_refinement_iterations = 11;
        assert!(c.check().is_err());
        c.max_refinement_iterations = 10;
        c.workers = 0;
        assert!(c.check().is_err());
        c.workers = 1;
        c.runner.clear();
        assert!(c.check().is_err());
    }

    #[test]
    fn out_dir_not_serialized() {
        let c = RunConfig::new("s", "/tmp/somewhere", Mode::Full);
        let json = serde_json::to_string(&c).unwrap();
        assert!(!json.contains("somewhere"));
    }
}
