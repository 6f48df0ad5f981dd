//! Command implementations shared by the CLI and the end-to-end tests.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::Serialize;

use crate::agent::AgentContext;
use crate::error::PipelineError;
use crate::evaluation::{
    bug_detection, detection_rate, score_oracles, self_debug, self_debug_rate, AccuracyRecord, BugDetectionReport,
    EvalError, MetricsReport, Percentage, SelfDebugRecord,
};
use crate::gateway::{
    Gateway, GatewayError, LiveProvider, OfflineProvider, Provider, ProviderScript, ResponseCache, ScriptedProvider,
};
use crate::pipeline::{
    run_task, ProviderConfig, RunConfig, TaskRecord, TaskSettings, CALLS_PER_TASK, DEFAULT_BASE_URL,
};
use crate::prompt::TemplateSet;
use crate::sandbox::{Executor, RunnerCommand, Sandbox};
use crate::store::{compare_records, RecordError, RecordHeader, RunStore};
use crate::task::{Task, TaskSuite};

pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const PARTIAL: i32 = 3;
    pub const PROVIDER: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("provider error: {0}")]
    Provider(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) | CommandError::Record(_) => exit::CONFIG,
            CommandError::Provider(_) => exit::PROVIDER,
            CommandError::Eval(_) => exit::PARTIAL,
        }
    }
}

/// What a command produced and how the process should exit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub path: PathBuf,
    pub exit_code: i32,
    pub messages: Vec<String>,
    pub provider_calls: usize,
}

pub fn build_provider(config: &ProviderConfig) -> Result<Arc<dyn Provider>, CommandError> {
    if let Some(path) = &config.script_path {
        let script = ProviderScript::load(path).map_err(CommandError::Config)?;
        return Ok(Arc::new(ScriptedProvider::new(script)));
    }
    if config.model.provider_id == "script" {
        return Err(CommandError::Config("provider `script` needs --script".into()));
    }
    let base = config.base_url.clone().unwrap_or_else(|| DEFAULT_BASE_URL.into());
    let live = LiveProvider::from_env(base).map_err(CommandError::Config)?;
    Ok(Arc::new(live))
}

fn open_cache(dir: &Path) -> Result<ResponseCache, CommandError> {
    ResponseCache::new(dir).map_err(|e| CommandError::Config(format!("cache dir {}: {e}", dir.display())))
}

fn load_suite(path: &Path) -> Result<TaskSuite, CommandError> {
    TaskSuite::load(path).map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))
}

fn is_stop_error(e: &PipelineError) -> bool {
    e.is_provider_exhaustion() || matches!(e, PipelineError::Gateway(GatewayError::CacheMiss { .. }))
}

struct TaskResult {
    task_id: String,
    completed: bool,
    stop: bool,
    message: Option<String>,
}

/// Run tasks on a bounded pool, persisting each finished task. Scheduling
/// stops after the first provider exhaustion.
fn execute_tasks(
    store: &RunStore,
    tasks: &[Task],
    agents: &AgentContext<'_>,
    executor: &dyn Executor,
    settings: &TaskSettings,
    workers: usize,
) -> Vec<TaskResult> {
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let results = Mutex::new(Vec::new());
    thread::scope(|s| {
        for _ in 0..workers.clamp(1, tasks.len().max(1)) {
            s.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = tasks.get(i) else { break };
                log::info!("{}: starting", task.task_id);
                let run = run_task(agents, executor, task, settings);
                let persisted = store
                    .write_exchanges(&run.exchanges)
                    .and_then(|_| store.write_task(&run.record));
                let halt = run.error.as_ref().is_some_and(is_stop_error);
                if halt {
                    stop.store(true, Ordering::SeqCst);
                }
                let message = match (&run.error, persisted) {
                    (_, Err(e)) => Some(format!("{}: cannot persist: {e}", task.task_id)),
                    (Some(e), Ok(())) => Some(format!("{}: {e}", task.task_id)),
                    (None, Ok(())) => None,
                };
                if let Some(m) = &message {
                    log::error!("{m}");
                } else {
                    log::info!("{}: completed", task.task_id);
                }
                results.lock().unwrap_or_else(|p| p.into_inner()).push(TaskResult {
                    task_id: task.task_id.clone(),
                    completed: message.is_none(),
                    stop: halt,
                    message,
                });
            });
        }
    });
    let mut results = results.into_inner().unwrap_or_else(|p| p.into_inner());
    let order = |id: &str| tasks.iter().position(|t| t.task_id == id);
    results.sort_by_key(|r| order(&r.task_id));
    results
}

fn summarize(results: &[TaskResult], expected: usize, mut messages: Vec<String>) -> (i32, Vec<String>) {
    let completed = results.iter().filter(|r| r.completed).count();
    messages.extend(results.iter().filter_map(|r| r.message.clone()));
    let code = if results.iter().any(|r| r.stop) {
        exit::PROVIDER
    } else if completed == expected {
        exit::OK
    } else {
        exit::PARTIAL
    };
    if expected > results.len() {
        messages.push(format!("{} task(s) not scheduled", expected - results.len()));
    }
    (code, messages)
}

/// Run the configured pipeline over the suite into `config.out_dir`.
pub fn cmd_generate(config: &RunConfig, resume: bool) -> Result<Outcome, CommandError> {
    let mut messages = config.check().map_err(CommandError::Config)?;
    let suite = load_suite(&config.suite_path)?;
    messages.extend(suite.warnings());
    let task_ids: Vec<String> = suite.tasks.iter().map(|t| t.task_id.clone()).collect();
    let root = config.out_dir.clone();

    let mut done = Vec::new();
    if resume && root.join("config.json").is_file() {
        let previous = RunStore::open(&root)?;
        let prev = &previous.header().config;
        if prev.mode != config.mode || prev.provider.model != config.provider.model {
            return Err(CommandError::Config(format!(
                "{} holds a {} run with different model settings; refusing to resume",
                root.display(),
                prev.mode
            )));
        }
        for r in previous.tasks()? {
            if r.is_completed() {
                done.push(r.task.task_id);
            }
        }
    }
    let store = RunStore::create(&root, RecordHeader::new(&suite.suite_id, task_ids, config.clone()))?;
    let pending: Vec<Task> = suite
        .tasks
        .iter()
        .filter(|t| !done.contains(&t.task_id))
        .cloned()
        .collect();
    if !done.is_empty() {
        messages.push(format!("resuming: {} completed task(s) skipped", done.len()));
    }

    let cache = match &config.cache_dir {
        Some(dir) => open_cache(dir)?,
        None => store.exchange_cache()?,
    };
    let budget = config.call_budget.unwrap_or(CALLS_PER_TASK * pending.len().max(1));
    let gateway = Gateway::new(build_provider(&config.provider)?)
        .with_cache(cache)
        .with_budget(budget);
    let templates = TemplateSet::builtin();
    let agents = AgentContext::new(&gateway, &config.provider.model, &templates);
    let sandbox = Sandbox::new(config.runner_command().map_err(CommandError::Config)?);

    let results = execute_tasks(
        &store,
        &pending,
        &agents,
        &sandbox,
        &config.task_settings(),
        config.workers,
    );
    let (exit_code, messages) = summarize(&results, pending.len(), messages);
    Ok(Outcome {
        path: root,
        exit_code,
        messages,
        provider_calls: gateway.provider_calls(),
    })
}

/// Re-run a record's pipeline from its stored exchanges only, then compare.
pub fn cmd_replay(record: &Path, out: Option<&Path>, runner: Option<RunnerCommand>) -> Result<Outcome, CommandError> {
    let source = RunStore::open(record)?;
    let header = source.header().clone();
    let mut tasks = Vec::new();
    for id in &header.task_ids {
        match source.read_task(id)? {
            Some(r) => tasks.push(r.task),
            None => {
                return Err(CommandError::Config(format!(
                    "record has no entry for task {id}; it is incomplete"
                )))
            }
        }
    }
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("{}.replay", record.display())));
    let mut config = header.config.clone();
    config.out_dir = out.clone();
    let store = RunStore::create(
        &out,
        RecordHeader::new(&header.suite_id, header.task_ids.clone(), config.clone()),
    )?;

    let gateway = Gateway::new(Arc::new(OfflineProvider)).with_cache(source.exchange_cache()?);
    let templates = TemplateSet::builtin();
    let agents = AgentContext::new(&gateway, &config.provider.model, &templates);
    let runner = match runner {
        Some(r) => r,
        None => config.runner_command().map_err(CommandError::Config)?,
    };
    let sandbox = Sandbox::new(runner);
    let results = execute_tasks(
        &store,
        &tasks,
        &agents,
        &sandbox,
        &config.task_settings(),
        config.workers,
    );
    let (mut exit_code, mut messages) = summarize(&results, tasks.len(), Vec::new());
    if exit_code == exit::OK {
        let diffs = compare_records(record, &out)?;
        if !diffs.is_empty() {
            exit_code = exit::PARTIAL;
            messages.extend(diffs);
        }
    }
    Ok(Outcome {
        path: out,
        exit_code,
        messages,
        provider_calls: gateway.provider_calls(),
    })
}

/// Records to score: completed tasks with final oracles, with the suite's
/// copy of each task when a suite is given.
/// Task id and reason for each record left out of scoring.
type Skipped = Vec<(String, String)>;

fn scoring_inputs(
    store: &RunStore,
    suite: Option<&TaskSuite>,
) -> Result<(Vec<(Task, TaskRecord)>, Skipped), CommandError> {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for r in store.tasks()? {
        let id = r.task.task_id.clone();
        if !r.is_completed() || r.final_oracles.is_none() {
            skipped.push((id, "task did not complete".into()));
            continue;
        }
        let task = match suite {
            Some(s) => match s.get(&id) {
                Some(t) => t.clone(),
                None => {
                    skipped.push((id, "task not in suite".into()));
                    continue;
                }
            },
            None => r.task.clone(),
        };
        out.push((task, r));
    }
    Ok((out, skipped))
}

struct EvalContext {
    store: RunStore,
    suite: Option<TaskSuite>,
    sandbox: Sandbox,
}

fn eval_context(
    record: &Path,
    suite: Option<&Path>,
    runner: Option<RunnerCommand>,
) -> Result<EvalContext, CommandError> {
    let store = RunStore::open(record)?;
    let suite = suite.map(load_suite).transpose()?;
    let runner = match runner {
        Some(r) => r,
        None => store.header().config.runner_command().map_err(CommandError::Config)?,
    };
    Ok(EvalContext {
        store,
        suite,
        sandbox: Sandbox::new(runner),
    })
}

type Scored = (Task, TaskRecord, AccuracyRecord);

fn score_all(ctx: &EvalContext) -> Result<(Vec<Scored>, Skipped), CommandError> {
    let limits = &ctx.store.header().config.limits;
    let (inputs, mut skipped) = scoring_inputs(&ctx.store, ctx.suite.as_ref())?;
    let mut scored = Vec::new();
    for (task, record) in inputs {
        let oracles = record.final_oracles.as_ref().expect("filtered above");
        match score_oracles(&ctx.sandbox, oracles, &task, limits) {
            Ok(acc) => scored.push((task, record, acc)),
            Err(EvalError::MissingCanonical(id)) => skipped.push((id, "no canonical solution".into())),
            Err(e) => return Err(e.into()),
        }
    }
    Ok((scored, skipped))
}

/// Score final oracle sets; writes `metrics.json` and `metrics.txt`.
pub fn cmd_evaluate(
    record: &Path,
    suite: Option<&Path>,
    runner: Option<RunnerCommand>,
) -> Result<Outcome, CommandError> {
    let ctx = eval_context(record, suite, runner)?;
    let (scored, skipped) = score_all(&ctx)?;
    let header = ctx.store.header();
    let records: Vec<AccuracyRecord> = scored.into_iter().map(|(_, _, a)| a).collect();
    let messages: Vec<String> = skipped
        .iter()
        .map(|(id, why)| format!("{id}: skipped ({why})"))
        .collect();
    let report = MetricsReport::new(&header.suite_id, header.config.mode.as_str(), &records, skipped)?;
    ctx.store.write_report("metrics.txt", &report.to_table())?;
    let path = ctx.store.write_report("metrics.json", &report.to_json())?;
    Ok(Outcome {
        path,
        exit_code: if messages.is_empty() { exit::OK } else { exit::PARTIAL },
        messages,
        provider_calls: 0,
    })
}

#[derive(Debug, Serialize)]
struct BugDetectionFile {
    suite: String,
    mode: String,
    detection_rate_pct: Option<Percentage>,
    n_detected: usize,
    n_included: usize,
    n_excluded: usize,
    per_task: Vec<BugDetectionReport>,
}

/// Run verified-correct oracles against buggy variants; writes `bug_detection.json`.
pub fn cmd_bug_detect(
    record: &Path,
    suite: Option<&Path>,
    runner: Option<RunnerCommand>,
) -> Result<Outcome, CommandError> {
    let ctx = eval_context(record, suite, runner)?;
    let limits = &ctx.store.header().config.limits;
    let (scored, _) = score_all(&ctx)?;
    let mut reports = Vec::new();
    let mut messages = Vec::new();
    for (task, record, acc) in &scored {
        if task.buggy_variants.as_ref().is_none_or(|v| v.is_empty()) {
            continue;
        }
        let oracles = record.final_oracles.as_ref().expect("scored records have oracles");
        let report = bug_detection(&ctx.sandbox, oracles, acc, task, limits)?;
        messages.extend(report.diagnostics.iter().map(|d| format!("{}: {d}", task.task_id)));
        reports.push(report);
    }
    if reports.is_empty() {
        return Err(EvalError::NoBuggyVariants("any scored task".into()).into());
    }
    let included: Vec<_> = reports.iter().flat_map(|r| &r.records).collect();
    let header = ctx.store.header();
    let file = BugDetectionFile {
        suite: header.suite_id.clone(),
        mode: header.config.mode.to_string(),
        detection_rate_pct: detection_rate(&reports),
        n_detected: included.iter().filter(|r| r.detected).count(),
        n_included: included.len(),
        n_excluded: reports.iter().map(|r| r.excluded_variants).sum(),
        per_task: reports,
    };
    let path = ctx.store.write_report(
        "bug_detection.json",
        &serde_json::to_string_pretty(&file).expect("serializes"),
    )?;
    Ok(Outcome {
        path,
        exit_code: exit::OK,
        messages,
        provider_calls: 0,
    })
}

#[derive(Debug, Serialize)]
struct SelfDebugFile {
    suite: String,
    mode: String,
    hidden_pass_pct: Option<Percentage>,
    n_programs: usize,
    records: Vec<SelfDebugRecord>,
}

/// One repair round per buggy variant, judged by hidden tests; writes
/// `self_debug.json`. Exchanges are stored alongside the record's own.
pub fn cmd_self_debug(
    record: &Path,
    suite: Option<&Path>,
    provider: Option<&ProviderConfig>,
    runner: Option<RunnerCommand>,
) -> Result<Outcome, CommandError> {
    let ctx = eval_context(record, suite, runner)?;
    let header = ctx.store.header().clone();
    let provider = provider.unwrap_or(&header.config.provider);
    let gateway = Gateway::new(build_provider(provider)?).with_cache(ctx.store.exchange_cache()?);
    let templates = TemplateSet::builtin();
    let agents = AgentContext::new(&gateway, &provider.model, &templates);
    let limits = &header.config.limits;

    let (scored, _) = score_all(&ctx)?;
    let mut records = Vec::new();
    let mut messages = Vec::new();
    for (task, record, acc) in &scored {
        let (Some(variants), Some(_)) = (&task.buggy_variants, &task.hidden_tests) else {
            continue;
        };
        let oracles = record.final_oracles.as_ref().expect("scored records have oracles");
        for (i, buggy) in variants.iter().enumerate() {
            match self_debug(&agents, &ctx.sandbox, task, i, buggy, oracles, Some(acc), limits) {
                Ok((r, _)) => {
                    if let Some(f) = r.fallback {
                        messages.push(format!(
                            "{} variant {i}: {}",
                            task.task_id,
                            serde_json::to_string(&f).unwrap_or_default()
                        ));
                    }
                    records.push(r);
                }
                Err(EvalError::Pipeline(e)) => {
                    return Err(CommandError::Provider(format!("{} variant {i}: {e}", task.task_id)))
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    let file = SelfDebugFile {
        suite: header.suite_id.clone(),
        mode: header.config.mode.to_string(),
        hidden_pass_pct: self_debug_rate(&records),
        n_programs: records.len(),
        records,
    };
    let path = ctx.store.write_report(
        "self_debug.json",
        &serde_json::to_string_pretty(&file).expect("serializes"),
    )?;
    Ok(Outcome {
        path,
        exit_code: exit::OK,
        messages,
        provider_calls: gateway.provider_calls(),
    })
}
