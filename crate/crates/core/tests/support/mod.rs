#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use oracle_forge::sandbox::{ExecJob, ExecLimits, Executor, RunnerCommand, Sandbox, SandboxError, Status, Verdict};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn stub_runner() -> RunnerCommand {
    RunnerCommand::python_script(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/support/stub_runner.py"))
}

pub fn stub_sandbox() -> Sandbox {
    Sandbox::new(stub_runner())
}

pub fn sh_runner(script: &str) -> Sandbox {
    Sandbox::new(RunnerCommand::new("sh", ["-c", script]))
}

/// Deterministic executor: an assertion passes when its text is listed for
/// the candidate source, otherwise it fails with `AssertionError`.
#[derive(Default)]
pub struct TableExecutor {
    pub passing: BTreeMap<String, BTreeSet<String>>,
}

impl TableExecutor {
    pub fn allow(&mut self, source: &str, assertion: &str) {
        self.passing
            .entry(source.to_string())
            .or_default()
            .insert(assertion.to_string());
    }
}

impl Executor for TableExecutor {
    fn execute(&self, job: &ExecJob<'_>, _limits: &ExecLimits) -> Result<Vec<Verdict>, SandboxError> {
        let ok = self.passing.get(job.candidate_code);
        Ok(job
            .assertions
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let pass = ok.is_some_and(|s| s.contains(a));
                Verdict {
                    input_index: i,
                    status: if pass { Status::Pass } else { Status::AssertionFailed },
                    error_type: (!pass).then(|| "AssertionError".to_string()),
                    error_message: (!pass).then(|| format!("table says no: {a}")),
                    elapsed_ms: 0.0,
                }
            })
            .collect())
    }
}
