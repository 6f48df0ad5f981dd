//! Wire protocol between the orchestrator and the in-interpreter runner.
//!
//! Request (stdin, one object, then EOF):
//! `{"candidate_code": str, "function_name": str, "assertions": [str], "timeout_ms": int}`
//!
//! Response (stdout, JSON Lines): one verdict object per assertion in index
//! order, then `{"summary": {"executed": int, "candidate_loaded": bool, "load_error": str|null}}`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerJob {
    pub candidate_code: String,
    pub function_name: String,
    pub assertions: Vec<String>,
    pub timeout_ms: u64,
}

impl RunnerJob {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("job serializes")
    }
}

/// Statuses a runner may emit. Timeouts, unexecuted and candidate errors are
/// synthesized by the orchestrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunnerStatus {
    Pass,
    AssertionFailed,
    RuntimeError,
    ParseError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictLine {
    pub index: usize,
    pub status: RunnerStatus,
    pub error_type: Option<String>,
    pub error_message: Option<String>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryLine {
    pub executed: usize,
    pub candidate_loaded: bool,
    pub load_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunnerLine {
    Verdict(VerdictLine),
    Summary(SummaryLine),
}

#[derive(Deserialize)]
struct SummaryEnvelope {
    summary: SummaryLine,
}

/// Decode one stdout line of runner output.
pub fn parse_runner_line(line: &str) -> Result<RunnerLine, String> {
    let value: serde_json::Value = serde_json::from_str(line.trim_end()).map_err(|e| format!("not JSON: {e}"))?;
    if value.get("summary").is_some() {
        let env: SummaryEnvelope = serde_json::from_value(value).map_err(|e| format!("bad summary line: {e}"))?;
        return Ok(RunnerLine::Summary(env.summary));
    }
    let verdict: VerdictLine = serde_json::from_value(value).map_err(|e| format!("bad verdict line: {e}"))?;
    if !verdict.elapsed_ms.is_finite() || verdict.elapsed_ms < 0.0 {
        return Err(format!("bad elapsed_ms {}", verdict.elapsed_ms));
    }
    Ok(RunnerLine::Verdict(verdict))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_field_order_is_fixed() {
        let job = RunnerJob {
            candidate_code: "def f(): pass".into(),
            function_name: "f".into(),
            assertions: vec!["assert f() is None".into()],
            timeout_ms: 5000,
        };
        assert_eq!(
            job.to_json(),
            r#"{"candidate_code":"def f(): pass","function_name":"f","assertions":["assert f() is None"],"timeout_ms":5000}"#
        );
    }

    #[test]
    fn verdict_and_summary_lines() {
        let v = parse_runner_line(
            r#"{"index": 0, "status": "runtime_error", "error_type": "TypeError", "error_message": "x", "elapsed_ms": 0.4}"#,
        )
        .unwrap();
        match v {
            RunnerLine::Verdict(v) => {
                assert_eq!(v.status, RunnerStatus::RuntimeError);
                assert_eq!(v.error_type.as_deref(), Some("TypeError"));
            }
            other => panic!("{other:?}"),
        }
        let s = parse_runner_line(
            r#"{"summary": {"executed": 0, "candidate_loaded": false, "load_error": "SyntaxError"}}"#,
        )
        .unwrap();
        assert!(matches!(
            s,
            RunnerLine::Summary(SummaryLine {
                candidate_loaded: false,
                ..
            })
        ));
    }

    #[test]
    fn synthesized_statuses_are_rejected_from_runner() {
        assert!(parse_runner_line(
            r#"{"index": 0, "status": "timeout", "error_type": null, "error_message": null, "elapsed_ms": 1}"#
        )
        .is_err());
        assert!(parse_runner_line("garbage").is_err());
        assert!(parse_runner_line(
            r#"{"index": 0, "status": "pass", "error_type": null, "error_message": null, "elapsed_ms": -1}"#
        )
        .is_err());
    }
}
