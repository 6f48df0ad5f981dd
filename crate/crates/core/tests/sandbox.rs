mod support;

use std::collections::BTreeMap;
use std::time::Instant;

use oracle_forge::sandbox::{run_oracles, ExecLimits, RunnerCommand, Sandbox, SandboxError, Status};
use serde::Deserialize;
use support::{fixture, sh_runner, stub_sandbox};

#[derive(Deserialize)]
struct Pair {
    name: String,
    candidate_code: String,
    function_name: String,
    assertion: String,
    status: Status,
    error_type: Option<String>,
    #[serde(default)]
    timeout_ms: Option<u64>,
}

impl Pair {
    fn limits(&self) -> ExecLimits {
        let mut l = ExecLimits::default();
        if let Some(t) = self.timeout_ms {
            l.timeout_ms = t;
        }
        l
    }
}

#[derive(Deserialize)]
struct Matrix {
    pairs: Vec<Pair>,
}

fn matrix() -> Vec<Pair> {
    let text = std::fs::read_to_string(fixture("verdict_matrix.json")).unwrap();
    serde_json::from_str::<Matrix>(&text).unwrap().pairs
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn verdict_matrix_single_assertions() {
    let sandbox = stub_sandbox();
    let pairs = matrix();
    assert!(pairs.len() >= 12);
    for p in &pairs {
        let started = Instant::now();
        let v = run_oracles(
            &sandbox,
            &p.candidate_code,
            &p.function_name,
            std::slice::from_ref(&p.assertion),
            &p.limits(),
        )
        .unwrap_or_else(|e| panic!("{}: {e}", p.name));
        if p.status == Status::Timeout {
            assert!(started.elapsed().as_millis() < 4000, "{}", p.name);
        }
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].status, p.status, "{}: {:?}", p.name, v[0]);
        assert_eq!(v[0].error_type, p.error_type, "{}", p.name);
        assert!(v[0].elapsed_ms >= 0.0);
    }
}

#[test]
fn verdict_matrix_batched_by_candidate() {
    let sandbox = stub_sandbox();
    let mut groups: BTreeMap<(&str, &str), Vec<&Pair>> = BTreeMap::new();
    let pairs = matrix();
    for p in &pairs {
        groups
            .entry((p.candidate_code.as_str(), p.function_name.as_str()))
            .or_default()
            .push(p);
    }
    for ((code, name), group) in groups {
        let assertions: Vec<String> = group.iter().map(|p| p.assertion.clone()).collect();
        let limits = group[0].limits();
        let verdicts = run_oracles(&sandbox, code, name, &assertions, &limits).unwrap();
        let got: Vec<Status> = verdicts.iter().map(|v| v.status).collect();
        let want: Vec<Status> = group.iter().map(|p| p.status).collect();
        assert_eq!(got, want, "{name}");
        for (i, v) in verdicts.iter().enumerate() {
            assert_eq!(v.input_index, i);
        }
    }
}

#[test]
fn assertion_message_reports_actual_value() {
    let v = run_oracles(
        &stub_sandbox(),
        "def add(a, b):\n    return a + b\n",
        "add",
        &strs(&["assert add(1, 2) == 4"]),
        &ExecLimits::default(),
    )
    .unwrap();
    assert_eq!(v[0].error_message.as_deref(), Some("expected 4, got 3"));
    assert_eq!(v[0].describe(), "AssertionError: expected 4, got 3");
}

#[test]
fn hanging_assertion_times_out_and_runner_respawns() {
    let limits = ExecLimits {
        timeout_ms: 2000,
        total_timeout_ms: 20_000,
        memory_limit_mb: 512,
    };
    let code = "def spin(n):\n    while n:\n        pass\n    return 0\n";
    let started = Instant::now();
    let v = run_oracles(
        &stub_sandbox(),
        code,
        "spin",
        &strs(&["assert spin(0) == 0", "assert spin(1) == 0", "assert spin(0) == 0"]),
        &limits,
    )
    .unwrap();
    let wall = started.elapsed().as_millis();
    assert_eq!(v[0].status, Status::Pass);
    assert_eq!(v[1].status, Status::Timeout);
    assert!(v[1].elapsed_ms >= 2000.0, "{}", v[1].elapsed_ms);
    assert_eq!(v[2].status, Status::Pass, "respawned runner resumes after the hang");
    assert!(wall < 4000, "wall time {wall} ms");
}

#[test]
fn batch_timeout_marks_rest_not_executed() {
    let limits = ExecLimits {
        timeout_ms: 1000,
        total_timeout_ms: 1500,
        memory_limit_mb: 512,
    };
    let code = "def spin():\n    while True:\n        pass\n";
    let v = run_oracles(
        &stub_sandbox(),
        code,
        "spin",
        &strs(&[
            "assert spin() is None",
            "assert spin() is None",
            "assert spin() is None",
        ]),
        &limits,
    )
    .unwrap();
    let statuses: Vec<Status> = v.iter().map(|v| v.status).collect();
    assert_eq!(statuses, [Status::Timeout, Status::NotExecuted, Status::NotExecuted]);
}

#[test]
fn unloadable_candidate_marks_every_assertion() {
    let v = run_oracles(
        &stub_sandbox(),
        "def add(a, b)\n    return a + b\n",
        "add",
        &strs(&["assert add(1, 2) == 3", "assert add(0, 0) == 0"]),
        &ExecLimits::default(),
    )
    .unwrap();
    assert!(v.iter().all(|v| v.status == Status::CandidateError));
    assert!(v[0].error_message.as_deref().unwrap().starts_with("SyntaxError"));
}

#[test]
fn candidate_state_does_not_leak_between_assertions() {
    let code = "seen = []\ndef push(x):\n    seen.append(x)\n    return len(seen)\n";
    let v = run_oracles(
        &stub_sandbox(),
        code,
        "push",
        &strs(&["assert push(1) == 1", "assert push(2) == 1"]),
        &ExecLimits::default(),
    )
    .unwrap();
    assert!(v.iter().all(|v| v.passed()), "{v:?}");
}

#[test]
fn runner_sees_scrubbed_environment_and_private_cwd() {
    std::env::set_var("ORACLE_FORGE_API_KEY", "secret-should-not-leak");
    let here = std::env::current_dir().unwrap();
    let v = run_oracles(
        &stub_sandbox(),
        "import os\ndef env(k):\n    return os.environ.get(k)\n",
        "env",
        &[
            "assert env('ORACLE_FORGE_API_KEY') is None".to_string(),
            format!("assert __import__('os').getcwd() != {:?}", here.display().to_string()),
        ],
        &ExecLimits::default(),
    )
    .unwrap();
    assert!(v.iter().all(|v| v.passed()), "{v:?}");
}

#[test]
fn garbage_output_is_a_protocol_error() {
    let err = run_oracles(
        &sh_runner("cat >/dev/null; echo 'hello there'"),
        "def f(): pass\n",
        "f",
        &strs(&["assert f() is None"]),
        &ExecLimits::default(),
    )
    .unwrap_err();
    match err {
        SandboxError::Protocol { raw, .. } => assert!(raw.contains("hello there")),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn out_of_order_index_is_a_protocol_error() {
    let script =
        r#"cat >/dev/null; echo '{"index":1,"status":"pass","error_type":null,"error_message":null,"elapsed_ms":1.0}'"#;
    let err = run_oracles(
        &sh_runner(script),
        "def f(): pass\n",
        "f",
        &strs(&["assert f() is None", "assert f() is None"]),
        &ExecLimits::default(),
    )
    .unwrap_err();
    assert!(matches!(err, SandboxError::Protocol { .. }), "{err}");
}

#[test]
fn runner_dying_mid_batch_is_attributed_and_respawned() {
    let v = run_oracles(
        &sh_runner("cat >/dev/null; echo boom >&2; exit 3"),
        "def f(): pass\n",
        "f",
        &strs(&["assert f() is None", "assert f() is None"]),
        &ExecLimits::default(),
    )
    .unwrap();
    for (i, v) in v.iter().enumerate() {
        assert_eq!(v.input_index, i);
        assert_eq!(v.status, Status::RuntimeError);
        assert_eq!(v.error_type.as_deref(), Some("RunnerExited"));
        assert!(v.error_message.as_deref().unwrap().contains("boom"));
    }
}

#[test]
fn missing_runner_program_is_a_spawn_error() {
    let sandbox = Sandbox::new(RunnerCommand::new("/nonexistent/runner", Vec::<String>::new()));
    let err = run_oracles(&sandbox, "", "f", &strs(&["assert True"]), &ExecLimits::default()).unwrap_err();
    assert!(matches!(err, SandboxError::RunnerSpawn { .. }));
}

#[test]
fn empty_batch_needs_no_runner() {
    let sandbox = Sandbox::new(RunnerCommand::new("/nonexistent/runner", Vec::<String>::new()));
    assert!(run_oracles(&sandbox, "", "f", &[], &ExecLimits::default())
        .unwrap()
        .is_empty());
}
