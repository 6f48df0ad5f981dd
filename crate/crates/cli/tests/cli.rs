use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn core(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core").join(rel)
}

fn runner() -> String {
    format!("python3 -I {}", core("tests/support/stub_runner.py").display())
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oracle-forge"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn generate(out: &Path, mode: &str) -> Output {
    let suite = core("tests/fixtures/suite3.jsonl");
    let script = core("tests/fixtures/script_suite3.json");
    cli(&[
        "generate",
        "--tasks",
        suite.to_str().unwrap(),
        "--mode",
        mode,
        "--script",
        script.to_str().unwrap(),
        "--runner",
        &runner(),
        "--workers",
        "2",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn generate_evaluate_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let g = generate(&out, "full");
    assert_eq!(g.status.code(), Some(0), "{}", String::from_utf8_lossy(&g.stderr));
    assert_eq!(String::from_utf8_lossy(&g.stdout).trim(), out.display().to_string());

    let e = cli(&["evaluate", out.to_str().unwrap()]);
    assert_eq!(e.status.code(), Some(0));
    let table = std::fs::read_to_string(out.join("metrics.txt")).unwrap();
    assert!(table.contains("task-level accuracy: 100.00%"), "{table}");

    let r = cli(&["replay", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(dir.path().join("run.replay/config.json").is_file());
}

#[test]
fn mode_names_accept_dashes() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(&dir.path().join("run"), "planning-only");
    assert_eq!(g.status.code(), Some(0), "{}", String::from_utf8_lossy(&g.stderr));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(&dir.path().join("run"), "everything");
    assert_eq!(g.status.code(), Some(2));

    let e = cli(&["evaluate", dir.path().to_str().unwrap()]);
    assert_eq!(e.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&e.stderr).contains("not a run record"));
}

#[test]
fn refine_cap_is_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let suite = core("tests/fixtures/suite3.jsonl");
    let o = cli(&[
        "generate",
        "--tasks",
        suite.to_str().unwrap(),
        "--script",
        "x.json",
        "--max-refine",
        "11",
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("0..=10"));
}
