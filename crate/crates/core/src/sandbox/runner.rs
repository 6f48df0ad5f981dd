//! Spawning and supervising runner processes.
//!
//! Each batch runs in a fresh temp directory with a scrubbed environment,
//! its own process group and rlimits. Timeouts are enforced here by killing
//! the group; a killed or crashed runner is respawned on the assertions it
//! did not reach, so every assertion still gets a verdict.

use std::io::{BufRead, BufReader, Read, Write};
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::protocol::{parse_runner_line, RunnerJob, RunnerLine, RunnerStatus};
use super::{truncate_message, ExecJob, ExecLimits, Executor, SandboxError, Status, Verdict};

const MAX_LINE_BYTES: u64 = 1 << 20;
const STDERR_CAP: usize = 16 * 1024;

/// How to start a runner: program plus fixed arguments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerCommand {
    pub program: String,
    pub args: Vec<String>,
}

impl RunnerCommand {
    pub fn new(program: impl Into<String>, args: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            program: program.into(),
            args: args.into_iter().map(Into::into).collect(),
        }
    }

    /// `python3 -I <script>`; isolated mode ignores user site and env vars.
    pub fn python_script(script: impl Into<PathBuf>) -> Self {
        let script: PathBuf = script.into();
        Self::new("python3", ["-I".to_string(), script.display().to_string()])
    }

    /// Parse a whitespace-separated command line (no quoting).
    pub fn parse(spec: &str) -> Option<Self> {
        let mut parts = spec.split_whitespace();
        let program = parts.next()?;
        Some(Self::new(program, parts))
    }

    /// Program followed by its arguments.
    pub fn argv(&self) -> Vec<String> {
        std::iter::once(self.program.clone())
            .chain(self.args.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Sandbox {
    command: RunnerCommand,
    isolate_network: bool,
}

impl Sandbox {
    pub fn new(command: RunnerCommand) -> Self {
        Self {
            command,
            isolate_network: true,
        }
    }

    /// Try to detach the runner from the network (needs `CAP_SYS_ADMIN`;
    /// silently skipped otherwise).
    pub fn with_network_isolation(mut self, on: bool) -> Self {
        self.isolate_network = on;
        self
    }

    pub fn command(&self) -> &RunnerCommand {
        &self.command
    }

    fn spawn(&self, limits: &ExecLimits, workdir: &std::path::Path) -> Result<Child, SandboxError> {
        let mut cmd = Command::new(&self.command.program);
        cmd.args(&self.command.args)
            .current_dir(workdir)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("HOME", workdir)
            .env("LANG", "C.UTF-8")
            .env("PYTHONIOENCODING", "utf-8")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let memory = limits.memory_limit_mb.saturating_mul(1024 * 1024);
        let isolate_network = self.isolate_network;
        // SAFETY: only async-signal-safe syscalls run between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                libc::setpgid(0, 0);
                let mem = libc::rlimit {
                    rlim_cur: memory as libc::rlim_t,
                    rlim_max: memory as libc::rlim_t,
                };
                libc::setrlimit(libc::RLIMIT_AS, &mem);
                let zero = libc::rlimit {
                    rlim_cur: 0,
                    rlim_max: 0,
                };
                libc::setrlimit(libc::RLIMIT_CORE, &zero);
                if isolate_network {
                    libc::unshare(libc::CLONE_NEWNET);
                }
                Ok(())
            });
        }
        cmd.spawn().map_err(|e| SandboxError::RunnerSpawn {
            command: format!("{} {}", self.command.program, self.command.args.join(" ")),
            message: e.to_string(),
        })
    }
}

enum Event {
    Line(Vec<u8>),
    Eof,
    Failed,
}

fn read_stdout(stdout: impl Read + Send + 'static) -> Receiver<Event> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(stdout);
        loop {
            let mut buf = Vec::new();
            match (&mut reader).take(MAX_LINE_BYTES).read_until(b'\n', &mut buf) {
                Ok(0) => {
                    let _ = tx.send(Event::Eof);
                    return;
                }
                Ok(_) => {
                    if tx.send(Event::Line(buf)).is_err() {
                        return;
                    }
                }
                Err(e) => {
                    log::warn!("runner stdout read failed: {e}");
                    let _ = tx.send(Event::Failed);
                    return;
                }
            }
        }
    });
    rx
}

fn read_stderr(stderr: impl Read + Send + 'static) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.take(STDERR_CAP as u64).read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

fn kill_group(child: &mut Child) {
    let pid = child.id() as libc::pid_t;
    // SAFETY: plain syscall on a process group we created.
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
    }
    let _ = child.kill();
    let _ = child.wait();
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

/// Outcome of one runner process.
enum Segment {
    /// Ran to its summary line.
    Completed,
    /// Candidate did not load; every assertion is a candidate error.
    CandidateFailed(String),
    /// Stopped at `next`; respawn from there.
    Interrupted,
    /// Whole-batch budget spent.
    BatchExpired,
}

impl Executor for Sandbox {
    fn execute(&self, job: &ExecJob<'_>, limits: &ExecLimits) -> Result<Vec<Verdict>, SandboxError> {
        limits.check()?;
        let n = job.assertions.len();
        let mut verdicts: Vec<Option<Verdict>> = vec![None; n];
        let batch_deadline = Instant::now() + Duration::from_millis(limits.total_timeout_ms);
        let per_assertion = Duration::from_millis(limits.timeout_ms);
        let mut next = 0;

        loop {
            if next >= n {
                break;
            }
            if Instant::now() >= batch_deadline {
                break;
            }
            let workdir = tempfile::Builder::new()
                .prefix("oracle-forge-run-")
                .tempdir()
                .map_err(|e| SandboxError::RunnerSpawn {
                    command: "tempdir".into(),
                    message: e.to_string(),
                })?;
            let mut child = self.spawn(limits, workdir.path())?;
            let runner_job = RunnerJob {
                candidate_code: job.candidate_code.to_string(),
                function_name: job.function_name.to_string(),
                assertions: job.assertions[next..].to_vec(),
                timeout_ms: limits.timeout_ms,
            };
            let mut stdin = child.stdin.take().expect("piped stdin");
            let payload = runner_job.to_json();
            thread::spawn(move || {
                let _ = stdin.write_all(payload.as_bytes());
            });
            let lines = read_stdout(child.stdout.take().expect("piped stdout"));
            let stderr = read_stderr(child.stderr.take().expect("piped stderr"));

            let offset = next;
            let mut window = Instant::now();
            let segment = loop {
                let deadline = (window + per_assertion).min(batch_deadline);
                let wait = deadline.saturating_duration_since(Instant::now());
                match lines.recv_timeout(wait) {
                    Ok(Event::Line(raw)) => {
                        let text = String::from_utf8_lossy(&raw).into_owned();
                        if text.trim().is_empty() {
                            continue;
                        }
                        let parsed = parse_runner_line(&text).map_err(|message| SandboxError::Protocol {
                            message,
                            raw: text.clone(),
                        });
                        let parsed = match parsed {
                            Ok(p) => p,
                            Err(e) => {
                                kill_group(&mut child);
                                return Err(e);
                            }
                        };
                        match parsed {
                            RunnerLine::Verdict(v) => {
                                if v.index + offset != next || next >= n {
                                    kill_group(&mut child);
                                    return Err(SandboxError::Protocol {
                                        message: format!(
                                            "verdict index {} out of order (expected {})",
                                            v.index,
                                            next - offset
                                        ),
                                        raw: text,
                                    });
                                }
                                verdicts[next] = Some(Verdict::from_runner(next, v));
                                next += 1;
                                window = Instant::now();
                            }
                            RunnerLine::Summary(s) => {
                                if !s.candidate_loaded {
                                    kill_group(&mut child);
                                    break Segment::CandidateFailed(
                                        s.load_error.unwrap_or_else(|| "candidate failed to load".into()),
                                    );
                                }
                                if next != n || s.executed != n - offset {
                                    kill_group(&mut child);
                                    return Err(SandboxError::Protocol {
                                        message: format!(
                                            "summary reports {} executed, {} verdicts received of {}",
                                            s.executed,
                                            next - offset,
                                            n - offset
                                        ),
                                        raw: text,
                                    });
                                }
                                let _ = child.wait();
                                break Segment::Completed;
                            }
                        }
                    }
                    Ok(Event::Eof) | Ok(Event::Failed) | Err(RecvTimeoutError::Disconnected) => {
                        let status = child.wait().ok();
                        let err = stderr.join().unwrap_or_default();
                        if next < n {
                            verdicts[next] = Some(Verdict {
                                input_index: next,
                                status: Status::RuntimeError,
                                error_type: Some("RunnerExited".into()),
                                error_message: Some(truncate_message(&format!(
                                    "runner exited ({}) before reporting; stderr: {}",
                                    status.map(|s| s.to_string()).unwrap_or_else(|| "unknown".into()),
                                    err.trim()
                                ))),
                                elapsed_ms: ms_since(window),
                            });
                            next += 1;
                            break Segment::Interrupted;
                        }
                        return Err(SandboxError::Protocol {
                            message: "runner exited without a summary line".into(),
                            raw: err,
                        });
                    }
                    Err(RecvTimeoutError::Timeout) => {
                        kill_group(&mut child);
                        let now = Instant::now();
                        if now >= window + per_assertion && next < n {
                            verdicts[next] = Some(Verdict {
                                input_index: next,
                                status: Status::Timeout,
                                error_type: None,
                                error_message: Some(format!(
                                    "exceeded per-assertion timeout of {} ms",
                                    limits.timeout_ms
                                )),
                                elapsed_ms: ms_since(window),
                            });
                            next += 1;
                            break Segment::Interrupted;
                        }
                        break Segment::BatchExpired;
                    }
                }
            };
            match segment {
                Segment::Completed => break,
                Segment::Interrupted => continue,
                Segment::BatchExpired => break,
                Segment::CandidateFailed(load_error) => {
                    let message = truncate_message(&load_error);
                    return Ok((0..n)
                        .map(|i| Verdict {
                            input_index: i,
                            status: Status::CandidateError,
                            error_type: None,
                            error_message: Some(message.clone()),
                            elapsed_ms: 0.0,
                        })
                        .collect());
                }
            }
        }

        Ok(verdicts
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.unwrap_or_else(|| Verdict {
                    input_index: i,
                    status: Status::NotExecuted,
                    error_type: None,
                    error_message: Some("batch timeout reached before execution".into()),
                    elapsed_ms: 0.0,
                })
            })
            .collect())
    }
}

impl Verdict {
    fn from_runner(input_index: usize, line: super::protocol::VerdictLine) -> Self {
        let status = match line.status {
            RunnerStatus::Pass => Status::Pass,
            RunnerStatus::AssertionFailed => Status::AssertionFailed,
            RunnerStatus::RuntimeError => Status::RuntimeError,
            RunnerStatus::ParseError => Status::ParseError,
        };
        let (error_type, error_message) = if status == Status::Pass {
            (None, None)
        } else {
            (line.error_type, line.error_message.map(|m| truncate_message(&m)))
        };
        Self {
            input_index,
            status,
            error_type,
            error_message,
            elapsed_ms: line.elapsed_ms,
        }
    }
}
