//! Pulling assertion lists and code out of free-form model replies.

use super::oracle::is_assert_line;
use super::Diagnostic;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExtractionResult {
    pub assertions: Vec<String>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("reply contains no function definition")]
pub struct NoCodeFound;

/// Fenced blocks in document order. An unterminated final fence runs to the
/// end of the text.
pub fn fenced_blocks(text: &str) -> Vec<Vec<&str>> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        let is_fence = trimmed.starts_with("```");
        match current.as_mut() {
            None if is_fence => current = Some(Vec::new()),
            None => {}
            Some(_) if is_fence => {
                blocks.push(current.take().unwrap_or_default());
                // "```python" right after content opens a fresh block.
                if !trimmed.trim_start_matches('`').trim().is_empty() {
                    current = Some(Vec::new());
                }
            }
            Some(block) => block.push(line),
        }
    }
    if let Some(block) = current {
        blocks.push(block);
    }
    blocks
}

/// Drop a trailing `#` comment that sits outside any string literal.
pub fn strip_trailing_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    let mut i = 0;
    // (quote byte, triple-quoted)
    let mut quote: Option<(u8, bool)> = None;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some((q, triple)) => {
                if b == b'\\' {
                    i += 2;
                    continue;
                }
                if b == q {
                    if !triple {
                        quote = None;
                    } else if bytes[i..].starts_with(&[q, q, q]) {
                        quote = None;
                        i += 3;
                        continue;
                    }
                }
            }
            None => match b {
                b'#' => return line[..i].trim_end(),
                b'\'' | b'"' => {
                    if bytes[i..].starts_with(&[b, b, b]) {
                        quote = Some((b, true));
                        i += 3;
                        continue;
                    }
                    quote = Some((b, false));
                }
                _ => {}
            },
        }
        i += 1;
    }
    line.trim_end()
}

fn collect_asserts<'a, I: IntoIterator<Item = &'a str>>(lines: I) -> Vec<String> {
    lines
        .into_iter()
        .map(|l| strip_trailing_comment(l.trim()))
        .filter(|l| is_assert_line(l))
        .map(str::to_string)
        .collect()
}

/// Collect assertion lines, preferring the last fenced block that holds any.
/// Never fails: anomalies become diagnostics and surplus lines are cut to
/// `expected_count`.
pub fn extract_assertions(reply_text: &str, expected_count: usize) -> ExtractionResult {
    let mut diagnostics = Vec::new();
    let fenced = fenced_blocks(reply_text)
        .into_iter()
        .rev()
        .map(collect_asserts)
        .find(|found| !found.is_empty());
    let mut assertions = match fenced {
        Some(found) => found,
        None => {
            let found = collect_asserts(reply_text.lines());
            if !found.is_empty() {
                diagnostics.push(Diagnostic::NoCodeFence);
            }
            found
        }
    };
    if assertions.is_empty() {
        diagnostics.push(Diagnostic::NoAssertions);
    }
    if assertions.len() != expected_count {
        diagnostics.push(Diagnostic::CountMismatch {
            found: assertions.len(),
            expected: expected_count,
        });
        assertions.truncate(expected_count);
    }
    ExtractionResult {
        assertions,
        diagnostics,
    }
}

fn is_def_line(line: &str) -> bool {
    line.starts_with("def ") || line.starts_with("async def ")
}

fn defines_function(lines: &[&str]) -> bool {
    lines.iter().any(|l| {
        let t = l.trim_start();
        t.starts_with("def ") || t.starts_with("async def ")
    })
}

fn join_lf(lines: &[&str]) -> String {
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

/// Source text of the answer: the last fenced block, or failing that the
/// longest run of lines starting at a top-level `def`.
pub fn extract_code_block(reply_text: &str) -> Result<String, NoCodeFound> {
    let normalized = reply_text.replace("\r\n", "\n").replace('\r', "\n");
    if let Some(last) = fenced_blocks(&normalized).last() {
        if defines_function(last) {
            return Ok(join_lf(last));
        }
    }
    let lines: Vec<&str> = normalized.lines().collect();
    let mut best: Option<&[&str]> = None;
    let mut i = 0;
    while i < lines.len() {
        if !is_def_line(lines[i]) {
            i += 1;
            continue;
        }
        let start = i;
        i += 1;
        while i < lines.len() {
            let l = lines[i];
            let continues = l.trim().is_empty()
                || l.starts_with(' ')
                || l.starts_with('\t')
                || is_def_line(l)
                || l.starts_with('@')
                || l.starts_with("class ");
            if !continues {
                break;
            }
            i += 1;
        }
        let mut end = i;
        while end > start && lines[end - 1].trim().is_empty() {
            end -= 1;
        }
        let run = &lines[start..end];
        if best.is_none_or(|b| run.len() >= b.len()) {
            best = Some(run);
        }
    }
    best.map(join_lf).ok_or(NoCodeFound)
}
