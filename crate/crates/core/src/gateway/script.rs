use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatRequest, Provider, ProviderFailure};

/// Reply body in a script file: a plain string or a list of lines joined
/// with `\n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReplyText {
    Text(String),
    Lines(Vec<String>),
}

impl ReplyText {
    pub fn render(&self) -> String {
        match self {
            ReplyText::Text(t) => t.clone(),
            ReplyText::Lines(lines) => lines.join("\n"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Glob over the request tag; `*` matches any run of characters.
    pub tag: String,
    /// Substring the user text must contain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub reply: ReplyText,
    /// How many times the rule may fire; unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uses: Option<usize>,
}

impl ScriptRule {
    pub fn new(tag: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            contains: None,
            reply: ReplyText::Text(reply.into()),
            uses: None,
        }
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn limited(mut self, uses: usize) -> Self {
        self.uses = Some(uses);
        self
    }

    fn matches(&self, request: &ChatRequest) -> bool {
        glob_match(&self.tag, &request.request_tag)
            && self
                .contains
                .as_deref()
                .is_none_or(|needle| request.user_text.contains(needle))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderScript {
    pub rules: Vec<ScriptRule>,
}

impl ProviderScript {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// Deterministic mock: the first rule that matches and still has uses left
/// answers.
#[derive(Debug)]
pub struct ScriptedProvider {
    script: ProviderScript,
    used: Mutex<Vec<usize>>,
}

impl ScriptedProvider {
    pub fn new(script: ProviderScript) -> Self {
        let used = Mutex::new(vec![0; script.rules.len()]);
        Self { script, used }
    }
}

impl Provider for ScriptedProvider {
    fn call(&self, request: &ChatRequest) -> Result<String, ProviderFailure> {
        let mut used = self.used.lock().expect("script lock poisoned");
        for (i, rule) in self.script.rules.iter().enumerate() {
            if rule.uses.is_some_and(|cap| used[i] >= cap) {
                continue;
            }
            if rule.matches(request) {
                used[i] += 1;
                return Ok(rule.reply.render());
            }
        }
        Err(ProviderFailure::ScriptMiss)
    }
}

pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}
