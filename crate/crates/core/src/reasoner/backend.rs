//! Chat-completion backends: a scripted deterministic mock and a remote HTTP client.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::parse::{format_option_reply, parse_clue_block};
use super::prompt::{PromptBundle, TemplateId, PSAV_STRATEGIES};
use crate::error::{Error, Result};
use crate::text::{content_tokens, token_f1};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    pub retry_budget: u32,
    pub backoff_ms: u64,
    pub temperature: f64,
    /// Name of the environment variable holding the bearer token. The value itself
    /// is never stored in config.
    pub credential_env: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: String::new(),
            model: "mock".to_string(),
            timeout_secs: 60.0,
            max_in_flight: 4,
            retry_budget: 3,
            backoff_ms: 200,
            temperature: 0.0,
            credential_env: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == BackendKind::Remote && (self.endpoint.trim().is_empty() || self.model.trim().is_empty()) {
            return Err(Error::validation("remote backend needs an endpoint and a model name"));
        }
        if self.max_in_flight == 0 {
            return Err(Error::validation("max_in_flight must be >= 1"));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::validation("timeout must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub request_id: String,
    /// Attempts made, 1 when the first try succeeded.
    pub attempts: u32,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, prompt: &PromptBundle) -> Result<Completion>;
}

/// First 16 hex digits of SHA-256 over the rendered prompt.
pub fn stable_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_u64(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Deterministic backend. Replies come from the script, looked up by
/// `"{template}:{hash}"` and then by `"{template}:*"`; unscripted prompts get a
/// heuristic reply computed from the prompt text alone.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    script: HashMap<String, String>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn script(mut self, template: TemplateId, rendered: &str, reply: impl Into<String>) -> Self {
        self.script.insert(format!("{}:{}", template.as_str(), stable_hash(rendered)), reply.into());
        self
    }

    pub fn script_template(mut self, template: TemplateId, reply: impl Into<String>) -> Self {
        self.script.insert(format!("{}:*", template.as_str()), reply.into());
        self
    }

    fn scripted(&self, prompt: &PromptBundle) -> Option<&String> {
        let t = prompt.template_id.as_str();
        self.script
            .get(&format!("{t}:{}", stable_hash(&prompt.rendered)))
            .or_else(|| self.script.get(&format!("{t}:*")))
    }

    fn heuristic(prompt: &PromptBundle) -> String {
        let clue_tokens: Vec<String> = parse_clue_block(&prompt.rendered)
            .iter()
            .flat_map(|c| content_tokens(&format!("{} {}", c.action, c.intent)))
            .collect();
        match prompt.template_id {
            TemplateId::MultiChoice => {
                let options: Vec<String> = prompt
                    .lines()
                    .filter_map(|l| {
                        let b = l.as_bytes();
                        (b.len() >= 3 && b[0] == b'(' && b[1].is_ascii_uppercase() && b[2] == b')')
                            .then(|| l[3..].trim().to_string())
                    })
                    .collect();
                format_option_reply(best_overlap(&options, &clue_tokens, &prompt.rendered))
            }
            TemplateId::Psav => {
                let options: Vec<String> = PSAV_STRATEGIES.iter().map(|s| s.to_string()).collect();
                format_option_reply(best_overlap(&options, &clue_tokens, &prompt.rendered))
            }
            TemplateId::OpenEnded => parse_clue_block(&prompt.rendered)
                .first()
                .map(|c| c.intent.clone())
                .unwrap_or_else(|| "unknown".to_string()),
            TemplateId::ClueGeneration => mock_clues(prompt),
            TemplateId::RelationJudge => {
                let question = prompt
                    .lines()
                    .find_map(|l| l.strip_prefix("Question: "))
                    .map(content_tokens)
                    .unwrap_or_default();
                parse_clue_block(&prompt.rendered)
                    .iter()
                    .map(|c| {
                        let toks = content_tokens(&format!("{} {}", c.action, c.intent));
                        if toks.iter().any(|t| question.contains(t)) { "1" } else { "0" }
                    })
                    .collect::<Vec<_>>()
                    .join(",")
            }
            TemplateId::AnswerJudge => {
                let field = |p: &str| prompt.lines().find_map(|l| l.strip_prefix(p)).unwrap_or("").to_string();
                let f1 = token_f1(&field("Predicted Answer: "), &field("Correct Answer: "));
                format!("score: {}, correct: {}", (5.0 * f1).round(), if f1 >= 0.5 { "yes" } else { "no" })
            }
        }
    }
}

/// Option sharing the most tokens with the clues; ties broken by the prompt hash.
fn best_overlap(options: &[String], clue_tokens: &[String], rendered: &str) -> usize {
    if options.is_empty() {
        return 0;
    }
    let scores: Vec<usize> = options
        .iter()
        .map(|o| content_tokens(o).iter().filter(|t| clue_tokens.contains(t)).count())
        .collect();
    let best = *scores.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..options.len()).filter(|&i| scores[i] == best).collect();
    tied[(hash_u64(rendered) % tied.len() as u64) as usize]
}

fn mock_clues(prompt: &PromptBundle) -> String {
    let frames: Vec<&str> = prompt
        .lines()
        .filter(|l| l.starts_with("Frame"))
        .filter_map(|l| l.split_once("): ").map(|(_, c)| c))
        .collect();
    if frames.is_empty() {
        let h = stable_hash(&prompt.rendered);
        return format!("1. person moves near object {}: reach object {}", &h[..4], &h[4..8]);
    }
    frames
        .iter()
        .take(4)
        .enumerate()
        .map(|(i, c)| format!("{}. {c}: continue the activity", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

impl ChatBackend for MockBackend {
    fn complete(&self, prompt: &PromptBundle) -> Result<Completion> {
        let text = self.scripted(prompt).cloned().unwrap_or_else(|| Self::heuristic(prompt));
        Ok(Completion {
            text,
            request_id: format!("mock-{}", stable_hash(&prompt.rendered)),
            attempts: 1,
        })
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct PermitGuard<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        PermitGuard(self)
    }
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Chat-completion style HTTP client.
pub struct RemoteBackend {
    config: BackendConfig,
    agent: ureq::Agent,
    permits: Permits,
    counter: AtomicU64,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(Error),
}

impl RemoteBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build();
        let permits = Permits::new(config.max_in_flight);
        Ok(Self { config, agent, permits, counter: AtomicU64::new(0) })
    }

    pub fn request_body(&self, prompt: &PromptBundle) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt.rendered}],
            "temperature": self.config.temperature,
        })
    }

    fn attempt(&self, body: &Value, request_id: &str) -> Attempt {
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .set("Content-Type", "application/json")
            .set("X-Request-Id", request_id);
        if let Some(var) = &self.config.credential_env {
            if let Ok(token) = std::env::var(var) {
                req = req.set("Authorization", &format!("Bearer {token}"));
            }
        }
        match req.send_string(&body.to_string()) {
            Ok(resp) => match resp.into_string() {
                Ok(text) => Attempt::Done(text),
                Err(e) => Attempt::Retry(format!("reading body: {e}")),
            },
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                if status == 429 || status >= 500 {
                    Attempt::Retry(format!("HTTP {status}: {body}"))
                } else {
                    Attempt::Fatal(Error::Protocol { status, body })
                }
            }
            Err(ureq::Error::Transport(t)) => Attempt::Retry(t.to_string()),
        }
    }
}

/// First text content of the first choice. Accepts string content or a list of
/// typed parts.
pub fn extract_reply_text(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body).map_err(|e| Error::Parse(format!("reply is not JSON: {e}")))?;
    let content = &v["choices"][0]["message"]["content"];
    if let Some(s) = content.as_str() {
        return Ok(s.to_string());
    }
    if let Some(parts) = content.as_array() {
        if let Some(s) = parts.iter().find_map(|p| p["text"].as_str()) {
            return Ok(s.to_string());
        }
    }
    Err(Error::Parse(format!("no text content in reply: {body}")))
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, prompt: &PromptBundle) -> Result<Completion> {
        let _permit = self.permits.acquire();
        let request_id = format!("req-{:06}", self.counter.fetch_add(1, Ordering::Relaxed));
        let body = self.request_body(prompt);
        let mut last_failure = String::new();
        for attempt in 0..=self.config.retry_budget {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1).min(10)));
            }
            match self.attempt(&body, &request_id) {
                Attempt::Done(text) => {
                    return Ok(Completion { text: extract_reply_text(&text)?, request_id, attempts: attempt + 1 })
                }
                Attempt::Retry(msg) => last_failure = msg,
                Attempt::Fatal(e) => return Err(e),
            }
        }
        Err(Error::Transport {
            request_id,
            message: format!("retries exhausted after {} attempts: {last_failure}", self.config.retry_budget + 1),
        })
    }
}

pub fn make_backend(config: &BackendConfig) -> Result<Box<dyn ChatBackend>> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Mock => Box::new(MockBackend::new()),
        BackendKind::Remote => Box::new(RemoteBackend::new(config.clone())?),
    })
}
