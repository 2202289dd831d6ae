//! LLM backends: the contract, a retrying client, a scripted mock and an
//! OpenAI-compatible HTTP adapter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{LlmExchange, ModelConfig, Prompt};
use crate::tokens::count_tokens;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub response_tokens: Option<u64>,
}

impl BackendReply {
    pub fn text(text: impl Into<String>) -> Self {
        BackendReply { text: text.into(), prompt_tokens: None, response_tokens: None }
    }
}

/// Each variant carries the backend's raw diagnostic.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "snake_case")]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend timeout: {0}")]
    Timeout(String),
    #[error("quota exceeded: {0}")]
    QuotaExceeded(String),
    /// The backend refused or could not process the request content.
    #[error("request rejected: {0}")]
    Rejected(String),
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::BackendUnavailable(_) | BackendError::Timeout(_))
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, prompt: &Prompt, model: &ModelConfig) -> Result<BackendReply, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts, the first one included.
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, initial_backoff: Duration::from_millis(500), multiplier: 2.0 }
    }
}

impl RetryPolicy {
    pub fn no_backoff(max_attempts: u32) -> Self {
        RetryPolicy { max_attempts, initial_backoff: Duration::ZERO, multiplier: 1.0 }
    }

    fn delay(&self, retry: u32) -> Duration {
        self.initial_backoff.mul_f64(self.multiplier.powi(retry as i32))
    }
}

struct Limiter {
    max: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_use.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.in_use.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Routes prompts to registered backends with retries and a concurrency cap.
#[derive(Clone)]
pub struct LlmClient {
    backends: BTreeMap<String, Arc<dyn Backend>>,
    retry: RetryPolicy,
    limiter: Arc<Limiter>,
}

impl LlmClient {
    pub fn new(retry: RetryPolicy, max_concurrent: usize) -> Self {
        LlmClient {
            backends: BTreeMap::new(),
            retry,
            limiter: Arc::new(Limiter { max: max_concurrent.max(1), in_use: Mutex::new(0), freed: Condvar::new() }),
        }
    }

    pub fn register(&mut self, backend_id: &str, backend: Arc<dyn Backend>) -> &mut Self {
        self.backends.insert(backend_id.to_string(), backend);
        self
    }

    pub fn with_backend(mut self, backend_id: &str, backend: Arc<dyn Backend>) -> Self {
        self.register(backend_id, backend);
        self
    }

    pub fn complete(&self, prompt: &Prompt, model: &ModelConfig) -> Result<LlmExchange, BackendError> {
        let backend = self
            .backends
            .get(&model.backend_id)
            .ok_or_else(|| BackendError::BackendUnavailable(format!("no backend registered as `{}`", model.backend_id)))?;
        let started = Instant::now();
        let mut attempt = 0;
        let reply = loop {
            attempt += 1;
            let result = {
                let _slot = self.limiter.acquire();
                backend.complete(prompt, model)
            };
            match result {
                Ok(r) => break r,
                Err(e) if e.is_transient() && attempt < self.retry.max_attempts => {
                    thread::sleep(self.retry.delay(attempt - 1));
                }
                Err(e) => return Err(e),
            }
        };
        Ok(LlmExchange {
            prompt: prompt.clone(),
            prompt_tokens: reply
                .prompt_tokens
                .unwrap_or_else(|| (count_tokens(&prompt.system_role) + count_tokens(&prompt.user_message)) as u64),
            response_tokens: reply.response_tokens.unwrap_or_else(|| count_tokens(&reply.text) as u64),
            response_text: reply.text,
            latency: started.elapsed().as_secs_f64(),
        })
    }
}

/// A backend backed by a closure, handy for tests and adapters.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&Prompt, &ModelConfig) -> Result<BackendReply, BackendError> + Send + Sync,
{
    fn complete(&self, prompt: &Prompt, model: &ModelConfig) -> Result<BackendReply, BackendError> {
        (self.0)(prompt, model)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockError {
    Unavailable,
    Timeout,
    Quota,
    Rejected,
}

/// One scripted response. Filters match prompt tags; an entry without
/// filters matches any request.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    /// Fix template name (e.g. `FIX_PRSE_ERR`) or `GENERATION`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    /// C file whose contents are returned inside a ```c fence; relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<MockError>,
}

impl MockEntry {
    pub fn reply(text: impl Into<String>) -> Self {
        MockEntry { reply: Some(text.into()), ..Default::default() }
    }

    pub fn driver(source: &str) -> Self {
        MockEntry::reply(format!("```c\n{source}\n```\n"))
    }

    pub fn error(kind: MockError) -> Self {
        MockEntry { error: Some(kind), ..Default::default() }
    }

    fn matches(&self, prompt: &Prompt) -> bool {
        let template = prompt.tags.get("template").map(String::as_str).unwrap_or("GENERATION");
        let question = prompt.tags.get("question").and_then(|q| q.parse::<u32>().ok());
        self.template.as_deref().is_none_or(|t| t == template) && self.question.is_none_or(|q| Some(q) == question)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScenario {
    pub entries: Vec<MockEntry>,
    /// Reply once every matching entry is used up; `None` fails with `BackendUnavailable`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_exhausted: Option<String>,
}

impl MockScenario {
    /// Loads a scenario and inlines every `driver_file`.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
        let mut scenario: MockScenario =
            serde_json::from_str(&text).map_err(|e| format!("parsing {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for entry in &mut scenario.entries {
            if let Some(file) = entry.driver_file.take() {
                let p = base.join(&file);
                let src = fs::read_to_string(&p).map_err(|e| format!("reading {}: {e}", p.display()))?;
                entry.reply = Some(format!("```c\n{}\n```\n", src.trim_end()));
            }
        }
        Ok(scenario)
    }
}

/// Serves scripted responses in order, each entry at most once.
pub struct MockBackend {
    scenario: MockScenario,
    state: Mutex<MockState>,
}

#[derive(Default)]
struct MockState {
    used: Vec<bool>,
    requests: Vec<Prompt>,
}

impl MockBackend {
    pub fn new(scenario: MockScenario) -> Self {
        let used = vec![false; scenario.entries.len()];
        MockBackend { scenario, state: Mutex::new(MockState { used, requests: Vec::new() }) }
    }

    pub fn from_entries(entries: Vec<MockEntry>) -> Self {
        MockBackend::new(MockScenario { entries, on_exhausted: None })
    }

    pub fn requests(&self) -> Vec<Prompt> {
        self.state.lock().unwrap().requests.clone()
    }
}

impl Backend for MockBackend {
    fn complete(&self, prompt: &Prompt, _model: &ModelConfig) -> Result<BackendReply, BackendError> {
        let mut state = self.state.lock().unwrap();
        state.requests.push(prompt.clone());
        let next = (0..self.scenario.entries.len()).find(|&i| !state.used[i] && self.scenario.entries[i].matches(prompt));
        let Some(i) = next else {
            return match &self.scenario.on_exhausted {
                Some(text) => Ok(BackendReply::text(text.clone())),
                None => Err(BackendError::BackendUnavailable("mock scenario exhausted".into())),
            };
        };
        state.used[i] = true;
        let entry = &self.scenario.entries[i];
        match &entry.error {
            Some(MockError::Unavailable) => Err(BackendError::BackendUnavailable("scripted outage".into())),
            Some(MockError::Timeout) => Err(BackendError::Timeout("scripted timeout".into())),
            Some(MockError::Quota) => Err(BackendError::QuotaExceeded("scripted quota".into())),
            Some(MockError::Rejected) => Err(BackendError::Rejected("scripted rejection".into())),
            None => Ok(BackendReply::text(entry.reply.clone().unwrap_or_default())),
        }
    }
}

/// Chat-completions client for OpenAI-compatible endpoints.
///
/// Reads `OPENAI_API_KEY` and, optionally, `OPENAI_BASE_URL`
/// (default `https://api.openai.com/v1`).
pub struct OpenAiBackend {
    base_url: String,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn new(base_url: &str, api_key: &str) -> Self {
        OpenAiBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: api_key.to_string(),
            http: reqwest::blocking::Client::new(),
        }
    }

    pub fn from_env() -> Result<Self, BackendError> {
        let key = std::env::var("OPENAI_API_KEY")
            .map_err(|_| BackendError::BackendUnavailable("OPENAI_API_KEY is not set".into()))?;
        let base = std::env::var("OPENAI_BASE_URL").unwrap_or_else(|_| "https://api.openai.com/v1".into());
        Ok(OpenAiBackend::new(&base, &key))
    }
}

impl Backend for OpenAiBackend {
    fn complete(&self, prompt: &Prompt, model: &ModelConfig) -> Result<BackendReply, BackendError> {
        let mut body = serde_json::json!({
            "model": model.model_name,
            "temperature": model.temperature,
            "max_tokens": model.max_response_tokens,
            "messages": [
                {"role": "system", "content": prompt.system_role},
                {"role": "user", "content": prompt.user_message},
            ],
        });
        if let Some(p) = model.top_p {
            body["top_p"] = serde_json::json!(p);
        }
        let response = self
            .http
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(&self.api_key)
            .timeout(Duration::from_secs_f64(model.request_timeout))
            .json(&body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    BackendError::Timeout(e.to_string())
                } else {
                    BackendError::BackendUnavailable(e.to_string())
                }
            })?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;
        if status.as_u16() == 429 {
            return Err(if text.contains("insufficient_quota") {
                BackendError::QuotaExceeded(text)
            } else {
                BackendError::BackendUnavailable(text)
            });
        }
        if status.as_u16() == 408 || status.as_u16() == 504 {
            return Err(BackendError::Timeout(text));
        }
        if status.is_server_error() {
            return Err(BackendError::BackendUnavailable(text));
        }
        if !status.is_success() {
            return Err(BackendError::Rejected(text));
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Rejected(format!("{e}: {text}")))?;
        let content = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::Rejected(format!("no message content: {text}")))?;
        Ok(BackendReply {
            text: content.to_string(),
            prompt_tokens: value["usage"]["prompt_tokens"].as_u64(),
            response_tokens: value["usage"]["completion_tokens"].as_u64(),
        })
    }
}
