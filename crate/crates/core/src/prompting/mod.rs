//! Prompt rendering, LLM backends and code extraction.

mod backend;
mod templates;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clex;
use crate::knowledge::{truncate_snippet, ApiKnowledge, Snippet};

pub use crate::tokens::count_tokens;
pub use backend::{
    Backend, BackendError, BackendReply, FnBackend, LlmClient, MockBackend, MockEntry, MockError, MockScenario,
    OpenAiBackend, RetryPolicy,
};
pub use templates::{FixTemplateId, Placeholder, PlaceholderMap};

pub const DEFAULT_SYSTEM_ROLE: &str = "You are a security auditor who writes fuzz drivers for library APIs.";
pub const DEFAULT_SNIPPET_TOKEN_BUDGET: usize = 1024;
pub const FUZZ_ENTRYPOINT: &str = "LLVMFuzzerTestOneInput";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GenerationKind {
    Naive,
    Bactx,
    Doctx,
    Ugctx,
}

impl GenerationKind {
    pub fn name(self) -> &'static str {
        match self {
            GenerationKind::Naive => "NAIVE",
            GenerationKind::Bactx => "BACTX",
            GenerationKind::Doctx => "DOCTX",
            GenerationKind::Ugctx => "UGCTX",
        }
    }
}

impl fmt::Display for GenerationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system_role: String,
    pub user_message: String,
    pub tags: BTreeMap<String, String>,
}

impl Prompt {
    pub fn new(system_role: &str, user_message: String) -> Self {
        Prompt { system_role: system_role.to_string(), user_message, tags: BTreeMap::new() }
    }

    pub fn tag(mut self, key: &str, value: impl ToString) -> Self {
        self.tags.insert(key.to_string(), value.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backend_id: String,
    pub model_name: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    pub max_response_tokens: u32,
    /// Seconds.
    pub request_timeout: f64,
}

impl ModelConfig {
    pub fn new(backend_id: &str, model_name: &str, temperature: f64) -> Self {
        ModelConfig {
            backend_id: backend_id.to_string(),
            model_name: model_name.to_string(),
            temperature,
            top_p: None,
            max_response_tokens: 2048,
            request_timeout: 120.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.request_timeout.is_nan() || self.request_timeout <= 0.0 {
            return Err("request_timeout must be positive".into());
        }
        if self.max_response_tokens == 0 {
            return Err("max_response_tokens must be positive".into());
        }
        if let Some(p) = self.top_p {
            if !(0.0..=1.0).contains(&p) || p == 0.0 {
                return Err(format!("top_p {p} outside (0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub prompt: Prompt,
    pub response_text: String,
    pub prompt_tokens: u64,
    pub response_tokens: u64,
    /// Seconds; not persisted in session logs.
    #[serde(skip)]
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("missing placeholder {0}")]
    MissingPlaceholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no code found in response")]
pub struct NoCode;

/// Rendering options shared by all prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSettings {
    pub system_role: String,
    pub snippet_token_budget: usize,
}

impl Default for PromptSettings {
    fn default() -> Self {
        PromptSettings { system_role: DEFAULT_SYSTEM_ROLE.to_string(), snippet_token_budget: DEFAULT_SNIPPET_TOKEN_BUDGET }
    }
}

fn task_request(api_name: &str) -> String {
    format!(
        "Write a fuzz driver in C for the library function `{api_name}`. \
         The driver must define `int {FUZZ_ENTRYPOINT}(const uint8_t *data, size_t size)` \
         and feed the fuzzer input to `{api_name}`. \
         Reply with the complete driver source in a single ```c code block.\n"
    )
}

fn basic_block(k: &ApiKnowledge) -> String {
    format!("The target API is declared as follows:\n```c\n{}\n\n{};\n```\n\n", k.header_include, k.declaration)
}

fn doc_block(doc: &str) -> String {
    format!("Its documentation:\n{}\n\n", doc.trim_end())
}

fn snippet_block(text: &str) -> String {
    format!("Here is an example of how the API is used:\n```c\n{}\n```\n\n", text.trim_end())
}

/// Renders a generation prompt. DOCTX without documentation and UGCTX
/// without a snippet fall back to BACTX.
pub fn render_generation_prompt(
    kind: GenerationKind,
    k: &ApiKnowledge,
    chosen_snippet: Option<&Snippet>,
    settings: &PromptSettings,
) -> Prompt {
    let mut body = String::new();
    let mut effective = kind;
    if kind != GenerationKind::Naive {
        body.push_str(&basic_block(k));
    }
    match kind {
        GenerationKind::Doctx => match k.documentation.as_deref().filter(|d| !d.trim().is_empty()) {
            Some(doc) => body.push_str(&doc_block(doc)),
            None => effective = GenerationKind::Bactx,
        },
        GenerationKind::Ugctx => {
            let text = chosen_snippet.map(|s| truncate_snippet(&s.text, settings.snippet_token_budget));
            match text.filter(|t| !t.trim().is_empty()) {
                Some(t) => body.push_str(&snippet_block(&t)),
                None => effective = GenerationKind::Bactx,
            }
        }
        _ => {}
    }
    body.push_str(&task_request(&k.api_name));
    Prompt::new(&settings.system_role, body).tag("context", effective.name())
}

/// Fills a fix template; every placeholder the template requires must be present.
pub fn render_fix_prompt(
    template_id: FixTemplateId,
    driver_code: &str,
    fields: &PlaceholderMap,
    settings: &PromptSettings,
) -> Result<Prompt, PromptError> {
    let mut all = fields.clone();
    all.insert(Placeholder::DriverCode, driver_code.to_string());
    let text = templates::fill(template_id, &all).map_err(|p| PromptError::MissingPlaceholder(p.name().to_string()))?;
    Ok(Prompt::new(&settings.system_role, text).tag("template", template_id.name()))
}

/// Bodies of Markdown code fences, in order. An unclosed fence runs to the end.
fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = text;
    let mut base = 0usize;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let header_end = after.find('\n').unwrap_or(after.len());
        let body_start = (header_end + 1).min(after.len());
        let body_region = &after[body_start..];
        let close = find_closing_fence(body_region);
        let body = &body_region[..close.unwrap_or(body_region.len())];
        blocks.push(body.strip_suffix('\n').unwrap_or(body));
        let consumed = open + 3 + body_start + close.map(|c| c + 3).unwrap_or(body_region.len());
        base += consumed;
        rest = &text[base..];
        if close.is_none() {
            break;
        }
    }
    blocks
}

/// A closing fence is ``` at the start of a line.
fn find_closing_fence(region: &str) -> Option<usize> {
    let mut offset = 0;
    for line in region.split_inclusive('\n') {
        if line.trim_start().starts_with("```") {
            return Some(offset + (line.len() - line.trim_start().len()));
        }
        offset += line.len();
    }
    None
}

/// Pulls the driver source out of a model response.
pub fn extract_code(response_text: &str) -> Result<String, NoCode> {
    let blocks: Vec<&str> = fenced_blocks(response_text).into_iter().filter(|b| !b.trim().is_empty()).collect();
    if let Some(b) = blocks.iter().find(|b| clex::mentions(b, FUZZ_ENTRYPOINT)) {
        return Ok(b.to_string());
    }
    // first of the longest, for a stable choice
    if let Some(b) = blocks.iter().rev().max_by_key(|b| b.len()) {
        return Ok(b.to_string());
    }
    if looks_like_c(response_text) {
        return Ok(response_text.to_string());
    }
    Err(NoCode)
}

fn looks_like_c(text: &str) -> bool {
    if !text.contains('{') || !clex::is_balanced(text) {
        return false;
    }
    clex::function_definitions(text).is_ok_and(|defs| !defs.is_empty())
}

impl FromStr for GenerationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "NAIVE" => Ok(GenerationKind::Naive),
            "BACTX" => Ok(GenerationKind::Bactx),
            "DOCTX" => Ok(GenerationKind::Doctx),
            "UGCTX" => Ok(GenerationKind::Ugctx),
            _ => Err(format!("unknown generation context `{s}`")),
        }
    }
}
