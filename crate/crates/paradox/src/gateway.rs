//! Chat-completion gateway: prompt templates with checked placeholders, an
//! HTTP provider with retry/backoff, a scripted replay provider for offline
//! runs, and JSON-block extraction from free-form completions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Sampling temperature per pipeline role. Analysis prompts (decomposition,
/// retrieval rationale) run cold; adversarial generation runs hot; the RAG
/// answering step runs near-greedy.
pub const TEMP_ANALYSIS: f64 = 0.2;
pub const TEMP_GENERATION: f64 = 1.0;
pub const TEMP_ANSWERING: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    /// Extra attempts after the first, both for transport retries and for
    /// regeneration loops built on top of `complete`.
    pub max_retries: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: TEMP_GENERATION,
            max_tokens: 512,
            max_retries: 5,
        }
    }
}

impl GenerationConfig {
    pub fn analysis() -> Self {
        GenerationConfig {
            temperature: TEMP_ANALYSIS,
            ..Default::default()
        }
    }

    pub fn generation() -> Self {
        GenerationConfig {
            temperature: TEMP_GENERATION,
            ..Default::default()
        }
    }

    pub fn answering() -> Self {
        GenerationConfig {
            temperature: TEMP_ANSWERING,
            ..Default::default()
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }
}

/// System + user message pair after placeholder substitution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl RenderedPrompt {
    /// Canonical byte string used for scripted matching and hashing.
    pub fn canonical(&self) -> String {
        format!("{}\n{}", self.system, self.user)
    }

    pub fn sha256_hex(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Prompt template with `{placeholder}` slots. Every slot appearing in the
/// text must be bound at render time; `required` additionally pins slots that
/// must exist in the text, so an edited template file cannot silently drop
/// one.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: String,
    system: String,
    user: String,
    placeholders: BTreeSet<String>,
}

fn find_placeholders(text: &str) -> BTreeSet<String> {
    let bytes = text.as_bytes();
    let mut found = BTreeSet::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut j = start;
            while j < bytes.len()
                && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_')
            {
                j += 1;
            }
            if j > start && j < bytes.len() && bytes[j] == b'}' {
                found.insert(text[start..j].to_string());
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    found
}

fn substitute(text: &str, bindings: &BTreeMap<String, String>) -> Result<String> {
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut j = start;
            while j < bytes.len()
                && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_')
            {
                j += 1;
            }
            if j > start && j < bytes.len() && bytes[j] == b'}' {
                let name = &text[start..j];
                match bindings.get(name) {
                    Some(value) => out.push_str(value),
                    None => {
                        return Err(Error::Template {
                            placeholder: name.to_string(),
                        })
                    }
                }
                i = j + 1;
                continue;
            }
        }
        // Safe: we only land on char boundaries because '{' is ASCII and the
        // inner loop only consumes ASCII identifier bytes.
        let ch = text[i..].chars().next().unwrap();
        out.push(ch);
        i += ch.len_utf8();
    }
    Ok(out)
}

impl PromptTemplate {
    pub fn new(
        name: impl Into<String>,
        system: impl Into<String>,
        user: impl Into<String>,
        required: &[&str],
    ) -> Result<Self> {
        let system = system.into();
        let user = user.into();
        let mut placeholders = find_placeholders(&system);
        placeholders.extend(find_placeholders(&user));
        for req in required {
            if !placeholders.contains(*req) {
                return Err(Error::Template {
                    placeholder: (*req).to_string(),
                });
            }
        }
        Ok(PromptTemplate {
            name: name.into(),
            system,
            user,
            placeholders,
        })
    }

    pub fn placeholders(&self) -> &BTreeSet<String> {
        &self.placeholders
    }

    /// Substitutes every placeholder. Fails (naming the slot) if a slot is
    /// unbound or a binding names a slot the template does not have, so no
    /// `{placeholder}` survives into the rendered prompt and no binding is
    /// silently dropped.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<RenderedPrompt> {
        for key in bindings.keys() {
            if !self.placeholders.contains(key) {
                return Err(Error::Template {
                    placeholder: key.clone(),
                });
            }
        }
        Ok(RenderedPrompt {
            system: substitute(&self.system, bindings)?,
            user: substitute(&self.user, bindings)?,
        })
    }
}

/// Convenience for building render bindings.
pub fn bindings<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, prompt: &RenderedPrompt, cfg: &GenerationConfig) -> Result<String>;

    /// Short label for manifests and error context.
    fn describe(&self) -> String;
}

/// Renders and sends one prompt. A whitespace-only completion is an error:
/// silent refusals must not flow downstream as empty documents.
pub fn complete(
    provider: &dyn ChatProvider,
    template: &PromptTemplate,
    binds: &BTreeMap<String, String>,
    cfg: &GenerationConfig,
) -> Result<String> {
    let prompt = template.render(binds)?;
    let output = provider.chat(&prompt, cfg)?;
    if output.trim().is_empty() {
        return Err(Error::EmptyOutput);
    }
    Ok(output)
}

// ---------------------------------------------------------------------------
// HTTP provider
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

/// Chat-completions client. Connection failures, timeouts, and 5xx/429
/// responses are retried with exponential backoff (`backoff_ms * 2^attempt`);
/// other non-success statuses fail immediately.
pub struct HttpChatProvider {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    backoff_ms: u64,
    client: reqwest::blocking::Client,
}

impl HttpChatProvider {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpChatProvider {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            backoff_ms: 250,
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    /// Base backoff delay; tests shrink it to keep retry paths fast.
    pub fn with_backoff_ms(mut self, ms: u64) -> Self {
        self.backoff_ms = ms;
        self
    }
}

/// Runs `op` up to `max_retries + 1` times, sleeping `backoff_ms << attempt`
/// between tries. `op` signals a retryable failure with the outer Err; final
/// outcomes (success or a fatal error) come back inside Ok.
fn retry_loop<T>(
    max_retries: usize,
    backoff_ms: u64,
    mut op: impl FnMut() -> std::result::Result<Result<T>, String>,
) -> Result<T> {
    let attempts = max_retries + 1;
    let mut last = String::new();
    for attempt in 0..attempts {
        match op() {
            Ok(outcome) => return outcome,
            Err(msg) => {
                last = msg;
                if attempt + 1 < attempts {
                    std::thread::sleep(Duration::from_millis(backoff_ms << attempt));
                }
            }
        }
    }
    Err(Error::Transport {
        attempts,
        message: last,
    })
}

impl ChatProvider for HttpChatProvider {
    fn chat(&self, prompt: &RenderedPrompt, cfg: &GenerationConfig) -> Result<String> {
        let mut messages = Vec::new();
        if !prompt.system.is_empty() {
            messages.push(WireMessage {
                role: "system",
                content: &prompt.system,
            });
        }
        messages.push(WireMessage {
            role: "user",
            content: &prompt.user,
        });
        let body = ChatRequest {
            model: &self.model,
            messages,
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
        };

        retry_loop(cfg.max_retries, self.backoff_ms, || {
            let mut req = self.client.post(&self.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => return Err(format!("request to {}: {e}", self.endpoint)),
            };
            let status = resp.status();
            if status.is_server_error() || status.as_u16() == 429 {
                return Err(format!("{} from {}", status, self.endpoint));
            }
            if !status.is_success() {
                return Ok(Err(Error::Transport {
                    attempts: 1,
                    message: format!("{} from {}", status, self.endpoint),
                }));
            }
            let parsed: ChatResponse = match resp.json() {
                Ok(p) => p,
                Err(e) => {
                    return Ok(Err(Error::Schema(format!(
                        "chat response from {}: {e}",
                        self.endpoint
                    ))))
                }
            };
            let content = parsed
                .choices
                .into_iter()
                .next()
                .and_then(|c| c.message.content);
            match content {
                Some(text) => Ok(Ok(text)),
                None => Ok(Err(Error::Schema(format!(
                    "chat response from {} has no choices[0].message.content",
                    self.endpoint
                )))),
            }
        })
    }

    fn describe(&self) -> String {
        format!("http:{}@{}", self.model, self.endpoint)
    }
}

// ---------------------------------------------------------------------------
// Scripted provider
// ---------------------------------------------------------------------------

/// Matches a rendered prompt either by substring of its canonical form or by
/// the sha256 hex of the whole canonical form.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Substring(String),
    Sha256(String),
}

impl Matcher {
    fn matches(&self, prompt: &RenderedPrompt) -> bool {
        match self {
            Matcher::Substring(needle) => prompt.canonical().contains(needle),
            Matcher::Sha256(hex) => prompt.sha256_hex() == hex.to_lowercase(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedExchange {
    pub matcher: Matcher,
    pub response: String,
    /// How many times this exchange may fire; None = unlimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TranscriptEntry {
    pub system: String,
    pub user: String,
    pub response: String,
}

struct ExchangeState {
    exchange: ScriptedExchange,
    used: u32,
}

/// Deterministic replay provider. Exchanges are consulted in file order; the
/// first matcher with remaining budget wins, so several single-use exchanges
/// with the same matcher yield a fixed response sequence.
pub struct ScriptedProvider {
    name: String,
    exchanges: Mutex<Vec<ExchangeState>>,
    transcript: Mutex<Vec<TranscriptEntry>>,
}

impl ScriptedProvider {
    pub fn new(name: impl Into<String>, exchanges: Vec<ScriptedExchange>) -> Self {
        ScriptedProvider {
            name: name.into(),
            exchanges: Mutex::new(
                exchanges
                    .into_iter()
                    .map(|exchange| ExchangeState { exchange, used: 0 })
                    .collect(),
            ),
            transcript: Mutex::new(Vec::new()),
        }
    }

    /// Loads exchanges from JSONL, one `ScriptedExchange` per line.
    pub fn from_jsonl(name: impl Into<String>, path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            Error::InvalidInput(format!("cannot open fixtures {}: {e}", path.display()))
        })?;
        let mut exchanges = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let exchange: ScriptedExchange = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, i + 1, format!("bad scripted exchange: {e}")))?;
            exchanges.push(exchange);
        }
        Ok(ScriptedProvider::new(name, exchanges))
    }

    /// Everything sent and answered so far, in call order.
    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().unwrap().clone()
    }
}

impl ChatProvider for ScriptedProvider {
    fn chat(&self, prompt: &RenderedPrompt, _cfg: &GenerationConfig) -> Result<String> {
        let mut exchanges = self.exchanges.lock().unwrap();
        let hit = exchanges.iter_mut().find(|state| {
            state.exchange.times.map_or(true, |t| state.used < t)
                && state.exchange.matcher.matches(prompt)
        });
        match hit {
            Some(state) => {
                state.used += 1;
                let response = state.exchange.response.clone();
                self.transcript.lock().unwrap().push(TranscriptEntry {
                    system: prompt.system.clone(),
                    user: prompt.user.clone(),
                    response: response.clone(),
                });
                Ok(response)
            }
            None => {
                let canonical = prompt.canonical();
                let head: String = canonical.chars().take(160).collect();
                Err(Error::UnmatchedPrompt(head))
            }
        }
    }

    fn describe(&self) -> String {
        format!("scripted:{}", self.name)
    }
}

// ---------------------------------------------------------------------------
// JSON-block extraction
// ---------------------------------------------------------------------------

/// Pulls the first balanced top-level JSON object or array out of free-form
/// text (prose and code fences around it are ignored). A balanced candidate
/// that fails to parse is skipped and the scan continues.
pub fn extract_json_block(output: &str) -> Result<serde_json::Value> {
    let bytes = output.as_bytes();
    let mut start = 0usize;
    while let Some(offset) = bytes[start..]
        .iter()
        .position(|&b| b == b'{' || b == b'[')
    {
        let open = start + offset;
        if let Some(end) = find_balanced_end(bytes, open) {
            let candidate = &output[open..=end];
            if let Ok(value) = serde_json::from_str::<serde_json::Value>(candidate) {
                return Ok(value);
            }
        }
        start = open + 1;
    }
    let head: String = output.chars().take(120).collect();
    Err(Error::Extraction(head))
}

/// Index of the byte closing the bracket at `open`, honoring strings and
/// escapes. None if the text ends before balance returns to zero.
fn find_balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0i64;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' | b'[' => depth += 1,
            b'}' | b']' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
                if depth < 0 {
                    return None;
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn render_substitutes_all_placeholders() {
        let t = PromptTemplate::new(
            "wrong_answer",
            "You are a quiz assistant.",
            "Question: {question}\n\nCorrect Answer: {answer}\n\nWrong Answer:",
            &["question", "answer"],
        )
        .unwrap();
        let rendered = t
            .render(&bindings([("question", "Q"), ("answer", "A")]))
            .unwrap();
        assert!(rendered.user.contains("Question: Q"));
        assert!(rendered.user.contains("Correct Answer: A"));
        assert!(!rendered.user.contains('{'));
    }

    #[test]
    fn render_names_the_missing_placeholder() {
        let t = PromptTemplate::new("t", "", "Hello {name}, meet {other}", &["name"]).unwrap();
        let err = t.render(&bindings([("name", "x")])).unwrap_err();
        match err {
            Error::Template { placeholder } => assert_eq!(placeholder, "other"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn render_rejects_unknown_binding() {
        let t = PromptTemplate::new("t", "", "Hello {name}", &["name"]).unwrap();
        assert!(t
            .render(&bindings([("name", "x"), ("typo", "y")]))
            .is_err());
    }

    #[test]
    fn construction_requires_declared_slots_to_exist() {
        assert!(PromptTemplate::new("t", "", "no slots here", &["question"]).is_err());
    }

    #[test]
    fn literal_json_braces_are_not_placeholders() {
        let t = PromptTemplate::new(
            "t",
            "Reply as [{\"phrase\": \"...\"}]",
            "Query: {question}",
            &["question"],
        )
        .unwrap();
        let rendered = t.render(&bindings([("question", "Q")])).unwrap();
        assert!(rendered.system.contains("{\"phrase\""));
    }

    #[test]
    fn binding_values_containing_braces_are_inert() {
        let t = PromptTemplate::new("t", "", "Text: {value}", &["value"]).unwrap();
        let rendered = t.render(&bindings([("value", "{question}")])).unwrap();
        assert_eq!(rendered.user, "Text: {question}");
    }

    #[test]
    fn extract_json_skips_prose_and_fences() {
        let text = "Sure! Here's the JSON:\n```json\n{\"a\": [1, 2, {\"b\": \"}\"}]}\n```\nHope it helps.";
        let value = extract_json_block(text).unwrap();
        assert_eq!(value, json!({"a": [1, 2, {"b": "}"}]}));
    }

    #[test]
    fn extract_json_takes_first_valid_block() {
        let text = "{not json, then [3, 4] and {\"k\": 5}";
        assert_eq!(extract_json_block(text).unwrap(), json!([3, 4]));
    }

    #[test]
    fn extract_json_handles_escaped_quotes() {
        let text = r#"prefix {"s": "a \"quoted\" brace }"} suffix"#;
        assert_eq!(
            extract_json_block(text).unwrap(),
            json!({"s": "a \"quoted\" brace }"})
        );
    }

    #[test]
    fn extract_json_errors_on_no_block() {
        assert!(extract_json_block("no json here").is_err());
        assert!(extract_json_block("{never closed").is_err());
    }

    #[test]
    fn scripted_provider_matches_in_order_with_budgets() {
        let provider = ScriptedProvider::new(
            "test",
            vec![
                ScriptedExchange {
                    matcher: Matcher::Substring("hello".into()),
                    response: "first".into(),
                    times: Some(1),
                },
                ScriptedExchange {
                    matcher: Matcher::Substring("hello".into()),
                    response: "second".into(),
                    times: None,
                },
            ],
        );
        let prompt = RenderedPrompt {
            system: String::new(),
            user: "hello there".into(),
        };
        let cfg = GenerationConfig::default();
        assert_eq!(provider.chat(&prompt, &cfg).unwrap(), "first");
        assert_eq!(provider.chat(&prompt, &cfg).unwrap(), "second");
        assert_eq!(provider.chat(&prompt, &cfg).unwrap(), "second");
        assert_eq!(provider.transcript().len(), 3);
    }

    #[test]
    fn scripted_provider_reports_unmatched_prompts() {
        let provider = ScriptedProvider::new("test", vec![]);
        let prompt = RenderedPrompt {
            system: String::new(),
            user: "mystery".into(),
        };
        let err = provider.chat(&prompt, &GenerationConfig::default()).unwrap_err();
        match err {
            Error::UnmatchedPrompt(head) => assert!(head.contains("mystery")),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn scripted_provider_matches_by_hash() {
        let prompt = RenderedPrompt {
            system: "sys".into(),
            user: "usr".into(),
        };
        let provider = ScriptedProvider::new(
            "test",
            vec![ScriptedExchange {
                matcher: Matcher::Sha256(prompt.sha256_hex()),
                response: "hit".into(),
                times: None,
            }],
        );
        assert_eq!(
            provider.chat(&prompt, &GenerationConfig::default()).unwrap(),
            "hit"
        );
    }

    #[test]
    fn complete_rejects_empty_output() {
        let provider = ScriptedProvider::new(
            "test",
            vec![ScriptedExchange {
                matcher: Matcher::Substring("".into()),
                response: "   \n".into(),
                times: None,
            }],
        );
        let t = PromptTemplate::new("t", "", "say {x}", &["x"]).unwrap();
        let err = complete(
            &provider,
            &t,
            &bindings([("x", "hi")]),
            &GenerationConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyOutput));
    }
}
