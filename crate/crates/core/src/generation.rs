//! Prompt construction, chat-completion backends and answer extraction.

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::embedding::QueryEmbeddingMode;
use crate::net::{self, InFlightLimit, NetError, OutboundGate};
use crate::rerank::ContextPack;

pub const DEFAULT_MCQ_INSTRUCTION: &str = "Answer with the letter of the correct option (A, B, C, or D).";
pub const DEFAULT_OPEN_INSTRUCTION: &str = "Answer concisely using the context.";

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("duplicate option label {0}")]
    DuplicateLabel(Label),
    #[error("invalid option label {0:?}: expected a single letter A-Z")]
    InvalidLabel(String),
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("backend rejected the prompt as too long: {0}")]
    OverLength(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("generation failed after {attempts} attempt(s): {source}")]
    Failed {
        attempts: u32,
        #[source]
        source: Box<GenerationError>,
    },
}

impl GenerationError {
    pub fn is_retryable(&self) -> bool {
        match self {
            GenerationError::Net(e) => e.is_retryable(),
            GenerationError::Unavailable(_) => true,
            _ => false,
        }
    }

    pub fn attempts(&self) -> u32 {
        match self {
            GenerationError::Failed { attempts, .. } => *attempts,
            _ => 1,
        }
    }
}

/// Multiple-choice option label: one uppercase ASCII letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(char);

impl Label {
    pub fn new(c: char) -> Option<Self> {
        c.is_ascii_uppercase().then_some(Label(c))
    }

    pub fn as_char(self) -> char {
        self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for Label {
    type Err = GenerationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let mut chars = t.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Label::new(c.to_ascii_uppercase()).ok_or_else(|| GenerationError::InvalidLabel(s.into())),
            _ => Err(GenerationError::InvalidLabel(s.into())),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqOption {
    pub label: Label,
    pub text: String,
}

impl McqOption {
    pub fn new(label: char, text: impl Into<String>) -> Self {
        Self {
            label: Label::new(label).expect("label must be an uppercase letter"),
            text: text.into(),
        }
    }
}

fn check_labels(options: &[McqOption]) -> Result<(), GenerationError> {
    let mut seen = HashSet::new();
    for o in options {
        if !seen.insert(o.label) {
            return Err(GenerationError::DuplicateLabel(o.label));
        }
    }
    Ok(())
}

/// Question, blank line, one `{label}. {text}` line per option, blank line,
/// instruction. Without options: question, blank line, instruction.
pub fn build_query_string(
    question: &str,
    options: Option<&[McqOption]>,
    instruction: &str,
) -> Result<String, GenerationError> {
    if question.trim().is_empty() {
        return Err(GenerationError::EmptyQuestion);
    }
    let mut sections = vec![question.to_string()];
    if let Some(opts) = options.filter(|o| !o.is_empty()) {
        check_labels(opts)?;
        let lines: Vec<String> = opts.iter().map(|o| format!("{}. {}", o.label, o.text)).collect();
        sections.push(lines.join("\n"));
    }
    if !instruction.is_empty() {
        sections.push(instruction.to_string());
    }
    Ok(sections.join("\n\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBundle {
    pub question: String,
    pub options: Option<Vec<McqOption>>,
    pub instruction: String,
    pub prompt: String,
    pub embedding_mode: QueryEmbeddingMode,
}

impl QueryBundle {
    pub fn new(
        question: impl Into<String>,
        options: Option<Vec<McqOption>>,
        instruction: impl Into<String>,
        embedding_mode: QueryEmbeddingMode,
    ) -> Result<Self, GenerationError> {
        let question = question.into();
        let instruction = instruction.into();
        let prompt = build_query_string(&question, options.as_deref(), &instruction)?;
        Ok(Self {
            question,
            options,
            instruction,
            prompt,
            embedding_mode,
        })
    }

    pub fn is_mcq(&self) -> bool {
        self.options.as_ref().is_some_and(|o| !o.is_empty())
    }
}

/// `Context:\n{combined}\n\nQuestion:\n{p}`.
pub fn build_prompt(ctx: &ContextPack, query_string: &str) -> String {
    format!("Context:\n{}\n\nQuestion:\n{}", ctx.combined_text, query_string)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            temperature: 0.005,
            top_p: 0.95,
            max_new_tokens: 128,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!("llm.temperature must be positive (got {})", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("llm.top_p must lie in (0, 1] (got {})", self.top_p));
        }
        if self.max_new_tokens == 0 {
            return Err("llm.max_new_tokens must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff: Duration,
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            backoff: Duration::ZERO,
        }
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            backoff: Duration::from_millis(250),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub params: GenParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// The backend reported a sampling temperature other than the one sent.
    pub clamped: bool,
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GenerationError>;

    fn name(&self) -> &'static str;
}

pub type SharedBackend = Arc<dyn LlmBackend>;

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub text: String,
    pub attempts: u32,
    pub clamped: bool,
}

/// One completion with up to `retry.max_retries` retries on transient
/// failures, doubling the backoff each time.
pub fn generate(
    backend: &dyn LlmBackend,
    prompt: &str,
    params: &GenParams,
    retry: &RetryPolicy,
) -> Result<Generated, GenerationError> {
    if prompt.trim().is_empty() {
        return Err(GenerationError::EmptyPrompt);
    }
    let req = CompletionRequest {
        prompt: prompt.to_string(),
        params: *params,
    };
    let mut attempts = 0;
    let mut delay = retry.backoff;
    loop {
        attempts += 1;
        match backend.complete(&req) {
            Ok(c) => {
                return Ok(Generated {
                    text: c.text,
                    attempts,
                    clamped: c.clamped,
                })
            }
            Err(e) if e.is_retryable() && attempts <= retry.max_retries => {
                tracing::warn!(attempt = attempts, error = %e, "generation failed; retrying");
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
                delay *= 2;
            }
            Err(e) => {
                return Err(GenerationError::Failed {
                    attempts,
                    source: Box::new(e),
                })
            }
        }
    }
}

/// Chat-completions client (`POST {base_url}/chat/completions`).
pub struct HttpChatBackend {
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    gate: Arc<OutboundGate>,
    limit: InFlightLimit,
}

impl HttpChatBackend {
    pub fn new(
        base_url: &str,
        model: &str,
        api_key_env: Option<&str>,
        timeout: Duration,
        max_in_flight: usize,
        gate: Arc<OutboundGate>,
    ) -> Self {
        Self {
            url: net::join_url(base_url, "chat/completions"),
            model: model.to_string(),
            api_key: net::api_key_from_env(api_key_env),
            client: net::client(timeout),
            gate,
            limit: InFlightLimit::new(max_in_flight),
        }
    }

    pub fn request_body(model: &str, req: &CompletionRequest) -> serde_json::Value {
        serde_json::json!({
            "model": model,
            "messages": [{ "role": "user", "content": req.prompt }],
            "temperature": req.params.temperature,
            "top_p": req.params.top_p,
            "max_tokens": req.params.max_new_tokens,
        })
    }
}

fn is_length_rejection(status: u16, body: &str) -> bool {
    let b = body.to_ascii_lowercase();
    matches!(status, 400 | 413 | 422)
        && (b.contains("context length") || b.contains("too long") || b.contains("max_tokens") || b.contains("input validation"))
}

impl LlmBackend for HttpChatBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GenerationError> {
        let body = Self::request_body(&self.model, req);
        let reply = {
            let _permit = self.limit.acquire();
            net::post_json(&self.gate, &self.client, &self.url, self.api_key.as_deref(), &body)
        };
        let reply = match reply {
            Err(NetError::Status { status, body, .. }) if is_length_rejection(status, &body) => {
                return Err(GenerationError::OverLength(body))
            }
            other => other?,
        };
        let choice = &reply["choices"][0];
        let text = choice["message"]["content"]
            .as_str()
            .or_else(|| choice["text"].as_str())
            .ok_or_else(|| NetError::Decode {
                url: self.url.clone(),
                message: "no choices[0].message.content in response".into(),
            })?;
        let clamped = reply["temperature"]
            .as_f64()
            .is_some_and(|t| (t - req.params.temperature).abs() > 1e-12);
        Ok(Completion {
            text: text.to_string(),
            clamped,
        })
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

/// What the mock answers when no rule matches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockFallback {
    /// Reads the prompt: for multiple choice, answers with the option whose
    /// text appears in the context; for open questions, the first sentence
    /// of the top chunk; for prompts without a context section (HyDE), the
    /// question itself.
    ContextReader,
    Fixed(String),
}

/// Scripted offline backend: regex rules first, then the fallback.
pub struct MockBackend {
    rules: Vec<(Regex, String)>,
    fallback: MockFallback,
    failures_left: AtomicUsize,
    requests: Mutex<Vec<CompletionRequest>>,
}

impl MockBackend {
    pub fn new(rules: Vec<(Regex, String)>, fallback: MockFallback) -> Self {
        Self {
            rules,
            fallback,
            failures_left: AtomicUsize::new(0),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn context_reader() -> Self {
        Self::new(Vec::new(), MockFallback::ContextReader)
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        Self::new(Vec::new(), MockFallback::Fixed(text.into()))
    }

    /// Fails every call with a retryable error.
    pub fn unreachable() -> Self {
        Self::fixed("").failing(usize::MAX)
    }

    /// Fails the next `n` calls with a retryable error.
    pub fn failing(self, n: usize) -> Self {
        self.failures_left.store(n, Ordering::SeqCst);
        self
    }

    /// Every request seen so far, including failed ones.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn call_count(&self) -> usize {
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

static OPTION_LINE: std::sync::LazyLock<Regex> =
    std::sync::LazyLock::new(|| Regex::new(r"(?m)^([A-Z])\. (.+)$").unwrap());

fn read_context(prompt: &str) -> String {
    let Some(rest) = prompt.strip_prefix("Context:\n") else {
        // HyDE-style prompt: echo the question line.
        return prompt
            .lines()
            .find_map(|l| l.strip_prefix("Question: "))
            .unwrap_or(prompt)
            .to_string();
    };
    let (context, question) = rest.rsplit_once("\n\nQuestion:\n").unwrap_or((rest, ""));
    let context_lc = context.to_lowercase();
    let mut options: Vec<(&str, &str)> = OPTION_LINE
        .captures_iter(question)
        .map(|c| (c.get(1).unwrap().as_str(), c.get(2).unwrap().as_str()))
        .collect();
    if !options.is_empty() {
        options.sort_by_key(|(label, text)| (std::cmp::Reverse(text.len()), *label));
        return match options
            .iter()
            .find(|(_, text)| context_lc.contains(&text.to_lowercase()))
        {
            Some((label, text)) => format!("{label}. {text}"),
            None => "I cannot determine the answer from the context.".to_string(),
        };
    }
    // First sentence of the first chunk body (the line after its header).
    let body = context.lines().find(|l| !l.starts_with("[Source: ") && !l.trim().is_empty());
    match body {
        Some(b) => match b.find(". ") {
            Some(i) => b[..=i].to_string(),
            None => b.to_string(),
        },
        None => "I cannot determine the answer from the context.".to_string(),
    }
}

impl LlmBackend for MockBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GenerationError> {
        self.requests
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(req.clone());
        let failing = self
            .failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if failing {
            return Err(GenerationError::Unavailable("mock backend is down".into()));
        }
        let text = self
            .rules
            .iter()
            .find(|(re, _)| re.is_match(&req.prompt))
            .map(|(_, resp)| resp.clone())
            .unwrap_or_else(|| match &self.fallback {
                MockFallback::ContextReader => read_context(&req.prompt),
                MockFallback::Fixed(t) => t.clone(),
            });
        Ok(Completion { text, clamped: false })
    }

    fn name(&self) -> &'static str {
        "mock"
    }
}

static ANSWER_IS: std::sync::LazyLock<Regex> =
    std::sync::LazyLock::new(|| Regex::new(r"(?i)answer\s+is\s*:?\s*\(?([a-z])\b").unwrap());

/// Parses a multiple-choice label out of free text. First match wins:
/// 1. a label letter standing alone at the start (`B`, `B.`, `(B)`, `B:`),
/// 2. "answer is X", case-insensitive,
/// 3. an option's exact text inside the answer, longest option first.
pub fn extract_choice(raw: &str, options: &[McqOption]) -> Option<Label> {
    let known = |c: char| options.iter().map(|o| o.label).find(|l| l.as_char() == c);

    let s = raw.trim_start();
    let s = s.strip_prefix('(').unwrap_or(s);
    let mut chars = s.chars();
    if let Some(first) = chars.next() {
        let rest = chars.as_str();
        let standalone = rest.is_empty()
            || rest.starts_with(['.', ')', ':'])
            || rest.starts_with('\n')
            || rest.trim().is_empty();
        if standalone {
            if let Some(l) = known(first) {
                return Some(l);
            }
        }
    }

    if let Some(l) = ANSWER_IS
        .captures(raw)
        .and_then(|c| c[1].chars().next())
        .and_then(|c| known(c.to_ascii_uppercase()))
    {
        return Some(l);
    }

    let mut by_len: Vec<&McqOption> = options.iter().filter(|o| !o.text.is_empty()).collect();
    by_len.sort_by_key(|o| (std::cmp::Reverse(o.text.len()), o.label));
    by_len.iter().find(|o| raw.contains(o.text.as_str())).map(|o| o.label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub chunk_id: String,
    pub filename: String,
    pub page: u32,
    pub seq: usize,
    pub text: String,
    pub rank_score: f64,
    pub truncated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub chunk_ms: f64,
    pub embed_ms: f64,
    pub index_ms: f64,
    pub retrieve_ms: f64,
    pub rerank_ms: f64,
    pub generate_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingTrace {
    pub pool_size: usize,
    pub mmr_ids: Vec<String>,
    pub edges: usize,
    pub iterations: usize,
    pub residual: f64,
    pub stationarity: f64,
    pub converged: bool,
    pub uniform_personalization: bool,
}

/// Everything recorded about one answered question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub instance_id: Option<String>,
    pub session_id: String,
    pub status: RecordStatus,
    pub question: String,
    pub options: Option<Vec<McqOption>>,
    pub query_string: String,
    pub prediction: String,
    pub parsed_label: Option<Label>,
    pub gold: Option<String>,
    pub correct: Option<bool>,
    pub difficulty: Option<String>,
    pub embedding_mode: QueryEmbeddingMode,
    pub effective_embedding_mode: QueryEmbeddingMode,
    pub hyde_passage: Option<String>,
    pub source_files: Vec<String>,
    pub snippets: Vec<Snippet>,
    pub rank_scores: Vec<f64>,
    pub context_tokens: usize,
    pub context_truncated: bool,
    pub ranking: RankingTrace,
    pub attempts: u32,
    pub timings: StageTimings,
    pub config_snapshot: serde_json::Value,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

/// Snippets and deduplicated filenames (first-seen order) from a pack.
pub fn provenance_of(pack: &ContextPack) -> (Vec<Snippet>, Vec<String>) {
    let snippets: Vec<Snippet> = pack
        .chunks
        .iter()
        .map(|rc| Snippet {
            chunk_id: rc.chunk.id.clone(),
            filename: rc.chunk.filename.clone(),
            page: rc.chunk.page,
            seq: rc.chunk.seq,
            text: rc.chunk.text.clone(),
            rank_score: rc.rank_score,
            truncated: rc.truncated,
        })
        .collect();
    let mut files: Vec<String> = Vec::new();
    for s in &snippets {
        if !files.contains(&s.filename) {
            files.push(s.filename.clone());
        }
    }
    (snippets, files)
}
