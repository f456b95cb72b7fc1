//! Application configuration: defaults, TOML file, `RAGRANK_*` environment
//! variables and `section.key=value` overrides, merged in that order.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{default_separators, ChunkingConfig};
use crate::embedding::{QueryEmbeddingMode, DEFAULT_HYDE_TEMPLATE};
use crate::generation::{GenParams, RetryPolicy, DEFAULT_MCQ_INSTRUCTION, DEFAULT_OPEN_INSTRUCTION};
use crate::mmr::MmrConfig;
use crate::rerank::PrConfig;

pub const ENV_PREFIX: &str = "RAGRANK_";
pub const DEFAULT_VOCAB_PATH: &str = "assets/p50k_base.tiktoken";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("override {0:?} is not of the form section.key=value")]
    BadOverride(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Bpe,
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub kind: TokenizerKind,
    pub vocab_path: PathBuf,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            kind: TokenizerKind::Bpe,
            vocab_path: DEFAULT_VOCAB_PATH.into(),
        }
    }
}

impl TokenizerConfig {
    /// The configured path if it exists; for the default relative path, the
    /// copy shipped in the source tree is tried as well.
    pub fn resolved_vocab_path(&self) -> PathBuf {
        if self.vocab_path.exists() || self.vocab_path != Path::new(DEFAULT_VOCAB_PATH) {
            return self.vocab_path.clone();
        }
        let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(DEFAULT_VOCAB_PATH);
        if shipped.exists() {
            shipped
        } else {
            self.vocab_path.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunkSection {
    pub max_tokens: usize,
    pub overlap: usize,
    pub separators: Vec<String>,
}

impl Default for ChunkSection {
    fn default() -> Self {
        Self {
            max_tokens: 300,
            overlap: 30,
            separators: default_separators(),
        }
    }
}

impl ChunkSection {
    pub fn to_chunking(&self) -> ChunkingConfig {
        ChunkingConfig {
            max_tokens: self.max_tokens,
            overlap: self.overlap,
            separators: self.separators.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingProviderKind {
    Hashing,
    Http,
    Null,
}

/// Which text is embedded as the query in direct mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySource {
    Question,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    pub provider: EmbeddingProviderKind,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub test_dim: usize,
    pub mode: QueryEmbeddingMode,
    pub query_source: QuerySource,
    pub hyde_template: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            provider: EmbeddingProviderKind::Hashing,
            base_url: None,
            model: None,
            api_key_env: None,
            test_dim: 64,
            mode: QueryEmbeddingMode::Direct,
            query_source: QuerySource::Question,
            hyde_template: DEFAULT_HYDE_TEMPLATE.into(),
            timeout_ms: 30_000,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmProviderKind {
    Mock,
    Http,
}

/// Named endpoints for common local deployments; each only supplies a base
/// URL and model name when those are not set explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlmProfile {
    Custom,
    AstrosageChat,
    MistralTgi,
    Llama2Tgi,
}

impl LlmProfile {
    pub fn defaults(self) -> Option<(&'static str, &'static str)> {
        match self {
            LlmProfile::Custom => None,
            LlmProfile::AstrosageChat => Some(("http://127.0.0.1:8000/v1", "AstroMLab/AstroSage-8B")),
            LlmProfile::MistralTgi => Some(("http://127.0.0.1:8080/v1", "mistralai/Mistral-7B-v0.1")),
            LlmProfile::Llama2Tgi => Some(("http://127.0.0.1:8081/v1", "meta-llama/Llama-2-13b-chat-hf")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    pub pattern: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub provider: LlmProviderKind,
    pub profile: LlmProfile,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub instruction: String,
    pub open_instruction: String,
    pub mock_rules: Vec<MockRule>,
}

impl Default for LlmSection {
    fn default() -> Self {
        let p = GenParams::default();
        let r = RetryPolicy::default();
        Self {
            provider: LlmProviderKind::Mock,
            profile: LlmProfile::Custom,
            base_url: None,
            model: None,
            api_key_env: None,
            temperature: p.temperature,
            top_p: p.top_p,
            max_new_tokens: p.max_new_tokens,
            timeout_ms: 120_000,
            max_in_flight: 2,
            max_retries: r.max_retries,
            retry_backoff_ms: r.backoff.as_millis() as u64,
            instruction: DEFAULT_MCQ_INSTRUCTION.into(),
            open_instruction: DEFAULT_OPEN_INSTRUCTION.into(),
            mock_rules: Vec::new(),
        }
    }
}

impl LlmSection {
    pub fn params(&self) -> GenParams {
        GenParams {
            temperature: self.temperature,
            top_p: self.top_p,
            max_new_tokens: self.max_new_tokens,
        }
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            backoff: Duration::from_millis(self.retry_backoff_ms),
        }
    }

    /// Base URL and model after applying the profile.
    pub fn endpoint(&self) -> (Option<String>, Option<String>) {
        let defaults = self.profile.defaults();
        (
            self.base_url.clone().or_else(|| defaults.map(|d| d.0.to_string())),
            self.model.clone().or_else(|| defaults.map(|d| d.1.to_string())),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub rouge_n: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { rouge_n: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub parallelism: usize,
    pub results_path: PathBuf,
    pub strict: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            parallelism: 1,
            results_path: "results.jsonl".into(),
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub host: String,
    pub port: u16,
    pub idle_timeout_secs: u64,
    pub provenance_log: PathBuf,
    pub max_upload_bytes: usize,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            idle_timeout_secs: 30 * 60,
            provenance_log: "logs/provenance.jsonl".into(),
            max_upload_bytes: 32 << 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// Refuse every outbound request (for proving the mock stack is local).
    pub deny_outbound: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub tokenizer: TokenizerConfig,
    pub chunk: ChunkSection,
    pub embedding: EmbeddingSection,
    pub llm: LlmSection,
    pub mmr: MmrConfig,
    pub pr: PrConfig,
    pub metrics: MetricsSection,
    pub eval: EvalSection,
    pub server: ServerSection,
    pub network: NetworkSection,
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_scalar(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .and_then(|v| serde_json::to_value(v).ok())
            .unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut parts = key.split('.').peekable();
    let mut cur = root;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(ConfigError::BadOverride(key.into()));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("{key}: parent is not a section")))?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part).or_insert_with(|| Value::Object(Map::new()));
    }
    Err(ConfigError::BadOverride(key.into()))
}

/// Environment variables `RAGRANK_SECTION__KEY` as `section.key` pairs.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    vars.into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            rest.contains("__")
                .then(|| (rest.to_ascii_lowercase().replace("__", "."), v))
        })
        .collect()
}

/// `section.key=value` into its parts.
pub fn parse_assignment(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::BadOverride(s.into()))?;
    let k = k.trim();
    if !k.contains('.') {
        return Err(ConfigError::BadOverride(s.into()));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

impl AppConfig {
    /// Defaults < file < environment < command-line assignments.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        assignments: &[String],
    ) -> Result<Self, ConfigError> {
        let mut tree = serde_json::to_value(AppConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            merge(&mut tree, serde_json::to_value(table).expect("toml converts to json"));
        }
        for (k, v) in env_overrides(env) {
            set_dotted(&mut tree, &k, parse_scalar(&v))?;
        }
        for a in assignments {
            let (k, v) = parse_assignment(a)?;
            set_dotted(&mut tree, &k, parse_scalar(&v))?;
        }
        let cfg: AppConfig = serde_json::from_value(tree).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Standard sources: optional file, the process environment, assignments.
    pub fn from_sources(file: Option<&Path>, assignments: &[String]) -> Result<Self, ConfigError> {
        Self::load(file, std::env::vars(), assignments)
    }

    /// Applies JSON overrides, either nested (`{"pr": {"top_k": 6}}`) or
    /// dotted (`{"pr.top_k": 6}`), and revalidates.
    pub fn with_overrides(&self, overrides: &Value) -> Result<Self, ConfigError> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        let Some(obj) = overrides.as_object() else {
            if overrides.is_null() {
                return Ok(self.clone());
            }
            return Err(ConfigError::Invalid("overrides must be an object".into()));
        };
        for (k, v) in obj {
            if k.contains('.') {
                set_dotted(&mut tree, k, v.clone())?;
            } else {
                let mut patch = Map::new();
                patch.insert(k.clone(), v.clone());
                merge(&mut tree, Value::Object(patch));
            }
        }
        let cfg: AppConfig = serde_json::from_value(tree).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_override(&self, key: &str, value: Value) -> Result<Self, ConfigError> {
        let mut m = Map::new();
        m.insert(key.to_string(), value);
        self.with_overrides(&Value::Object(m))
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.chunk
            .to_chunking()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("chunk: {e}")))?;
        if self.chunk.separators.is_empty() {
            return bad("chunk.separators must not be empty".into());
        }
        self.mmr.validate().map_err(ConfigError::Invalid)?;
        self.pr.validate().map_err(ConfigError::Invalid)?;
        self.llm.params().validate().map_err(ConfigError::Invalid)?;
        if self.metrics.rouge_n == 0 {
            return bad("metrics.rouge_n must be at least 1".into());
        }
        if self.eval.parallelism == 0 {
            return bad("eval.parallelism must be at least 1".into());
        }
        if self.embedding.test_dim == 0 {
            return bad("embedding.test_dim must be at least 1".into());
        }
        if self.embedding.max_in_flight == 0 || self.llm.max_in_flight == 0 {
            return bad("max_in_flight limits must be at least 1".into());
        }
        if !self.embedding.hyde_template.contains("{q}") {
            return bad("embedding.hyde_template must contain {q}".into());
        }
        if self.embedding.provider == EmbeddingProviderKind::Http
            && (self.embedding.base_url.is_none() || self.embedding.model.is_none())
        {
            return bad("embedding.provider = \"http\" requires embedding.base_url and embedding.model".into());
        }
        if self.llm.provider == LlmProviderKind::Http {
            let (url, model) = self.llm.endpoint();
            if url.is_none() || model.is_none() {
                return bad("llm.provider = \"http\" requires llm.base_url and llm.model (or a profile)".into());
            }
        }
        for r in &self.llm.mock_rules {
            if let Err(e) = regex::Regex::new(&r.pattern) {
                return bad(format!("llm.mock_rules pattern {:?}: {e}", r.pattern));
            }
        }
        for name in [&self.embedding.api_key_env, &self.llm.api_key_env].into_iter().flatten() {
            let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            if !ok {
                return bad(format!("api_key_env must name an environment variable (got {name:?})"));
            }
        }
        if self.tokenizer.kind == TokenizerKind::Bpe && !self.tokenizer.resolved_vocab_path().is_file() {
            return bad(format!(
                "tokenizer.vocab_path {} does not exist",
                self.tokenizer.vocab_path.display()
            ));
        }
        Ok(())
    }
}
