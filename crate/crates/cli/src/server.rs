//! HTTP service for interactive sessions.
//!
//! Unlike batch evaluation, a session here outlives a single question: it
//! stays open until it is deleted, idles out, or the server shuts down.
//! Pipeline work is blocking and runs on the blocking pool; each session
//! admits one writer (document ingest) or many readers (queries) at a time.

use std::collections::HashMap;
use std::future::Future;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use ragrank_core::config::{AppConfig, ConfigError};
use ragrank_core::corpus::{parse_document, CorpusError, DocumentKind};
use ragrank_core::evaluation::PipelineError;
use ragrank_core::generation::{QueryBundle, RecordStatus, StageTimings};
use ragrank_core::provenance::ProvenanceLog;
use ragrank_core::vector_index::IndexError;
use ragrank_core::{Document, Label, McqOption, Pipeline, QueryEmbeddingMode, VectorStore};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tokio::sync::RwLock;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Keys a client may override when creating a session.
const SESSION_OVERRIDABLE: &[&str] = &[
    "chunk.",
    "mmr.",
    "pr.",
    "metrics.",
    "embedding.mode",
    "embedding.query_source",
    "embedding.hyde_template",
    "llm.temperature",
    "llm.top_p",
    "llm.max_new_tokens",
    "llm.instruction",
    "llm.open_instruction",
];

/// Error envelope: `{code, message, detail}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: json!({}),
        }
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id}"))
            .with_detail(json!({ "session_id": id }))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "detail": self.detail });
        (self.status, Json(body)).into_response()
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_config", e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let message = e.to_string();
        match e {
            PipelineError::Corpus(CorpusError::EmptyDocument(_)) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_document", message)
            }
            PipelineError::Corpus(CorpusError::MalformedSidecar { .. }) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "malformed_document", message)
            }
            PipelineError::Corpus(CorpusError::Io { .. }) => Self::new(StatusCode::BAD_REQUEST, "unreadable_document", message),
            PipelineError::Index(IndexError::DuplicateId(_)) => {
                Self::new(StatusCode::CONFLICT, "duplicate_document", message)
            }
            PipelineError::Index(IndexError::UnknownSession(_) | IndexError::Destroyed(_)) => {
                Self::new(StatusCode::NOT_FOUND, "session_not_found", message)
            }
            PipelineError::Generation(_) => Self::bad_request(message),
            PipelineError::Embedding(_) => Self::new(StatusCode::BAD_GATEWAY, "embedding_failed", message),
            PipelineError::Config(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_config", message),
            _ => Self::internal(message),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Default, Clone)]
struct SessionStats {
    doc_count: usize,
    chunk_count: usize,
    files: Vec<String>,
}

struct SessionEntry {
    id: String,
    pipeline: Pipeline,
    overrides: Value,
    created_at: DateTime<Utc>,
    stats: Mutex<SessionStats>,
    last_used: Mutex<Instant>,
    lock: Arc<RwLock<()>>,
}

impl SessionEntry {
    fn touch(&self) {
        *self.last_used.lock().unwrap_or_else(|e| e.into_inner()) = Instant::now();
    }

    fn idle_for(&self) -> Duration {
        self.last_used.lock().unwrap_or_else(|e| e.into_inner()).elapsed()
    }

    fn handle(&self) -> SessionHandle {
        let stats = self.stats.lock().unwrap_or_else(|e| e.into_inner()).clone();
        SessionHandle {
            session_id: self.id.clone(),
            doc_count: stats.doc_count,
            chunk_count: stats.chunk_count,
            files: stats.files,
            created_at: self.created_at,
            overrides: self.overrides.clone(),
        }
    }
}

/// Wire view of a live session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub doc_count: usize,
    pub chunk_count: usize,
    pub files: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub overrides: Value,
}

pub struct ServerState {
    base: Pipeline,
    sessions: Mutex<HashMap<String, Arc<SessionEntry>>>,
    idle_timeout: Duration,
}

impl ServerState {
    /// Builds the shared store (with the configured provenance log) and the
    /// base pipeline.
    pub fn from_config(config: AppConfig) -> anyhow::Result<Arc<Self>> {
        let log = ProvenanceLog::open(&config.server.provenance_log)?;
        let store = Arc::new(VectorStore::with_provenance(Arc::new(log)));
        let idle_timeout = Duration::from_secs(config.server.idle_timeout_secs);
        let base = Pipeline::from_config(config, store)?;
        Ok(Arc::new(Self::new(base, idle_timeout)))
    }

    pub fn new(base: Pipeline, idle_timeout: Duration) -> Self {
        Self {
            base,
            sessions: Mutex::new(HashMap::new()),
            idle_timeout,
        }
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.base
    }

    fn sessions(&self) -> std::sync::MutexGuard<'_, HashMap<String, Arc<SessionEntry>>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn get(&self, id: &str) -> ApiResult<Arc<SessionEntry>> {
        let entry = self.sessions().get(id).cloned().ok_or_else(|| ApiError::not_found(id))?;
        entry.touch();
        Ok(entry)
    }

    fn remove(&self, id: &str) -> Option<Arc<SessionEntry>> {
        let entry = self.sessions().remove(id)?;
        if let Err(e) = self.base.store().destroy_session(&entry.id) {
            tracing::warn!(session = %entry.id, error = %e, "destroying session");
        }
        Some(entry)
    }

    pub fn open_sessions(&self) -> usize {
        self.sessions().len()
    }

    /// Destroys sessions idle for longer than the timeout; returns how many.
    pub fn reap_idle(&self) -> usize {
        let expired: Vec<String> = self
            .sessions()
            .values()
            .filter(|s| s.idle_for() > self.idle_timeout)
            .map(|s| s.id.clone())
            .collect();
        for id in &expired {
            tracing::info!(session = %id, "session idle timeout");
            self.remove(id);
        }
        expired.len()
    }

    /// Destroys every open session.
    pub fn shutdown(&self) -> usize {
        let ids: Vec<String> = self.sessions().keys().cloned().collect();
        for id in &ids {
            self.remove(id);
        }
        self.base.store().destroy_all();
        ids.len()
    }
}

/// Flattens nested overrides into dotted keys.
fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v.as_object() {
        Some(obj) if !(prefix.is_empty() && obj.is_empty()) => {
            for (k, v) in obj {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Some(_) => {}
        None => out.push((prefix.to_string(), v.clone())),
    }
}

fn checked_overrides(overrides: &Value, allowed: &[&str]) -> ApiResult<Value> {
    if overrides.is_null() {
        return Ok(Value::Object(Map::new()));
    }
    if !overrides.is_object() {
        return Err(ApiError::bad_request("overrides must be an object"));
    }
    let mut flat = Vec::new();
    flatten("", overrides, &mut flat);
    let mut out = Map::new();
    for (k, v) in flat {
        let ok = allowed
            .iter()
            .any(|a| if a.ends_with('.') { k.starts_with(a) } else { k == *a });
        if !ok {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "override_not_allowed",
                format!("{k} cannot be overridden per session"),
            )
            .with_detail(json!({ "key": k, "allowed": allowed })));
        }
        out.insert(k, v);
    }
    Ok(Value::Object(out))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": VERSION }))
}

async fn effective_config(State(state): State<Arc<ServerState>>) -> Json<Value> {
    // API keys are never part of the config, only the names of the
    // variables that hold them.
    Json(state.base.config().to_json())
}

fn parse_body<T: serde::de::DeserializeOwned + Default>(bytes: &[u8]) -> ApiResult<T> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

async fn create_session(State(state): State<Arc<ServerState>>, body: axum::body::Bytes) -> ApiResult<impl IntoResponse> {
    let raw: Value = parse_body(&body)?;
    let raw = match raw {
        Value::Object(mut m) if m.len() == 1 && m.contains_key("overrides") => m.remove("overrides").unwrap_or_default(),
        other => other,
    };
    let overrides = checked_overrides(&raw, SESSION_OVERRIDABLE)?;
    let config = state.base.config().with_overrides(&overrides)?;
    let pipeline = state.base.reconfigured(config)?;
    let id = blocking({
        let p = pipeline.clone();
        move || Ok(p.create_session()?)
    })
    .await?;
    let entry = Arc::new(SessionEntry {
        id: id.clone(),
        pipeline,
        overrides,
        created_at: Utc::now(),
        stats: Mutex::new(SessionStats::default()),
        last_used: Mutex::new(Instant::now()),
        lock: Arc::new(RwLock::new(())),
    });
    let handle = entry.handle();
    state.sessions().insert(id, entry);
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn get_session(State(state): State<Arc<ServerState>>, Path(id): Path<String>) -> ApiResult<Json<SessionHandle>> {
    Ok(Json(state.get(&id)?.handle()))
}

async fn delete_session(State(state): State<Arc<ServerState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let entry = state.get(&id)?;
    // Wait for in-flight work on the session to finish.
    let _writer = entry.lock.clone().write_owned().await;
    state.remove(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json(json!({ "deleted": id })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathDoc {
    path: String,
    #[serde(default)]
    kind: Option<DocumentKind>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum DocumentsBody {
    List(Vec<PathDoc>),
    Wrapped { documents: Vec<PathDoc> },
}

#[derive(Debug, Serialize)]
struct IngestResponse {
    added_documents: usize,
    added_chunks: usize,
    #[serde(flatten)]
    session: SessionHandle,
}

async fn add_documents(
    State(state): State<Arc<ServerState>>,
    Path(id): Path<String>,
    req: Request,
) -> ApiResult<Json<IngestResponse>> {
    let entry = state.get(&id)?;
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));

    let docs: Vec<Document> = if is_multipart {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let already = entry.stats.lock().unwrap_or_else(|e| e.into_inner()).doc_count;
        let mut docs = Vec::new();
        while let Some(field) = form.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
            let Some(name) = field.file_name().map(str::to_string) else {
                continue;
            };
            let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
            let text = String::from_utf8(bytes.to_vec())
                .map_err(|_| ApiError::bad_request(format!("{name} is not UTF-8 text")))?;
            let kind = DocumentKind::infer(std::path::Path::new(&name));
            // Uploads get a per-session unique id; the filename stays the citation.
            let upload_path = format!("upload-{}/{name}", already + docs.len());
            docs.push(parse_document(&upload_path, &text, kind).map_err(PipelineError::from)?);
        }
        docs
    } else {
        let bytes = axum::body::Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let body: DocumentsBody = serde_json::from_slice(&bytes)
            .map_err(|e| ApiError::bad_request(format!("expected a list of {{path, kind}}: {e}")))?;
        let list = match body {
            DocumentsBody::List(l) | DocumentsBody::Wrapped { documents: l } => l,
        };
        blocking(move || {
            list.iter()
                .map(|d| {
                    let p = std::path::Path::new(&d.path);
                    let kind = d.kind.unwrap_or_else(|| DocumentKind::infer(p));
                    ragrank_core::load_document(p, kind).map_err(|e| PipelineError::from(e).into())
                })
                .collect()
        })
        .await?
    };
    if docs.is_empty() {
        return Err(ApiError::bad_request("no documents in request"));
    }

    let _writer = entry.lock.clone().write_owned().await;
    let stats = blocking({
        let entry = entry.clone();
        let docs = docs.clone();
        move || Ok(entry.pipeline.ingest_documents(&entry.id, &docs)?)
    })
    .await?;
    {
        let mut s = entry.stats.lock().unwrap_or_else(|e| e.into_inner());
        s.doc_count += stats.documents;
        s.chunk_count += stats.chunks;
        for d in &docs {
            let f = d.filename();
            if !s.files.contains(&f) {
                s.files.push(f);
            }
        }
    }
    Ok(Json(IngestResponse {
        added_documents: stats.documents,
        added_chunks: stats.chunks,
        session: entry.handle(),
    }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRequest {
    question: String,
    #[serde(default)]
    options: Option<Vec<McqOption>>,
    #[serde(default)]
    mode: Option<QueryEmbeddingMode>,
    #[serde(default)]
    overrides: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub filename: String,
    pub page: u32,
    pub seq: usize,
    pub snippet: String,
    pub rank_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryResponse {
    pub session_id: String,
    pub answer: String,
    pub parsed_label: Option<Label>,
    pub sources: Vec<Source>,
    pub timings: StageTimings,
    pub warnings: Vec<String>,
    pub effective_embedding_mode: QueryEmbeddingMode,
}

/// Keys a single query may override: retrieval, re-ranking and decoding.
const QUERY_OVERRIDABLE: &[&str] = &[
    "mmr.",
    "pr.",
    "embedding.mode",
    "embedding.query_source",
    "embedding.hyde_template",
    "llm.temperature",
    "llm.top_p",
    "llm.max_new_tokens",
    "llm.instruction",
    "llm.open_instruction",
];

async fn query(
    State(state): State<Arc<ServerState>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<Json<QueryResponse>> {
    let entry = state.get(&id)?;
    let req: QueryRequest = parse_body(&body)?;
    let overrides = checked_overrides(&req.overrides, QUERY_OVERRIDABLE)?;
    let pipeline = if overrides.as_object().is_some_and(|o| o.is_empty()) {
        entry.pipeline.clone()
    } else {
        entry
            .pipeline
            .reconfigured(entry.pipeline.config().with_overrides(&overrides)?)?
    };
    let cfg = pipeline.config();
    let options = req.options.filter(|o| !o.is_empty());
    let instruction = if options.is_some() {
        cfg.llm.instruction.clone()
    } else {
        cfg.llm.open_instruction.clone()
    };
    let bundle = QueryBundle::new(req.question, options, instruction, req.mode.unwrap_or(cfg.embedding.mode))
        .map_err(|e| ApiError::bad_request(e.to_string()))?;

    let _reader = entry.lock.clone().read_owned().await;
    let rec = blocking({
        let entry = entry.clone();
        move || {
            let rec = pipeline.query_session(&entry.id, &bundle)?;
            pipeline.record_answer(&rec);
            Ok(rec)
        }
    })
    .await?;
    entry.touch();
    if rec.status == RecordStatus::Failed {
        return Err(ApiError::new(
            StatusCode::BAD_GATEWAY,
            "generation_failed",
            rec.error.clone().unwrap_or_else(|| "generation failed".into()),
        )
        .with_detail(json!({ "attempts": rec.attempts, "warnings": rec.warnings })));
    }
    Ok(Json(QueryResponse {
        session_id: rec.session_id,
        answer: rec.prediction,
        parsed_label: rec.parsed_label,
        sources: rec
            .snippets
            .into_iter()
            .map(|s| Source {
                filename: s.filename,
                page: s.page,
                seq: s.seq,
                snippet: s.text,
                rank_score: s.rank_score,
            })
            .collect(),
        timings: rec.timings,
        warnings: rec.warnings,
        effective_embedding_mode: rec.effective_embedding_mode,
    }))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: Arc<ServerState>) -> Router {
    let limit = state.base.config().server.max_upload_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/config", get(effective_config))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/documents", post(add_documents))
        .route("/sessions/{id}/query", post(query))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then destroys every open session.
pub async fn run(
    state: Arc<ServerState>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let reaper = {
        let state = state.clone();
        let every = (state.idle_timeout / 4).clamp(Duration::from_millis(50), Duration::from_secs(60));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                state.reap_idle();
            }
        })
    };
    let result = axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await;
    reaper.abort();
    let n = state.shutdown();
    tracing::info!(sessions = n, "shutdown: destroyed open sessions");
    result
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
