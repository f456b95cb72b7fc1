//! Python bindings. Structured results cross the boundary as plain dicts and
//! lists (via JSON), so Python callers see the same shapes as the CLI's
//! `--json` output and the HTTP API.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use ragrank_core::config::AppConfig;
use ragrank_core::corpus::{self, Chunk, ChunkingConfig, Document, DocumentKind};
use ragrank_core::embedding::{Embedding, EmbeddingProvider, HashingEmbedder, QueryEmbeddingMode};
use ragrank_core::evaluation::{load_dataset, Pipeline as CorePipeline, SweepSpec};
use ragrank_core::generation::{McqOption, QueryBundle};
use ragrank_core::metrics;
use ragrank_core::mmr::{mmr_select, MmrConfig};
use ragrank_core::rerank::{self, PrConfig};
use ragrank_core::synthetic::{write_planted_set, SyntheticSpec};
use ragrank_core::tokenizer::{BpeCounter, TokenCounter as CoreCounter, WhitespaceCounter};
use ragrank_core::vector_index::{ScoredChunk, VectorStore};
use serde::Serialize;
use serde_json::Value;

create_exception!(ragrank, RagrankError, PyValueError, "Raised for invalid input or a failed pipeline stage.");

fn err(e: impl std::fmt::Display) -> PyErr {
    RagrankError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

/// Validated configuration: defaults < TOML file < `RAGRANK_*` environment
/// < `assignments` (`"section.key=value"` strings).
#[pyclass(frozen, skip_from_py_object, module = "ragrank")]
#[derive(Clone)]
struct Config {
    inner: AppConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (path=None, assignments=Vec::new()))]
    fn new(path: Option<PathBuf>, assignments: Vec<String>) -> PyResult<Self> {
        let inner = AppConfig::from_sources(path.as_deref(), &assignments).map_err(err)?;
        Ok(Self { inner })
    }

    /// Built-in defaults only, ignoring the environment.
    #[staticmethod]
    fn defaults() -> Self {
        Self { inner: AppConfig::default() }
    }

    /// New config with nested or dotted overrides applied.
    fn with_overrides(&self, py: Python<'_>, overrides: &Bound<'_, PyAny>) -> PyResult<Self> {
        let v = from_py(py, overrides)?;
        Ok(Self { inner: self.inner.with_overrides(&v).map_err(err)? })
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.inner.to_json())
    }
}

/// Token counter: exact p50k BPE from a vocabulary file, or whitespace words.
#[pyclass(frozen, module = "ragrank")]
struct TokenCounter {
    inner: Arc<dyn CoreCounter>,
}

#[pymethods]
impl TokenCounter {
    /// BPE counter; `path` defaults to the configured vocabulary asset.
    #[staticmethod]
    #[pyo3(signature = (path=None))]
    fn bpe(path: Option<PathBuf>) -> PyResult<Self> {
        let path = path.unwrap_or_else(|| AppConfig::default().tokenizer.resolved_vocab_path());
        let c = BpeCounter::from_file(&path).map_err(err)?;
        Ok(Self { inner: Arc::new(c) })
    }

    #[staticmethod]
    fn whitespace() -> Self {
        Self { inner: Arc::new(WhitespaceCounter) }
    }

    fn count(&self, text: &str) -> usize {
        self.inner.count(text)
    }

    fn truncate(&self, text: &str, max_tokens: usize) -> String {
        self.inner.truncate(text, max_tokens).to_string()
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.inner.name()
    }
}

#[pyfunction]
fn normalize_text(text: &str) -> String {
    corpus::normalize_text(text)
}

fn parse_kind(kind: Option<&str>, path: &std::path::Path) -> PyResult<DocumentKind> {
    match kind {
        None => Ok(DocumentKind::infer(path)),
        Some("text") => Ok(DocumentKind::PlainText),
        Some("markdown") => Ok(DocumentKind::Markdown),
        Some("pages") => Ok(DocumentKind::PdfPages),
        Some(other) => Err(err(format!("unknown document kind {other:?}; expected text, markdown or pages"))),
    }
}

fn chunk_doc(doc: &Document, counter: &TokenCounter, max_tokens: usize, overlap: usize) -> PyResult<Vec<Chunk>> {
    let cfg = ChunkingConfig { max_tokens, overlap, ..Default::default() };
    corpus::split_chunks(doc, &cfg, counter.inner.as_ref()).map_err(err)
}

/// Chunks in-memory text as a single-page document named `name`.
#[pyfunction]
#[pyo3(signature = (text, counter, max_tokens=300, overlap=30, name="text.txt"))]
fn chunk_text(
    py: Python<'_>,
    text: &str,
    counter: &TokenCounter,
    max_tokens: usize,
    overlap: usize,
    name: &str,
) -> PyResult<Py<PyAny>> {
    let doc = Document::from_text(name, name, text);
    to_py(py, &chunk_doc(&doc, counter, max_tokens, overlap)?)
}

/// Loads and chunks one file; `kind` is inferred from the extension unless
/// given as "text", "markdown" or "pages".
#[pyfunction]
#[pyo3(signature = (path, counter, max_tokens=300, overlap=30, kind=None))]
fn chunk_file(
    py: Python<'_>,
    path: PathBuf,
    counter: &TokenCounter,
    max_tokens: usize,
    overlap: usize,
    kind: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let doc = corpus::load_document(&path, parse_kind(kind, &path)?).map_err(err)?;
    to_py(py, &chunk_doc(&doc, counter, max_tokens, overlap)?)
}

/// Deterministic feature-hashing embedder.
#[pyclass(frozen, module = "ragrank")]
struct HashEmbedder {
    inner: HashingEmbedder,
}

#[pymethods]
impl HashEmbedder {
    #[new]
    #[pyo3(signature = (dim=64))]
    fn new(dim: usize) -> PyResult<Self> {
        if dim == 0 {
            return Err(err("dim must be positive"));
        }
        Ok(Self { inner: HashingEmbedder::new(dim) })
    }

    fn embed(&self, texts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let out = self.inner.embed_batch(&refs).map_err(err)?;
        Ok(out.into_iter().map(|e| e.0).collect())
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dimension().unwrap_or(0)
    }
}

fn pool_from(vectors: Vec<Vec<f64>>, ids: Option<Vec<String>>) -> PyResult<Vec<ScoredChunk>> {
    let ids = match ids {
        Some(ids) if ids.len() != vectors.len() => return Err(err("ids and vectors differ in length")),
        Some(ids) => ids,
        None => (0..vectors.len()).map(|i| format!("{i:06}")).collect(),
    };
    Ok(ids
        .into_iter()
        .zip(vectors)
        .map(|(id, v)| ScoredChunk {
            chunk: Chunk {
                id: id.clone(),
                doc_id: id.clone(),
                filename: id.clone(),
                page: 1,
                seq: 0,
                text: id,
                token_len: 0,
                start: 0,
                end: 0,
                overlap_tokens: 0,
            },
            vector: Embedding(v),
            score: 0.0,
        })
        .collect())
}

/// Greedy maximal marginal relevance; returns the selected indices in pick
/// order. Ties go to the smaller id (the index when `ids` is omitted).
#[pyfunction]
#[pyo3(signature = (vectors, query, k=3, lambda_=0.5, ids=None))]
fn mmr(vectors: Vec<Vec<f64>>, query: Vec<f64>, k: usize, lambda_: f64, ids: Option<Vec<String>>) -> PyResult<Vec<usize>> {
    let pool = pool_from(vectors, ids)?;
    let cfg = MmrConfig { k, lambda: lambda_, fetch_pool: pool.len().max(k) };
    cfg.validate().map_err(err)?;
    let picked = mmr_select(&pool, &Embedding(query), &cfg);
    Ok(picked
        .iter()
        .map(|p| pool.iter().position(|c| c.chunk.id == p.chunk.id).expect("picked from pool"))
        .collect())
}

/// Personalized PageRank over the thresholded cosine graph of `vectors`.
/// `personalization` defaults to clipped similarity to `query`, or uniform
/// when neither is given.
#[pyfunction]
#[pyo3(signature = (vectors, query=None, personalization=None, alpha=0.85, min_sim=0.01, tol=1e-10, max_iter=100))]
fn pagerank(
    py: Python<'_>,
    vectors: Vec<Vec<f64>>,
    query: Option<Vec<f64>>,
    personalization: Option<Vec<f64>>,
    alpha: f64,
    min_sim: f64,
    tol: f64,
    max_iter: usize,
) -> PyResult<Py<PyAny>> {
    let cfg = PrConfig { alpha, min_sim, tol, max_iter, ..PrConfig::default() };
    cfg.validate().map_err(err)?;
    let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
    let v = match (personalization, query) {
        (Some(p), _) => {
            if p.len() != refs.len() {
                return Err(err("personalization and vectors differ in length"));
            }
            rerank::personalization_from_scores(&p)
        }
        (None, Some(q)) => rerank::personalization(&refs, &q),
        (None, None) => rerank::personalization_from_scores(&vec![1.0; refs.len()]),
    };
    let p = rerank::to_transition(&rerank::build_similarity_graph(&refs, min_sim));
    to_py(py, &rerank::pagerank(&p, &v, &cfg))
}

fn labels(xs: Vec<Option<String>>) -> Vec<Option<String>> {
    xs.into_iter().map(|x| x.map(|s| s.trim().to_string())).collect()
}

#[pyfunction]
fn accuracy(preds: Vec<Option<String>>, gold: Vec<String>) -> PyResult<f64> {
    metrics::accuracy(&labels(preds), &gold).map_err(err)
}

#[pyfunction]
fn macro_f1(preds: Vec<Option<String>>, gold: Vec<String>) -> PyResult<f64> {
    metrics::macro_f1(&labels(preds), &gold).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (candidate, reference, n=1))]
fn rouge_n(candidate: &str, reference: &str, n: usize) -> PyResult<f64> {
    metrics::rouge_n(candidate, reference, n).map_err(err)
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> f64 {
    metrics::rouge_l(candidate, reference)
}

/// The full question-answering pipeline. Each question runs in its own
/// vector session, destroyed before the answer is returned.
#[pyclass(frozen, module = "ragrank")]
struct Pipeline {
    inner: CorePipeline,
}

fn parse_options(options: Option<&Bound<'_, PyAny>>) -> PyResult<Option<Vec<McqOption>>> {
    let Some(obj) = options else { return Ok(None) };
    let pairs: Vec<(String, String)> = match obj.cast::<PyDict>() {
        Ok(d) => d.iter().map(|(k, v)| Ok((k.extract()?, v.extract()?))).collect::<PyResult<_>>()?,
        Err(_) => obj.extract()?,
    };
    let mut out = Vec::with_capacity(pairs.len());
    for (label, text) in pairs {
        let mut chars = label.trim().chars();
        let (Some(c), None) = (chars.next(), chars.next()) else {
            return Err(err(format!("option label {label:?} must be a single letter")));
        };
        let label = ragrank_core::generation::Label::new(c)
            .ok_or_else(|| err(format!("option label {label:?} must be an uppercase letter")))?;
        out.push(McqOption { label, text });
    }
    Ok((!out.is_empty()).then_some(out))
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&Config>) -> PyResult<Self> {
        let cfg = config.map_or_else(AppConfig::default, |c| c.inner.clone());
        let inner = CorePipeline::from_config(cfg, Arc::new(VectorStore::new())).map_err(err)?;
        Ok(Self { inner })
    }

    /// Answers one question over `files`. `options` is a dict or a list of
    /// (label, text) pairs; `mode` is "direct" or "hyde".
    #[pyo3(signature = (files, question, options=None, mode=None))]
    fn answer(
        &self,
        py: Python<'_>,
        files: Vec<PathBuf>,
        question: &str,
        options: Option<&Bound<'_, PyAny>>,
        mode: Option<&str>,
    ) -> PyResult<Py<PyAny>> {
        let options = parse_options(options)?;
        let cfg = self.inner.config();
        let instruction = if options.is_some() { &cfg.llm.instruction } else { &cfg.llm.open_instruction };
        let mode = match mode {
            None => cfg.embedding.mode,
            Some("direct") => QueryEmbeddingMode::Direct,
            Some("hyde") => QueryEmbeddingMode::Hyde,
            Some(other) => return Err(err(format!("unknown mode {other:?}; expected direct or hyde"))),
        };
        let bundle = QueryBundle::new(question, options, instruction.clone(), mode).map_err(err)?;
        let rec = py.detach(|| self.inner.answer(&files, &bundle, None)).map_err(err)?;
        to_py(py, &rec)
    }

    /// Runs a JSONL dataset; returns {"report": ..., "records": [...]}.
    #[pyo3(signature = (dataset, results=None, strict=false))]
    fn run_batch(&self, py: Python<'_>, dataset: PathBuf, results: Option<PathBuf>, strict: bool) -> PyResult<Py<PyAny>> {
        let outcome = py
            .detach(|| {
                let (data, _) = load_dataset(&dataset, strict).map_err(err)?;
                self.inner.run_batch(&data, results.as_deref()).map_err(err)
            })?;
        let dict = PyDict::new(py);
        dict.set_item("report", to_py(py, &outcome.report)?)?;
        dict.set_item("records", to_py(py, &outcome.records)?)?;
        Ok(dict.into_any().unbind())
    }

    /// One batch per value of `spec` (`"pr.top_k=1,3,6"`); returns the rows.
    #[pyo3(signature = (dataset, spec, strict=false))]
    fn sweep(&self, py: Python<'_>, dataset: PathBuf, spec: &str, strict: bool) -> PyResult<Py<PyAny>> {
        let spec = SweepSpec::parse(spec).map_err(err)?;
        let table = py.detach(|| {
            let (data, _) = load_dataset(&dataset, strict).map_err(err)?;
            self.inner.run_sweep(&data, &spec, None).map_err(err)
        })?;
        to_py(py, &table.rows)
    }

    #[getter]
    fn config(&self) -> Config {
        Config { inner: self.inner.config().clone() }
    }

    /// Sessions still open in this pipeline's store (normally none).
    fn live_sessions(&self) -> Vec<String> {
        self.inner.store().live_sessions()
    }
}

/// Writes a synthetic planted-evidence dataset under `directory`; returns
/// {"dataset_path", "instances", "planted"}.
#[pyfunction]
#[pyo3(signature = (directory, instances=10, seed=7))]
fn write_synthetic_set(py: Python<'_>, directory: PathBuf, instances: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let spec = SyntheticSpec { instances, seed, ..Default::default() };
    let set = write_planted_set(&directory, &spec).map_err(err)?;
    to_py(py, &set)
}

#[pymodule]
fn ragrank(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RagrankError", m.py().get_type::<RagrankError>())?;
    m.add_class::<Config>()?;
    m.add_class::<TokenCounter>()?;
    m.add_class::<HashEmbedder>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(chunk_text, m)?)?;
    m.add_function(wrap_pyfunction!(chunk_file, m)?)?;
    m.add_function(wrap_pyfunction!(mmr, m)?)?;
    m.add_function(wrap_pyfunction!(pagerank, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_n, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_set, m)?)?;
    Ok(())
}
