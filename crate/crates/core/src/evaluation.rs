//! The per-question pipeline, batch evaluation and parameter sweeps.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex, OnceLock};
use std::time::Instant;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{AppConfig, ConfigError, EmbeddingProviderKind, LlmProviderKind, QuerySource, TokenizerKind};
use crate::corpus::{load_document, split_chunks, Chunk, CorpusError, Document, DocumentKind};
use crate::embedding::{
    embed_texts, query_embedding, EmbeddedChunk, EmbeddingError, HashingEmbedder, HttpEmbedder, Hyde, NullEmbedder,
    SharedEmbedder,
};
use crate::generation::{
    build_prompt, extract_choice, generate, provenance_of, AnswerRecord, GenerationError, HttpChatBackend, Label,
    McqOption, MockBackend, MockFallback, QueryBundle, RankingTrace, RecordStatus, SharedBackend, StageTimings,
};
use crate::metrics::{MetricReport, MetricsError, Outcome, ScoredOutcome};
use crate::mmr::mmr_select;
use crate::net::OutboundGate;
use crate::provenance::ProvenanceEvent;
use crate::rerank::{rerank, ContextPack};
use crate::tokenizer::{BpeCounter, SharedCounter, TokenizerError, WhitespaceCounter};
use crate::vector_index::{IndexError, VectorStore};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn bpe_cached(path: &Path) -> Result<SharedCounter, TokenizerError> {
    static CACHE: OnceLock<Mutex<HashMap<PathBuf, SharedCounter>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(c) = cache.lock().unwrap_or_else(|e| e.into_inner()).get(path) {
        return Ok(c.clone());
    }
    let counter: SharedCounter = Arc::new(BpeCounter::from_file(path)?);
    cache
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert(path.to_path_buf(), counter.clone());
    Ok(counter)
}

fn build_counter(cfg: &AppConfig) -> Result<SharedCounter, TokenizerError> {
    match cfg.tokenizer.kind {
        TokenizerKind::Bpe => bpe_cached(&cfg.tokenizer.resolved_vocab_path()),
        TokenizerKind::Whitespace => Ok(Arc::new(WhitespaceCounter)),
    }
}

fn build_embedder(cfg: &AppConfig, gate: &Arc<OutboundGate>) -> SharedEmbedder {
    let e = &cfg.embedding;
    match e.provider {
        EmbeddingProviderKind::Hashing => Arc::new(HashingEmbedder::new(e.test_dim)),
        EmbeddingProviderKind::Null => Arc::new(NullEmbedder),
        EmbeddingProviderKind::Http => Arc::new(HttpEmbedder::new(
            e.base_url.as_deref().unwrap_or_default(),
            e.model.as_deref().unwrap_or_default(),
            e.api_key_env.as_deref(),
            std::time::Duration::from_millis(e.timeout_ms),
            e.max_in_flight,
            gate.clone(),
        )),
    }
}

fn build_backend(cfg: &AppConfig, gate: &Arc<OutboundGate>) -> SharedBackend {
    let l = &cfg.llm;
    match l.provider {
        LlmProviderKind::Mock => {
            let rules = l
                .mock_rules
                .iter()
                .map(|r| (regex::Regex::new(&r.pattern).expect("validated"), r.response.clone()))
                .collect();
            Arc::new(MockBackend::new(rules, MockFallback::ContextReader))
        }
        LlmProviderKind::Http => {
            let (url, model) = l.endpoint();
            Arc::new(HttpChatBackend::new(
                &url.unwrap_or_default(),
                &model.unwrap_or_default(),
                l.api_key_env.as_deref(),
                std::time::Duration::from_millis(l.timeout_ms),
                l.max_in_flight,
                gate.clone(),
            ))
        }
    }
}

/// Result of adding documents to a session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub documents: usize,
    pub chunks: usize,
    pub chunk_ms: f64,
    pub embed_ms: f64,
    pub index_ms: f64,
}

/// Destroys the session when dropped, on every exit path.
struct SessionGuard<'a> {
    store: &'a VectorStore,
    id: String,
}

impl Drop for SessionGuard<'_> {
    fn drop(&mut self) {
        if let Err(e) = self.store.destroy_session(&self.id) {
            tracing::error!(session = %self.id, error = %e, "session cleanup failed");
        }
    }
}

/// Token counter, embedding provider, generator and vector store wired to
/// one configuration.
#[derive(Clone)]
pub struct Pipeline {
    config: AppConfig,
    counter: SharedCounter,
    embedder: SharedEmbedder,
    backend: SharedBackend,
    store: Arc<VectorStore>,
    gate: Arc<OutboundGate>,
}

impl Pipeline {
    pub fn from_config(config: AppConfig, store: Arc<VectorStore>) -> Result<Self, PipelineError> {
        config.validate()?;
        let gate = OutboundGate::new(config.network.deny_outbound);
        Ok(Self {
            counter: build_counter(&config)?,
            embedder: build_embedder(&config, &gate),
            backend: build_backend(&config, &gate),
            config,
            store,
            gate,
        })
    }

    /// Explicit components, for tests and embedding in other programs.
    pub fn with_parts(
        config: AppConfig,
        counter: SharedCounter,
        embedder: SharedEmbedder,
        backend: SharedBackend,
        store: Arc<VectorStore>,
    ) -> Self {
        let gate = OutboundGate::new(config.network.deny_outbound);
        Self {
            config,
            counter,
            embedder,
            backend,
            store,
            gate,
        }
    }

    /// Same store; components are rebuilt only when their section changed.
    pub fn reconfigured(&self, config: AppConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut next = self.clone();
        if config.tokenizer != self.config.tokenizer {
            next.counter = build_counter(&config)?;
        }
        if config.network != self.config.network {
            next.gate = OutboundGate::new(config.network.deny_outbound);
            next.embedder = build_embedder(&config, &next.gate);
            next.backend = build_backend(&config, &next.gate);
        } else {
            if config.embedding.provider != self.config.embedding.provider
                || config.embedding.base_url != self.config.embedding.base_url
                || config.embedding.model != self.config.embedding.model
                || config.embedding.api_key_env != self.config.embedding.api_key_env
                || config.embedding.test_dim != self.config.embedding.test_dim
                || config.embedding.timeout_ms != self.config.embedding.timeout_ms
                || config.embedding.max_in_flight != self.config.embedding.max_in_flight
            {
                next.embedder = build_embedder(&config, &next.gate);
            }
            let l0 = &self.config.llm;
            let l1 = &config.llm;
            if l1.provider != l0.provider
                || l1.endpoint() != l0.endpoint()
                || l1.api_key_env != l0.api_key_env
                || l1.timeout_ms != l0.timeout_ms
                || l1.max_in_flight != l0.max_in_flight
                || l1.mock_rules != l0.mock_rules
            {
                next.backend = build_backend(&config, &next.gate);
            }
        }
        next.config = config;
        Ok(next)
    }

    pub fn config(&self) -> &AppConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<VectorStore> {
        &self.store
    }

    pub fn counter(&self) -> &SharedCounter {
        &self.counter
    }

    pub fn embedder(&self) -> &SharedEmbedder {
        &self.embedder
    }

    pub fn backend(&self) -> &SharedBackend {
        &self.backend
    }

    /// Outbound request gate shared by the HTTP providers of this pipeline.
    pub fn gate(&self) -> &Arc<OutboundGate> {
        &self.gate
    }

    /// Vector dimension of the embedding provider, probing it if unknown.
    pub fn dimension(&self) -> Result<usize, PipelineError> {
        if let Some(d) = self.embedder.dimension() {
            return Ok(d);
        }
        Ok(embed_texts(self.embedder.as_ref(), &["dimension probe"])?[0].dim())
    }

    pub fn create_session(&self) -> Result<String, PipelineError> {
        Ok(self.store.create_session(self.dimension()?)?)
    }

    /// Loads documents from disk, skipping repeated paths.
    pub fn load_documents(&self, paths: &[PathBuf]) -> Result<Vec<Document>, PipelineError> {
        let mut seen = HashSet::new();
        let mut docs = Vec::new();
        for p in paths {
            if seen.insert(p.clone()) {
                docs.push(load_document(p, DocumentKind::infer(p))?);
            }
        }
        Ok(docs)
    }

    pub fn chunk_documents(&self, docs: &[Document]) -> Result<Vec<Chunk>, PipelineError> {
        let cfg = self.config.chunk.to_chunking();
        let mut out = Vec::new();
        for d in docs {
            out.extend(split_chunks(d, &cfg, self.counter.as_ref())?);
        }
        Ok(out)
    }

    pub fn embed_chunks(&self, chunks: Vec<Chunk>) -> Result<Vec<EmbeddedChunk>, PipelineError> {
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let vectors = embed_texts(self.embedder.as_ref(), &texts)?;
        Ok(chunks
            .into_iter()
            .zip(vectors)
            .map(|(chunk, vector)| EmbeddedChunk { chunk, vector })
            .collect())
    }

    /// Chunks, embeds and ingests `docs` into an existing session.
    pub fn ingest_documents(&self, session: &str, docs: &[Document]) -> Result<IngestStats, PipelineError> {
        let t = Instant::now();
        let chunks = self.chunk_documents(docs)?;
        let chunk_ms = ms(t);
        let t = Instant::now();
        let embedded = self.embed_chunks(chunks)?;
        let embed_ms = ms(t);
        let t = Instant::now();
        let n = if embedded.is_empty() {
            0
        } else {
            self.store.ingest(session, embedded)?
        };
        Ok(IngestStats {
            documents: docs.len(),
            chunks: n,
            chunk_ms,
            embed_ms,
            index_ms: ms(t),
        })
    }

    fn query_text<'b>(&self, bundle: &'b QueryBundle) -> &'b str {
        match self.config.embedding.query_source {
            QuerySource::Question => &bundle.question,
            QuerySource::Prompt => &bundle.prompt,
        }
    }

    /// Retrieval, re-ranking and generation against a populated session.
    /// Backend failures produce a failed record rather than an error.
    pub fn query_session(&self, session: &str, bundle: &QueryBundle) -> Result<AnswerRecord, PipelineError> {
        let cfg = &self.config;
        let started = Instant::now();
        let mut timings = StageTimings::default();
        let mut warnings = Vec::new();

        let t = Instant::now();
        let hyde = Hyde {
            backend: self.backend.as_ref(),
            template: &cfg.embedding.hyde_template,
            params: cfg.llm.params(),
            retry: cfg.llm.retry(),
        };
        let q = query_embedding(
            self.query_text(bundle),
            bundle.embedding_mode,
            self.embedder.as_ref(),
            Some(&hyde),
        )?;
        warnings.extend(q.warnings.iter().cloned());
        timings.embed_ms = ms(t);

        let t = Instant::now();
        let pool = self.store.search(session, &q.vector, cfg.mmr.fetch_pool)?;
        let candidates = mmr_select(&pool, &q.vector, &cfg.mmr);
        timings.retrieve_ms = ms(t);

        let t = Instant::now();
        let reranked = rerank(&candidates, &q.vector, &cfg.pr, self.counter.as_ref());
        timings.rerank_ms = ms(t);
        let pack: &ContextPack = &reranked.pack;
        if pack.chunks.is_empty() {
            warnings.push("empty context: no chunks survived retrieval".into());
        }
        if reranked.uniform_personalization {
            warnings.push("all query similarities clipped to zero; uniform personalization used".into());
        }
        if !reranked.ranks.converged {
            warnings.push(format!(
                "pagerank stopped after {} iterations (residual {:.3e})",
                reranked.ranks.iterations, reranked.ranks.residual
            ));
        }

        let prompt = build_prompt(pack, &bundle.prompt);
        let t = Instant::now();
        let generated = generate(self.backend.as_ref(), &prompt, &cfg.llm.params(), &cfg.llm.retry());
        timings.generate_ms = ms(t);

        let (status, prediction, attempts, error) = match generated {
            Ok(g) => {
                if g.clamped {
                    warnings.push("backend reported a clamped sampling temperature".into());
                }
                (RecordStatus::Ok, g.text, g.attempts, None)
            }
            Err(e) => {
                warnings.push(format!("generation failed: {e}"));
                (RecordStatus::Failed, String::new(), e.attempts(), Some(e.to_string()))
            }
        };
        let parsed_label = match (&bundle.options, status) {
            (Some(opts), RecordStatus::Ok) if !opts.is_empty() => extract_choice(&prediction, opts),
            _ => None,
        };
        let (snippets, source_files) = provenance_of(pack);
        timings.total_ms = ms(started);

        Ok(AnswerRecord {
            instance_id: None,
            session_id: session.to_string(),
            status,
            question: bundle.question.clone(),
            options: bundle.options.clone(),
            query_string: bundle.prompt.clone(),
            prediction,
            parsed_label,
            gold: None,
            correct: None,
            difficulty: None,
            embedding_mode: bundle.embedding_mode,
            effective_embedding_mode: q.mode,
            hyde_passage: q.hyde_passage,
            source_files,
            rank_scores: pack.chunks.iter().map(|c| c.rank_score).collect(),
            snippets,
            context_tokens: pack.token_count,
            context_truncated: pack.truncated,
            ranking: RankingTrace {
                pool_size: pool.len(),
                mmr_ids: candidates.iter().map(|c| c.chunk.id.clone()).collect(),
                edges: reranked.edges,
                iterations: reranked.ranks.iterations,
                residual: reranked.ranks.residual,
                stationarity: reranked.ranks.stationarity,
                converged: reranked.ranks.converged,
                uniform_personalization: reranked.uniform_personalization,
            },
            attempts,
            timings,
            config_snapshot: cfg.to_json(),
            warnings,
            error,
        })
    }

    /// Appends the answer to the store's provenance log, if it has one.
    pub fn record_answer(&self, rec: &AnswerRecord) {
        if let Some(log) = self.store.provenance() {
            log.append(&ProvenanceEvent::AnswerRecorded {
                session_id: rec.session_id.clone(),
                instance_id: rec.instance_id.clone(),
                prediction: rec.prediction.clone(),
                source_files: rec.source_files.clone(),
                chunk_ids: rec.snippets.iter().map(|s| s.chunk_id.clone()).collect(),
                at: Utc::now(),
            });
        }
    }

    /// One question over a fresh ephemeral session that is destroyed
    /// before returning, whatever happens. Only unreadable input is an error;
    /// later stage failures yield a failed record.
    pub fn answer(
        &self,
        docs: &[PathBuf],
        bundle: &QueryBundle,
        instance_id: Option<&str>,
    ) -> Result<AnswerRecord, PipelineError> {
        let started = Instant::now();
        let t = Instant::now();
        let documents = self.load_documents(docs)?;
        let load_ms = ms(t);

        let dimension = self.dimension();
        let session = match dimension.and_then(|d| Ok(self.store.create_session(d)?)) {
            Ok(s) => s,
            Err(e) => return Ok(self.failed_record(bundle, instance_id, "", &e, started)),
        };
        let guard = SessionGuard {
            store: &self.store,
            id: session,
        };
        let mut rec = match self.ingest_documents(&guard.id, &documents) {
            Err(e) => self.failed_record(bundle, instance_id, &guard.id, &e, started),
            Ok(stats) => match self.query_session(&guard.id, bundle) {
                Err(e) => self.failed_record(bundle, instance_id, &guard.id, &e, started),
                Ok(mut rec) => {
                    rec.timings.chunk_ms = load_ms + stats.chunk_ms;
                    rec.timings.embed_ms += stats.embed_ms;
                    rec.timings.index_ms = stats.index_ms;
                    if stats.chunks == 0 {
                        rec.warnings.insert(0, "no background documents ingested".into());
                    }
                    rec
                }
            },
        };
        rec.instance_id = instance_id.map(str::to_string);
        rec.timings.total_ms = ms(started);
        self.record_answer(&rec);
        drop(guard);
        Ok(rec)
    }

    fn failed_record(
        &self,
        bundle: &QueryBundle,
        instance_id: Option<&str>,
        session: &str,
        err: &PipelineError,
        started: Instant,
    ) -> AnswerRecord {
        tracing::warn!(instance = ?instance_id, error = %err, "pipeline stage failed");
        AnswerRecord {
            instance_id: instance_id.map(str::to_string),
            session_id: session.to_string(),
            status: RecordStatus::Failed,
            question: bundle.question.clone(),
            options: bundle.options.clone(),
            query_string: bundle.prompt.clone(),
            prediction: String::new(),
            parsed_label: None,
            gold: None,
            correct: None,
            difficulty: None,
            embedding_mode: bundle.embedding_mode,
            effective_embedding_mode: bundle.embedding_mode,
            hyde_passage: None,
            source_files: Vec::new(),
            snippets: Vec::new(),
            rank_scores: Vec::new(),
            context_tokens: 0,
            context_truncated: false,
            ranking: RankingTrace::default(),
            attempts: match err {
                PipelineError::Generation(g) => g.attempts(),
                _ => 0,
            },
            timings: StageTimings {
                total_ms: ms(started),
                ..Default::default()
            },
            config_snapshot: self.config.to_json(),
            warnings: vec![err.to_string()],
            error: Some(err.to_string()),
        }
    }

    pub fn bundle_for(&self, inst: &EvalInstance) -> Result<QueryBundle, PipelineError> {
        let instruction = if inst.is_mcq() {
            &self.config.llm.instruction
        } else {
            &self.config.llm.open_instruction
        };
        Ok(QueryBundle::new(
            inst.question.clone(),
            inst.options.clone().filter(|o| !o.is_empty()),
            instruction.clone(),
            self.config.embedding.mode,
        )?)
    }

    /// The full per-instance protocol. The gold answer is attached to the
    /// record only after generation; it never reaches retrieval or the
    /// backend.
    pub fn run_instance(&self, inst: &EvalInstance) -> Result<AnswerRecord, PipelineError> {
        let bundle = self.bundle_for(inst)?;
        let mut rec = self.answer(&inst.background_docs, &bundle, Some(&inst.id))?;
        rec.gold = Some(inst.gold.clone());
        rec.difficulty = inst.difficulty.clone();
        rec.correct = Some(match inst.gold_label() {
            Some(g) => rec.parsed_label == Some(g),
            None => rec.status == RecordStatus::Ok && !rec.prediction.trim().is_empty(),
        });
        Ok(rec)
    }

    /// Record for an instance whose input could not be read.
    pub fn unreadable_record(&self, inst: &EvalInstance, err: &PipelineError) -> AnswerRecord {
        let bundle = self.bundle_for(inst).unwrap_or_else(|_| QueryBundle {
            question: inst.question.clone(),
            options: inst.options.clone(),
            instruction: String::new(),
            prompt: inst.question.clone(),
            embedding_mode: self.config.embedding.mode,
        });
        let mut rec = self.failed_record(&bundle, Some(&inst.id), "", err, Instant::now());
        rec.gold = Some(inst.gold.clone());
        rec.difficulty = inst.difficulty.clone();
        rec.correct = Some(false);
        rec
    }

    /// Runs every instance, streaming records to `results` (if given) in
    /// completion order followed by one summary line. Records are returned
    /// in input order.
    pub fn run_batch(&self, dataset: &[EvalInstance], results: Option<&Path>) -> Result<BatchOutcome, PipelineError> {
        if dataset.is_empty() {
            return Err(DatasetError::Empty.into());
        }
        let mut writer = match results {
            Some(p) => Some(ResultsWriter::create(p)?),
            None => None,
        };
        let workers = self.config.eval.parallelism.min(dataset.len()).max(1);
        let mut slots: Vec<Option<AnswerRecord>> = vec![None; dataset.len()];
        let run_one = |i: usize| {
            self.run_instance(&dataset[i])
                .unwrap_or_else(|e| self.unreadable_record(&dataset[i], &e))
        };
        if workers == 1 {
            for (i, slot) in slots.iter_mut().enumerate() {
                let rec = run_one(i);
                if let Some(w) = writer.as_mut() {
                    w.write_record(&rec)?;
                }
                *slot = Some(rec);
            }
        } else {
            let next = AtomicUsize::new(0);
            let (tx, rx) = mpsc::channel::<(usize, AnswerRecord)>();
            std::thread::scope(|scope| -> Result<(), PipelineError> {
                for _ in 0..workers {
                    let tx = tx.clone();
                    let next = &next;
                    let run_one = &run_one;
                    scope.spawn(move || loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= dataset.len() || tx.send((i, run_one(i))).is_err() {
                            break;
                        }
                    });
                }
                drop(tx);
                for (i, rec) in rx {
                    if let Some(w) = writer.as_mut() {
                        w.write_record(&rec)?;
                    }
                    slots[i] = Some(rec);
                }
                Ok(())
            })?;
        }
        let records: Vec<AnswerRecord> = slots.into_iter().map(|r| r.expect("every instance ran")).collect();
        let report = score_records(dataset, &records, self.config.metrics.rouge_n)?;
        if let Some(w) = writer.as_mut() {
            w.write_summary(&report, &self.config)?;
        }
        Ok(BatchOutcome { records, report })
    }

    /// One batch per value with everything else fixed. Every value is
    /// validated before anything runs.
    pub fn run_sweep(
        &self,
        dataset: &[EvalInstance],
        spec: &SweepSpec,
        results_dir: Option<&Path>,
    ) -> Result<SweepTable, PipelineError> {
        let configs = spec.configs(&self.config)?;
        if let Some(dir) = results_dir {
            std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
                context: format!("creating {}", dir.display()),
                source,
            })?;
        }
        let mut rows = Vec::with_capacity(configs.len());
        for (value, cfg) in spec.values.iter().zip(configs) {
            let pipeline = self.reconfigured(cfg)?;
            let path = results_dir.map(|d| d.join(format!("{}={}.jsonl", spec.parameter.key(), value)));
            let outcome = pipeline.run_batch(dataset, path.as_deref())?;
            let latency = outcome.records.iter().map(|r| r.timings.total_ms).sum::<f64>() / outcome.records.len() as f64;
            rows.push(SweepRow {
                parameter: spec.parameter.key().to_string(),
                value: value.to_string(),
                accuracy: outcome.report.accuracy,
                macro_f1: outcome.report.macro_f1,
                rouge_l: outcome.report.rouge_l,
                rouge_n: outcome.report.rouge_n,
                mean_latency_ms: latency,
                report: outcome.report,
            });
        }
        Ok(SweepTable { rows })
    }
}

/// Metrics over records paired with their instances.
pub fn score_records(
    dataset: &[EvalInstance],
    records: &[AnswerRecord],
    rouge_n: usize,
) -> Result<MetricReport, PipelineError> {
    let outcomes: Vec<ScoredOutcome> = dataset
        .iter()
        .zip(records)
        .map(|(inst, rec)| ScoredOutcome {
            outcome: match inst.gold_label() {
                Some(gold) => Outcome::Choice {
                    predicted: rec.parsed_label,
                    gold,
                },
                None => Outcome::Open {
                    prediction: rec.prediction.clone(),
                    reference: inst.gold.clone(),
                },
            },
            difficulty: inst.difficulty.clone(),
            failed: rec.status == RecordStatus::Failed,
        })
        .collect();
    Ok(MetricReport::from_outcomes(&outcomes, rouge_n)?)
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub records: Vec<AnswerRecord>,
    pub report: MetricReport,
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    summary: &'a MetricReport,
    config: Value,
}

/// Line-per-record results file; each line is flushed as written so a
/// killed run leaves only complete records behind.
pub struct ResultsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl ResultsWriter {
    pub fn create(path: &Path) -> Result<Self, PipelineError> {
        let io = |source| PipelineError::Io {
            context: format!("creating results file {}", path.display()),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(File::create(path).map_err(io)?),
        })
    }

    fn write_line<T: Serialize>(&mut self, value: &T) -> Result<(), PipelineError> {
        let mut line = serde_json::to_vec(value).expect("records serialize");
        line.push(b'\n');
        self.out
            .write_all(&line)
            .and_then(|_| self.out.flush())
            .map_err(|source| PipelineError::Io {
                context: format!("writing {}", self.path.display()),
                source,
            })
    }

    pub fn write_record(&mut self, rec: &AnswerRecord) -> Result<(), PipelineError> {
        self.write_line(rec)
    }

    pub fn write_summary(&mut self, report: &MetricReport, cfg: &AppConfig) -> Result<(), PipelineError> {
        self.write_line(&SummaryLine {
            summary: report,
            config: cfg.to_json(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalInstance {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub options: Option<Vec<McqOption>>,
    /// Option label for multiple choice, reference text otherwise.
    pub gold: String,
    #[serde(default)]
    pub difficulty: Option<String>,
    #[serde(default)]
    pub background_docs: Vec<PathBuf>,
}

pub const DIFFICULTIES: [&str; 3] = ["easy", "medium", "hard"];

impl EvalInstance {
    pub fn is_mcq(&self) -> bool {
        self.options.as_ref().is_some_and(|o| !o.is_empty())
    }

    pub fn gold_label(&self) -> Option<Label> {
        if self.is_mcq() {
            self.gold.parse().ok()
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.question.trim().is_empty() {
            return Err("question is empty".into());
        }
        if let Some(d) = &self.difficulty {
            if !DIFFICULTIES.contains(&d.as_str()) {
                return Err(format!("difficulty {d:?} is not one of easy, medium, hard"));
            }
        }
        if self.is_mcq() {
            let opts = self.options.as_deref().unwrap_or_default();
            let mut seen = HashSet::new();
            if let Some(dup) = opts.iter().find(|o| !seen.insert(o.label)) {
                return Err(format!("duplicate option label {}", dup.label));
            }
            let gold: Label = self
                .gold
                .parse()
                .map_err(|_| format!("gold {:?} is not an option label", self.gold))?;
            if !opts.iter().any(|o| o.label == gold) {
                return Err(format!("gold label {gold} is not among the options"));
            }
        } else if self.gold.trim().is_empty() {
            return Err("open-ended instance has an empty reference answer".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("dataset contains no instances")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIssue {
    pub line: usize,
    pub message: String,
}

/// Parses line-delimited instances. In strict mode the first bad line is an
/// error; otherwise bad lines are skipped and reported.
pub fn parse_dataset(text: &str, strict: bool) -> Result<(Vec<EvalInstance>, Vec<DatasetIssue>), DatasetError> {
    let mut out = Vec::new();
    let mut issues = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<EvalInstance>(line)
            .map_err(|e| e.to_string())
            .and_then(|inst| inst.validate().map(|_| inst))
            .and_then(|inst| {
                if ids.insert(inst.id.clone()) {
                    Ok(inst)
                } else {
                    Err(format!("duplicate id {:?}", inst.id))
                }
            });
        match parsed {
            Ok(inst) => out.push(inst),
            Err(message) if strict => return Err(DatasetError::Malformed { line: i + 1, message }),
            Err(message) => {
                tracing::warn!(line = i + 1, %message, "skipping dataset line");
                issues.push(DatasetIssue { line: i + 1, message });
            }
        }
    }
    if out.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok((out, issues))
}

/// Reads a dataset file. Relative `background_docs` paths are resolved
/// against the dataset's directory.
pub fn load_dataset(path: &Path, strict: bool) -> Result<(Vec<EvalInstance>, Vec<DatasetIssue>), DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (mut instances, issues) = parse_dataset(&text, strict)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for inst in &mut instances {
        for doc in &mut inst.background_docs {
            if doc.is_relative() {
                *doc = base.join(&*doc);
            }
        }
    }
    Ok((instances, issues))
}

/// Parameters that can be swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "pr.top_k")]
    PrTopK,
    #[serde(rename = "chunk.overlap")]
    ChunkOverlap,
    #[serde(rename = "llm.max_new_tokens")]
    MaxNewTokens,
    #[serde(rename = "mmr.k")]
    MmrK,
    #[serde(rename = "pr.alpha")]
    PrAlpha,
    #[serde(rename = "pr.min_sim")]
    PrMinSim,
}

impl SweepParam {
    pub const ALL: [SweepParam; 6] = [
        SweepParam::PrTopK,
        SweepParam::ChunkOverlap,
        SweepParam::MaxNewTokens,
        SweepParam::MmrK,
        SweepParam::PrAlpha,
        SweepParam::PrMinSim,
    ];

    pub fn key(self) -> &'static str {
        match self {
            SweepParam::PrTopK => "pr.top_k",
            SweepParam::ChunkOverlap => "chunk.overlap",
            SweepParam::MaxNewTokens => "llm.max_new_tokens",
            SweepParam::MmrK => "mmr.k",
            SweepParam::PrAlpha => "pr.alpha",
            SweepParam::PrMinSim => "pr.min_sim",
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, SweepParam::PrAlpha | SweepParam::PrMinSim)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SweepParam::ALL
            .into_iter()
            .find(|p| p.key() == s.trim())
            .ok_or_else(|| DatasetError::Malformed {
                line: 0,
                message: format!(
                    "unknown sweep parameter {s:?}; expected one of {}",
                    SweepParam::ALL.map(|p| p.key()).join(", ")
                ),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    pub values: Vec<f64>,
}

fn sweep_error(message: String) -> PipelineError {
    PipelineError::Config(ConfigError::Invalid(message))
}

impl SweepSpec {
    /// `param=v1,v2,...`.
    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        let (name, values) = s
            .split_once('=')
            .ok_or_else(|| sweep_error(format!("sweep {s:?} is not of the form parameter=v1,v2,...")))?;
        let parameter: SweepParam = name.parse().map_err(|e: DatasetError| sweep_error(e.to_string()))?;
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| sweep_error(format!("sweep value {v:?} is not a number")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let spec = Self { parameter, values };
        spec.check_shape()?;
        Ok(spec)
    }

    fn check_shape(&self) -> Result<(), PipelineError> {
        if self.values.is_empty() {
            return Err(sweep_error("sweep needs at least one value".into()));
        }
        if self.parameter.is_integer() {
            if let Some(v) = self.values.iter().find(|v| v.fract() != 0.0 || **v < 0.0) {
                return Err(sweep_error(format!(
                    "{} takes non-negative integers (got {v})",
                    self.parameter.key()
                )));
            }
        }
        Ok(())
    }

    /// One validated configuration per value.
    pub fn configs(&self, base: &AppConfig) -> Result<Vec<AppConfig>, PipelineError> {
        self.check_shape()?;
        self.values
            .iter()
            .map(|&v| {
                let value = if self.parameter.is_integer() {
                    Value::from(v as u64)
                } else {
                    Value::from(v)
                };
                let mut cfg = base.with_override(self.parameter.key(), value)?;
                // Widen the candidate pool when it would cap the swept value.
                if self.parameter == SweepParam::MmrK && cfg.mmr.fetch_pool < cfg.mmr.k {
                    cfg.mmr.fetch_pool = cfg.mmr.k;
                }
                Ok(cfg)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub rouge_l: f64,
    pub rouge_n: f64,
    pub mean_latency_ms: f64,
    #[serde(skip)]
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("rows serialize");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<20} {:>8} {:>9} {:>9} {:>8} {:>8} {:>12}\n",
            "parameter", "value", "accuracy", "macro_f1", "rouge_l", "rouge_n", "latency_ms"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<20} {:>8} {:>9.4} {:>9.4} {:>8.4} {:>8.4} {:>12.3}\n",
                r.parameter, r.value, r.accuracy, r.macro_f1, r.rouge_l, r.rouge_n, r.mean_latency_ms
            ));
        }
        out
    }
}
