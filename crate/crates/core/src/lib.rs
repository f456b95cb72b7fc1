//! Local retrieval-augmented question answering.
//!
//! Documents are chunked by token count, embedded into a per-question
//! in-memory vector session, narrowed to a diverse candidate set with
//! maximal marginal relevance, re-ranked by personalized PageRank over the
//! candidates' similarity graph, and packed into a token-budgeted prompt for
//! a chat-completion backend. Each question gets its own session, destroyed
//! once the answer is recorded.

pub mod config;
pub mod corpus;
pub mod embedding;
pub mod evaluation;
pub mod generation;
pub mod metrics;
pub mod mmr;
pub mod net;
pub mod provenance;
pub mod rerank;
pub mod synthetic;
pub mod tokenizer;
pub mod vector_index;

pub use config::AppConfig;
pub use corpus::{load_document, normalize_text, parse_document, split_chunks, Chunk, ChunkingConfig, Document, DocumentKind};
pub use embedding::{Embedding, EmbeddingProvider, HashingEmbedder, QueryEmbeddingMode};
pub use evaluation::{load_dataset, EvalInstance, Pipeline, PipelineError, SweepSpec};
pub use generation::{extract_choice, AnswerRecord, Label, McqOption, MockBackend, QueryBundle};
pub use metrics::{accuracy, macro_f1, rouge_l, rouge_n, MetricReport};
pub use mmr::{mmr_select, MmrConfig};
pub use rerank::{pagerank, rerank, ContextPack, PrConfig};
pub use tokenizer::{BpeCounter, TokenCounter, WhitespaceCounter};
pub use vector_index::{cosine, VectorStore};
