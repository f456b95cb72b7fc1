//! Ephemeral in-memory vector sessions with exact cosine search.
//!
//! Each QA instance gets its own session; destroying it drops every entry.
//! Sessions are independent: a search only ever sees chunks ingested into
//! the same session.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::Chunk;
use crate::embedding::{EmbeddedChunk, Embedding};
use crate::provenance::{ProvenanceEvent, ProvenanceLog};

/// Cosine similarity, clamped to [-1, 1]. A zero vector scores 0.
///
/// Panics if the lengths differ.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine of vectors with different dimensions");
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        tracing::warn!("cosine similarity with a zero vector; scoring 0");
        return 0.0;
    }
    (dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum IndexError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} has been destroyed")]
    Destroyed(String),
    #[error("session {0} is sealed")]
    Sealed(String),
    #[error("dimension mismatch: session expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate chunk id {0}")]
    DuplicateId(String),
    #[error("session dimension must be positive")]
    ZeroDimension,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Open,
    Sealed,
    Destroyed,
}

#[derive(Debug)]
struct Session {
    dimension: usize,
    entries: Vec<EmbeddedChunk>,
    ids: HashSet<String>,
    created_at: DateTime<Utc>,
    state: SessionState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub dimension: usize,
    pub entries: usize,
    pub documents: usize,
    pub created_at: DateTime<Utc>,
    pub state: SessionState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: Chunk,
    pub vector: Embedding,
    pub score: f64,
}

/// Descending score, then ascending chunk id. `-0.0` and `0.0` tie.
pub fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    (b.0 + 0.0).total_cmp(&(a.0 + 0.0)).then_with(|| a.1.cmp(b.1))
}

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Default)]
pub struct VectorStore {
    sessions: RwLock<HashMap<String, Arc<RwLock<Session>>>>,
    provenance: Option<Arc<ProvenanceLog>>,
}

impl VectorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every create/ingest/destroy appends one event to `log`.
    pub fn with_provenance(log: Arc<ProvenanceLog>) -> Self {
        Self {
            sessions: RwLock::default(),
            provenance: Some(log),
        }
    }

    fn record(&self, event: ProvenanceEvent) {
        if let Some(log) = &self.provenance {
            log.append(&event);
        }
    }

    pub fn provenance(&self) -> Option<&Arc<ProvenanceLog>> {
        self.provenance.as_ref()
    }

    fn session(&self, id: &str) -> Result<Arc<RwLock<Session>>, IndexError> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| IndexError::UnknownSession(id.to_string()))
    }

    pub fn create_session(&self, dimension: usize) -> Result<String, IndexError> {
        if dimension == 0 {
            return Err(IndexError::ZeroDimension);
        }
        let n = NEXT_SESSION.fetch_add(1, AtomicOrdering::SeqCst);
        let id = format!("sess-{:x}-{n:06}", std::process::id());
        let created_at = Utc::now();
        let session = Session {
            dimension,
            entries: Vec::new(),
            ids: HashSet::new(),
            created_at,
            state: SessionState::Open,
        };
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.clone(), Arc::new(RwLock::new(session)));
        self.record(ProvenanceEvent::SessionCreated {
            session_id: id.clone(),
            dimension,
            at: created_at,
        });
        Ok(id)
    }

    /// Appends `items` atomically: the whole call is rejected if any item has
    /// the wrong dimension or a chunk id already present.
    pub fn ingest(&self, id: &str, items: Vec<EmbeddedChunk>) -> Result<usize, IndexError> {
        let session = self.session(id)?;
        let mut s = session.write().unwrap_or_else(|e| e.into_inner());
        match s.state {
            SessionState::Destroyed => return Err(IndexError::Destroyed(id.to_string())),
            SessionState::Sealed => return Err(IndexError::Sealed(id.to_string())),
            SessionState::Open => {}
        }
        let mut batch_ids = HashSet::with_capacity(items.len());
        for item in &items {
            if item.vector.dim() != s.dimension {
                return Err(IndexError::DimensionMismatch {
                    expected: s.dimension,
                    got: item.vector.dim(),
                });
            }
            if s.ids.contains(&item.chunk.id) || !batch_ids.insert(item.chunk.id.as_str()) {
                return Err(IndexError::DuplicateId(item.chunk.id.clone()));
            }
        }
        let count = items.len();
        let mut files: Vec<String> = Vec::new();
        for item in &items {
            if !files.contains(&item.chunk.filename) {
                files.push(item.chunk.filename.clone());
            }
        }
        for item in items {
            s.ids.insert(item.chunk.id.clone());
            s.entries.push(item);
        }
        drop(s);
        self.record(ProvenanceEvent::ChunksIngested {
            session_id: id.to_string(),
            count,
            files,
            at: Utc::now(),
        });
        Ok(count)
    }

    /// Exact top-`n` by cosine similarity, ties broken by ascending chunk id.
    pub fn search(&self, id: &str, query: &[f64], n: usize) -> Result<Vec<ScoredChunk>, IndexError> {
        let session = self.session(id)?;
        let s = session.read().unwrap_or_else(|e| e.into_inner());
        if s.state == SessionState::Destroyed {
            return Err(IndexError::Destroyed(id.to_string()));
        }
        if query.len() != s.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: s.dimension,
                got: query.len(),
            });
        }
        let mut scored: Vec<(f64, usize)> = s
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (cosine(&e.vector, query), i))
            .collect();
        scored.sort_by(|a, b| {
            rank_order(
                (a.0, &s.entries[a.1].chunk.id),
                (b.0, &s.entries[b.1].chunk.id),
            )
        });
        scored.truncate(n);
        Ok(scored
            .into_iter()
            .map(|(score, i)| ScoredChunk {
                chunk: s.entries[i].chunk.clone(),
                vector: s.entries[i].vector.clone(),
                score,
            })
            .collect())
    }

    /// Stops further ingestion; searches keep working.
    pub fn seal(&self, id: &str) -> Result<(), IndexError> {
        let session = self.session(id)?;
        let mut s = session.write().unwrap_or_else(|e| e.into_inner());
        match s.state {
            SessionState::Destroyed => Err(IndexError::Destroyed(id.to_string())),
            _ => {
                s.state = SessionState::Sealed;
                Ok(())
            }
        }
    }

    /// Drops all entries. Destroying an already destroyed session is a no-op.
    pub fn destroy_session(&self, id: &str) -> Result<(), IndexError> {
        let session = self.session(id)?;
        let mut s = session.write().unwrap_or_else(|e| e.into_inner());
        if s.state == SessionState::Destroyed {
            return Ok(());
        }
        let entries = s.entries.len();
        s.entries = Vec::new();
        s.ids = HashSet::new();
        s.state = SessionState::Destroyed;
        drop(s);
        self.record(ProvenanceEvent::SessionDestroyed {
            session_id: id.to_string(),
            entries,
            at: Utc::now(),
        });
        Ok(())
    }

    pub fn info(&self, id: &str) -> Result<SessionInfo, IndexError> {
        let session = self.session(id)?;
        let s = session.read().unwrap_or_else(|e| e.into_inner());
        let documents: HashSet<&str> = s.entries.iter().map(|e| e.chunk.doc_id.as_str()).collect();
        Ok(SessionInfo {
            id: id.to_string(),
            dimension: s.dimension,
            entries: s.entries.len(),
            documents: documents.len(),
            created_at: s.created_at,
            state: s.state,
        })
    }

    /// Ids of sessions that have not been destroyed.
    pub fn live_sessions(&self) -> Vec<String> {
        let map = self.sessions.read().unwrap_or_else(|e| e.into_inner());
        let mut ids: Vec<String> = map
            .iter()
            .filter(|(_, s)| s.read().map(|s| s.state != SessionState::Destroyed).unwrap_or(true))
            .map(|(id, _)| id.clone())
            .collect();
        ids.sort();
        ids
    }

    /// Destroys every live session; returns how many were destroyed.
    pub fn destroy_all(&self) -> usize {
        let ids = self.live_sessions();
        ids.iter().filter(|id| self.destroy_session(id).is_ok()).count()
    }
}
