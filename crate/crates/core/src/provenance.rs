//! Append-only line-delimited event log of session lifecycles and answers.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ProvenanceEvent {
    SessionCreated {
        session_id: String,
        dimension: usize,
        at: DateTime<Utc>,
    },
    ChunksIngested {
        session_id: String,
        count: usize,
        files: Vec<String>,
        at: DateTime<Utc>,
    },
    SessionDestroyed {
        session_id: String,
        entries: usize,
        at: DateTime<Utc>,
    },
    AnswerRecorded {
        session_id: String,
        instance_id: Option<String>,
        prediction: String,
        source_files: Vec<String>,
        chunk_ids: Vec<String>,
        at: DateTime<Utc>,
    },
}

impl ProvenanceEvent {
    pub fn session_id(&self) -> &str {
        match self {
            ProvenanceEvent::SessionCreated { session_id, .. }
            | ProvenanceEvent::ChunksIngested { session_id, .. }
            | ProvenanceEvent::SessionDestroyed { session_id, .. }
            | ProvenanceEvent::AnswerRecorded { session_id, .. } => session_id,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProvenanceError {
    #[error("provenance log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("provenance log line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub struct ProvenanceLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl std::fmt::Debug for ProvenanceLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProvenanceLog").field("path", &self.path).finish()
    }
}

impl ProvenanceLog {
    /// Opens (creating parent directories) in append mode.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ProvenanceError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| ProvenanceError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one event as a single line. Failures are logged, not returned:
    /// a full disk must not take down retrieval.
    pub fn append(&self, event: &ProvenanceEvent) {
        let mut line = match serde_json::to_vec(event) {
            Ok(l) => l,
            Err(e) => {
                tracing::error!(error = %e, "cannot serialize provenance event");
                return;
            }
        };
        line.push(b'\n');
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = file.write_all(&line).and_then(|_| file.flush()) {
            tracing::error!(path = %self.path.display(), error = %e, "provenance write failed");
        }
    }

    pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<ProvenanceEvent>, ProvenanceError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| ProvenanceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut events = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| ProvenanceError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(
                serde_json::from_str(&line).map_err(|source| ProvenanceError::Parse { line: i + 1, source })?,
            );
        }
        Ok(events)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SessionLifecycle {
    pub created: bool,
    pub ingested_chunks: usize,
    pub ingest_calls: usize,
    pub destroyed: bool,
    pub answers: usize,
    /// Events recorded after destruction (should stay zero).
    pub after_destroy: usize,
}

/// Folds an event stream into per-session lifecycles.
pub fn replay(events: &[ProvenanceEvent]) -> BTreeMap<String, SessionLifecycle> {
    let mut out: BTreeMap<String, SessionLifecycle> = BTreeMap::new();
    for ev in events {
        let life = out.entry(ev.session_id().to_string()).or_default();
        if life.destroyed && !matches!(ev, ProvenanceEvent::AnswerRecorded { .. }) {
            life.after_destroy += 1;
        }
        match ev {
            ProvenanceEvent::SessionCreated { .. } => life.created = true,
            ProvenanceEvent::ChunksIngested { count, .. } => {
                life.ingested_chunks += count;
                life.ingest_calls += 1;
            }
            ProvenanceEvent::SessionDestroyed { .. } => life.destroyed = true,
            ProvenanceEvent::AnswerRecorded { .. } => life.answers += 1,
        }
    }
    out
}
