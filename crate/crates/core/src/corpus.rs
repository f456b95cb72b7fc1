//! Document loading, text normalization and token-bounded chunking.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tokenizer::TokenCounter;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed page record on line {line}: {reason}")]
    MalformedSidecar {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{0}: document is empty")]
    EmptyDocument(PathBuf),
    #[error("invalid chunking config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DocumentKind {
    PlainText,
    Markdown,
    /// Text already extracted from a PDF, one record per page.
    PdfPages,
}

impl DocumentKind {
    /// `.pages.jsonl` → pdf pages, `.md`/`.markdown` → markdown, anything else plain text.
    pub fn infer(path: &Path) -> Self {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if name.ends_with(".pages.jsonl") {
            DocumentKind::PdfPages
        } else if name.ends_with(".md") || name.ends_with(".markdown") {
            DocumentKind::Markdown
        } else {
            DocumentKind::PlainText
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub number: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub path: String,
    pub kind: DocumentKind,
    pub pages: Vec<Page>,
}

impl Document {
    /// Single-page document from in-memory text (uploads, tests).
    pub fn from_text(id: impl Into<String>, path: impl Into<String>, text: impl Into<String>) -> Self {
        let path = path.into();
        let kind = DocumentKind::infer(Path::new(&path));
        let kind = if kind == DocumentKind::PdfPages {
            DocumentKind::PlainText
        } else {
            kind
        };
        Self {
            id: id.into(),
            path,
            kind,
            pages: vec![Page {
                number: 1,
                text: text.into(),
            }],
        }
    }

    /// Final path component, used as the citation name.
    pub fn filename(&self) -> String {
        Path::new(&self.path)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.clone())
    }
}

#[derive(Deserialize)]
struct PageRecord {
    page: u32,
    text: String,
}

pub fn load_document(path: impl AsRef<Path>, kind: DocumentKind) -> Result<Document, CorpusError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_document(&path.display().to_string(), &raw, kind)
}

/// Builds a document from text already in memory; `path` becomes its id.
pub fn parse_document(path: &str, raw: &str, kind: DocumentKind) -> Result<Document, CorpusError> {
    let p = Path::new(path);
    let pages = match kind {
        DocumentKind::PlainText | DocumentKind::Markdown => {
            if raw.trim().is_empty() {
                return Err(CorpusError::EmptyDocument(p.to_path_buf()));
            }
            vec![Page {
                number: 1,
                text: raw.to_string(),
            }]
        }
        DocumentKind::PdfPages => parse_page_sidecar(p, raw)?,
    };
    Ok(Document {
        id: path.to_string(),
        path: path.to_string(),
        kind,
        pages,
    })
}

fn parse_page_sidecar(path: &Path, raw: &str) -> Result<Vec<Page>, CorpusError> {
    let mut pages: Vec<Page> = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| CorpusError::MalformedSidecar {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: PageRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let expected_min = pages.last().map_or(1, |p| p.number + 1);
        if rec.page < expected_min {
            return Err(malformed(format!(
                "page {} is not strictly increasing from 1 (expected >= {expected_min})",
                rec.page
            )));
        }
        pages.push(Page {
            number: rec.page,
            text: rec.text,
        });
    }
    if pages.iter().all(|p| p.text.trim().is_empty()) {
        return Err(CorpusError::EmptyDocument(path.to_path_buf()));
    }
    Ok(pages)
}

/// Single line breaks become spaces, two or more collapse to a paragraph
/// break (`\n\n`), horizontal whitespace runs collapse to one space, and the
/// ends are trimmed.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut chars = raw.chars().peekable();
    while let Some(c) = chars.next() {
        if !c.is_whitespace() {
            out.push(c);
            continue;
        }
        let mut newlines = 0;
        let mut cur = c;
        loop {
            match cur {
                '\n' => newlines += 1,
                // \r\n counts once; a lone \r is a line break of its own
                '\r' if chars.peek() != Some(&'\n') => newlines += 1,
                _ => {}
            }
            match chars.peek() {
                Some(&n) if n.is_whitespace() => {
                    cur = n;
                    chars.next();
                }
                _ => break,
            }
        }
        out.push_str(if newlines >= 2 { "\n\n" } else { " " });
    }
    let trimmed = out.trim();
    if trimmed.len() == out.len() {
        out
    } else {
        trimmed.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub max_tokens: usize,
    pub overlap: usize,
    pub separators: Vec<String>,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            max_tokens: 300,
            overlap: 30,
            separators: default_separators(),
        }
    }
}

pub fn default_separators() -> Vec<String> {
    ["\n\n", ". ", " ", ""].iter().map(|s| s.to_string()).collect()
}

/// A multi-byte character can cost up to four byte-level tokens.
pub const MIN_CHUNK_TOKENS: usize = 4;

impl ChunkingConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.max_tokens < MIN_CHUNK_TOKENS {
            return Err(CorpusError::InvalidConfig(format!(
                "max_tokens must be at least {MIN_CHUNK_TOKENS} (got {})",
                self.max_tokens
            )));
        }
        if self.overlap >= self.max_tokens {
            return Err(CorpusError::InvalidConfig(format!(
                "overlap ({}) must be smaller than max_tokens ({})",
                self.overlap, self.max_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub doc_id: String,
    pub filename: String,
    pub page: u32,
    pub seq: usize,
    pub text: String,
    pub token_len: usize,
    /// Byte span of `text` within the normalized page text.
    pub start: usize,
    pub end: usize,
    /// Tokens shared with the previous chunk on the same page. Differs from
    /// the configured overlap when separator boundaries prevent an exact cut.
    pub overlap_tokens: usize,
}

pub fn chunk_id(doc_id: &str, seq: usize) -> String {
    format!("{doc_id}#{seq:05}")
}

/// Splits each normalized page into chunks of at most `max_tokens` tokens.
///
/// Chunks are exact slices of the normalized page: consecutive chunks on a
/// page overlap by roughly `overlap` tokens, and dropping each chunk's
/// overlap prefix and concatenating reconstructs the page.
pub fn split_chunks(
    doc: &Document,
    cfg: &ChunkingConfig,
    counter: &dyn TokenCounter,
) -> Result<Vec<Chunk>, CorpusError> {
    cfg.validate()?;
    let filename = doc.filename();
    let mut chunks = Vec::new();
    for page in &doc.pages {
        let text = normalize_text(&page.text);
        if text.is_empty() {
            tracing::warn!(doc = %doc.id, page = page.number, "skipping empty page");
            continue;
        }
        for span in split_page(&text, cfg, counter) {
            let seq = chunks.len();
            let body = &text[span.start..span.end];
            chunks.push(Chunk {
                id: chunk_id(&doc.id, seq),
                doc_id: doc.id.clone(),
                filename: filename.clone(),
                page: page.number,
                seq,
                token_len: counter.count(body),
                text: body.to_string(),
                start: span.start,
                end: span.end,
                overlap_tokens: span.overlap_tokens,
            });
        }
    }
    Ok(chunks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Span {
    pub start: usize,
    pub end: usize,
    pub overlap_tokens: usize,
}

struct Splitter<'a> {
    text: &'a str,
    max: usize,
    overlap: usize,
    separators: Vec<&'a str>,
    counter: &'a dyn TokenCounter,
}

pub(crate) fn split_page(text: &str, cfg: &ChunkingConfig, counter: &dyn TokenCounter) -> Vec<Span> {
    let mut separators: Vec<&str> = cfg.separators.iter().map(String::as_str).collect();
    if separators.last() != Some(&"") {
        separators.push("");
    }
    let splitter = Splitter {
        text,
        max: cfg.max_tokens,
        overlap: cfg.overlap,
        separators,
        counter,
    };
    let mut units = Vec::new();
    splitter.atomize(0, text.len(), 0, &mut units);
    splitter.merge(&units)
}

impl Splitter<'_> {
    fn tokens(&self, start: usize, end: usize) -> usize {
        self.counter.count(&self.text[start..end])
    }

    /// Breaks `[start, end)` into contiguous units that each fit in `max`,
    /// descending the separator hierarchy only where a piece is too long.
    fn atomize(&self, start: usize, end: usize, level: usize, out: &mut Vec<(usize, usize)>) {
        if start >= end {
            return;
        }
        if self.tokens(start, end) <= self.max {
            out.push((start, end));
            return;
        }
        let Some(&sep) = self.separators.get(level) else {
            out.push((start, end));
            return;
        };
        if sep.is_empty() {
            // Character fallback for separator-free runs longer than `max`.
            let span = &self.text[start..end];
            let mut it = span.char_indices().peekable();
            while let Some((i, _)) = it.next() {
                let j = it.peek().map_or(span.len(), |&(j, _)| j);
                out.push((start + i, start + j));
            }
            return;
        }
        // Whitespace of a separator travels with the next piece: a cut for
        // ". " lands after the period, a cut for " " before the space.
        let keep = sep.trim_end().len();
        let span = &self.text[start..end];
        let mut cuts = vec![start];
        for (idx, _) in span.match_indices(sep) {
            let cut = start + idx + keep;
            if cut > *cuts.last().unwrap() && cut < end {
                cuts.push(cut);
            }
        }
        cuts.push(end);
        if cuts.len() == 2 {
            self.atomize(start, end, level + 1, out);
            return;
        }
        for w in cuts.windows(2) {
            let (s, e) = (w[0], w[1]);
            if self.tokens(s, e) <= self.max {
                out.push((s, e));
            } else {
                self.atomize(s, e, level + 1, out);
            }
        }
    }

    /// Greedy packing of units into chunks, then overlap selection.
    fn merge(&self, units: &[(usize, usize)]) -> Vec<Span> {
        let mut spans = Vec::new();
        if units.is_empty() {
            return spans;
        }
        let mut start = units[0].0;
        let mut overlap_tokens = 0;
        let mut next = 0;
        while next < units.len() {
            // `last` is the final unit index that still fits with `start`.
            let last = self.furthest_fit(start, units, next);
            let end = units[last].1;
            spans.push(Span {
                start,
                end,
                overlap_tokens,
            });
            next = last + 1;
            if next >= units.len() {
                break;
            }
            let (s, ov) = self.overlap_start(start, end, units[next].1, units);
            start = s;
            overlap_tokens = ov;
        }
        spans
    }

    /// Largest `j >= first` with ℓ(text[start..units[j].end]) ≤ max, found by
    /// galloping then bisection. `units[first]` alone always fits.
    fn furthest_fit(&self, start: usize, units: &[(usize, usize)], first: usize) -> usize {
        let fits = |j: usize| self.tokens(start, units[j].1) <= self.max;
        let mut good = first;
        let mut step = 1;
        let mut bad = loop {
            let probe = good + step;
            if probe >= units.len() {
                break units.len();
            }
            if fits(probe) {
                good = probe;
                step *= 2;
            } else {
                break probe;
            }
        };
        while bad - good > 1 {
            let mid = good + (bad - good) / 2;
            if fits(mid) {
                good = mid;
            } else {
                bad = mid;
            }
        }
        // Bisection assumes ℓ is monotone in the prefix; confirm the answer.
        while good > first && !fits(good) {
            good -= 1;
        }
        good
    }

    /// Picks where the next chunk starts inside the previous chunk
    /// `[prev_start, prev_end)`: the word or unit boundary whose trailing
    /// token count is closest to the configured overlap, provided the next
    /// chunk (ending at `next_end`) still fits.
    fn overlap_start(
        &self,
        prev_start: usize,
        prev_end: usize,
        next_end: usize,
        units: &[(usize, usize)],
    ) -> (usize, usize) {
        if self.overlap == 0 {
            return (prev_end, 0);
        }
        let mut best = (prev_end, 0usize, self.overlap);
        let bytes = self.text.as_bytes();
        let mut candidates: Vec<usize> = (prev_start + 1..prev_end)
            .filter(|&p| {
                self.text.is_char_boundary(p)
                    && bytes[p].is_ascii_whitespace()
                    && !bytes[p - 1].is_ascii_whitespace()
            })
            .collect();
        candidates.extend(
            units
                .iter()
                .map(|u| u.0)
                .filter(|&p| p > prev_start && p < prev_end),
        );
        candidates.sort_unstable();
        candidates.dedup();
        for &p in candidates.iter().rev() {
            if self.tokens(p, next_end) > self.max {
                break;
            }
            let ov = self.tokens(p, prev_end);
            let diff = ov.abs_diff(self.overlap);
            if diff < best.2 {
                best = (p, ov, diff);
            }
            if ov >= self.overlap {
                break;
            }
        }
        (best.0, best.1)
    }
}
