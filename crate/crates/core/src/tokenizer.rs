//! Token length functions.
//!
//! Two counters sit behind [`TokenCounter`]: an exact byte-level BPE counter
//! that loads a `.tiktoken` rank file (the p50k_base vocabulary ships in
//! `assets/`), and a whitespace-word counter that needs no asset.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use fancy_regex::Regex;

/// Pre-tokenization pattern shared by the GPT-2 family of vocabularies
/// (r50k/p50k).
const P50K_PATTERN: &str =
    r"'(?:[sdmt]|ll|ve|re)| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+$|\s+(?!\S)|\s";

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("cannot read vocabulary {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed vocabulary line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("vocabulary is missing single-byte token {0:#04x}")]
    MissingByte(u8),
}

/// Length function `ℓ(·)` used for chunking and budget trimming.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;

    /// Longest prefix of `text` (cut on a token boundary and a char boundary)
    /// whose length is at most `max_tokens`.
    fn truncate<'a>(&self, text: &'a str, max_tokens: usize) -> &'a str;

    fn name(&self) -> &'static str;
}

pub type SharedCounter = Arc<dyn TokenCounter>;

/// Counts whitespace-separated words. Approximate, asset-free.
#[derive(Debug, Default, Clone, Copy)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn truncate<'a>(&self, text: &'a str, max_tokens: usize) -> &'a str {
        let mut seen = 0;
        let mut in_word = false;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                in_word = false;
            } else if !in_word {
                if seen == max_tokens {
                    return text[..i].trim_end();
                }
                seen += 1;
                in_word = true;
            }
        }
        text
    }

    fn name(&self) -> &'static str {
        "whitespace"
    }
}

/// Byte-level BPE over a tiktoken rank table.
pub struct BpeCounter {
    ranks: HashMap<Vec<u8>, u32>,
    pattern: Regex,
}

impl std::fmt::Debug for BpeCounter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BpeCounter")
            .field("vocab_size", &self.ranks.len())
            .finish()
    }
}

impl BpeCounter {
    /// Loads a `.tiktoken` file: one `base64(token) rank` pair per line.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tiktoken(&raw)
    }

    pub fn from_tiktoken(contents: &str) -> Result<Self, TokenizerError> {
        let mut ranks = HashMap::with_capacity(50_300);
        for (i, line) in contents.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: &str| TokenizerError::Malformed {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (token, rank) = line
                .split_once(' ')
                .ok_or_else(|| malformed("expected `<base64> <rank>`"))?;
            let bytes = BASE64
                .decode(token)
                .map_err(|e| malformed(&e.to_string()))?;
            let rank: u32 = rank.trim().parse().map_err(|_| malformed("bad rank"))?;
            ranks.insert(bytes, rank);
        }
        // Every byte must be encodable on its own or the merge loop can strand
        // an unknown byte.
        for b in 0..=255u8 {
            if !ranks.contains_key([b].as_slice()) {
                return Err(TokenizerError::MissingByte(b));
            }
        }
        let pattern = Regex::new(P50K_PATTERN).expect("static pattern compiles");
        Ok(Self { ranks, pattern })
    }

    pub fn vocab_size(&self) -> usize {
        self.ranks.len()
    }

    /// Ordinary (no special tokens) encoding into rank ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in self.pieces(text) {
            let bytes = piece.as_bytes();
            if let Some(&rank) = self.ranks.get(bytes) {
                out.push(rank);
                continue;
            }
            let bounds = self.merge(bytes);
            out.extend(bounds.windows(2).map(|w| self.ranks[&bytes[w[0]..w[1]]]));
        }
        out
    }

    fn pieces<'a>(&'a self, text: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        // The pattern has no failure modes on valid UTF-8 besides backtrack
        // limits, which these alternatives cannot hit.
        self.pattern
            .find_iter(text)
            .filter_map(Result::ok)
            .map(|m| m.as_str())
    }

    /// Byte lengths of the tokens of one pre-tokenized piece.
    fn piece_token_lens(&self, piece: &str, out: &mut Vec<usize>) {
        let bytes = piece.as_bytes();
        if self.ranks.contains_key(bytes) {
            out.push(bytes.len());
            return;
        }
        let bounds = self.merge(bytes);
        out.extend(bounds.windows(2).map(|w| w[1] - w[0]));
    }

    fn rank_of(&self, piece: &[u8], bounds: &[usize], i: usize) -> u32 {
        if i + 2 < bounds.len() {
            self.ranks
                .get(&piece[bounds[i]..bounds[i + 2]])
                .copied()
                .unwrap_or(u32::MAX)
        } else {
            u32::MAX
        }
    }

    /// Lowest-rank-first pair merging; returns token boundaries.
    fn merge(&self, piece: &[u8]) -> Vec<usize> {
        let mut bounds: Vec<usize> = (0..=piece.len()).collect();
        let mut pair_ranks: Vec<u32> = (0..bounds.len())
            .map(|i| self.rank_of(piece, &bounds, i))
            .collect();
        loop {
            let mut best = (u32::MAX, 0usize);
            for (i, &r) in pair_ranks.iter().enumerate().take(bounds.len() - 1) {
                if r < best.0 {
                    best = (r, i);
                }
            }
            if best.0 == u32::MAX {
                break;
            }
            let i = best.1;
            bounds.remove(i + 1);
            pair_ranks.remove(i + 1);
            pair_ranks[i] = self.rank_of(piece, &bounds, i);
            if i > 0 {
                pair_ranks[i - 1] = self.rank_of(piece, &bounds, i - 1);
            }
        }
        bounds
    }
}

impl TokenCounter for BpeCounter {
    fn count(&self, text: &str) -> usize {
        let mut lens = Vec::new();
        let mut total = 0;
        for piece in self.pieces(text) {
            if self.ranks.contains_key(piece.as_bytes()) {
                total += 1;
            } else {
                lens.clear();
                self.piece_token_lens(piece, &mut lens);
                total += lens.len();
            }
        }
        total
    }

    fn truncate<'a>(&self, text: &'a str, max_tokens: usize) -> &'a str {
        let mut lens = Vec::new();
        for piece in self.pieces(text) {
            self.piece_token_lens(piece, &mut lens);
            if lens.len() > max_tokens {
                break;
            }
        }
        if lens.len() <= max_tokens {
            return text;
        }
        let mut n = max_tokens;
        loop {
            let mut end: usize = lens[..n].iter().sum();
            while !text.is_char_boundary(end) {
                end -= 1;
            }
            let prefix = &text[..end];
            // Re-encoding a prefix can shift merges; back off until it fits.
            if n == 0 || self.count(prefix) <= max_tokens {
                return prefix;
            }
            n -= 1;
        }
    }

    fn name(&self) -> &'static str {
        "bpe"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_counts_words() {
        let c = WhitespaceCounter;
        assert_eq!(c.count(""), 0);
        assert_eq!(c.count("  a  bb\nccc "), 3);
        assert_eq!(c.truncate("a bb ccc", 2), "a bb");
        assert_eq!(c.truncate("a bb ccc", 0), "");
        assert_eq!(c.truncate("a bb", 5), "a bb");
    }

    #[test]
    fn tiny_vocab_merges_by_rank() {
        // 256 single bytes plus "ab" (rank 256) and "abc" (rank 257).
        let mut lines: Vec<String> = (0..=255u8)
            .map(|b| format!("{} {}", BASE64.encode([b]), b as u32))
            .collect();
        lines.push(format!("{} 256", BASE64.encode(b"ab")));
        lines.push(format!("{} 257", BASE64.encode(b"abc")));
        let bpe = BpeCounter::from_tiktoken(&lines.join("\n")).unwrap();
        assert_eq!(bpe.encode("abc"), vec![257]);
        assert_eq!(bpe.encode("abd"), vec![256, b'd' as u32]);
        assert_eq!(bpe.count("abc abd"), 4);
        assert_eq!(bpe.count(""), 0);
    }

    #[test]
    fn missing_byte_is_rejected() {
        let err = BpeCounter::from_tiktoken(&format!("{} 0", BASE64.encode(b"a"))).unwrap_err();
        assert!(matches!(err, TokenizerError::MissingByte(0)));
    }
}
