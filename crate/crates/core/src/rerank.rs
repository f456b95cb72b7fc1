//! Stage-2 re-ranking: personalized PageRank over a thresholded cosine
//! similarity graph of the MMR candidates, then token-budgeted context
//! assembly.

use serde::{Deserialize, Serialize};

use crate::corpus::Chunk;
use crate::embedding::Embedding;
use crate::tokenizer::TokenCounter;
use crate::vector_index::{cosine, rank_order, ScoredChunk};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrConfig {
    pub alpha: f64,
    pub min_sim: f64,
    pub top_k: usize,
    pub token_budget: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PrConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            min_sim: 0.01,
            top_k: 3,
            token_budget: 1800,
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

impl PrConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(format!("pr.alpha must lie in [0, 1) (got {})", self.alpha));
        }
        if !self.min_sim.is_finite() {
            return Err("pr.min_sim must be finite".into());
        }
        if self.top_k == 0 {
            return Err("pr.top_k must be at least 1".into());
        }
        if self.token_budget == 0 {
            return Err("pr.token_budget must be at least 1".into());
        }
        if !(self.tol > 0.0) {
            return Err(format!("pr.tol must be positive (got {})", self.tol));
        }
        if self.max_iter == 0 {
            return Err("pr.max_iter must be at least 1".into());
        }
        Ok(())
    }
}

/// Symmetric, zero-diagonal, row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGraph {
    size: usize,
    weights: Vec<f64>,
    threshold: f64,
}

impl SimilarityGraph {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.size..(i + 1) * self.size]
    }

    pub fn edge_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count() / 2
    }
}

/// `W_ij = s(x_i, x_j)` when it reaches `threshold`, else 0; `W_ii = 0`.
/// Negative similarities never become edges, whatever the threshold.
pub fn build_similarity_graph(vectors: &[&[f64]], threshold: f64) -> SimilarityGraph {
    let k = vectors.len();
    let mut weights = vec![0.0; k * k];
    for i in 0..k {
        for j in (i + 1)..k {
            let s = cosine(vectors[i], vectors[j]);
            let w = if s >= threshold && s > 0.0 { s.min(1.0) } else { 0.0 };
            weights[i * k + j] = w;
            weights[j * k + i] = w;
        }
    }
    SimilarityGraph {
        size: k,
        weights,
        threshold,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    size: usize,
    probs: Vec<f64>,
    /// Rows that had no edges and were replaced by the uniform row.
    pub uniform_rows: usize,
}

impl TransitionMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.size..(i + 1) * self.size]
    }
}

/// Row-normalizes `graph`; a row with zero sum becomes uniform `1/k`.
pub fn to_transition(graph: &SimilarityGraph) -> TransitionMatrix {
    let k = graph.size;
    let mut probs = vec![0.0; k * k];
    let mut uniform_rows = 0;
    for i in 0..k {
        let row = graph.row(i);
        let sum: f64 = row.iter().sum();
        let out = &mut probs[i * k..(i + 1) * k];
        if sum > 0.0 {
            for (p, w) in out.iter_mut().zip(row) {
                *p = w / sum;
            }
        } else {
            uniform_rows += 1;
            out.fill(1.0 / k as f64);
        }
    }
    TransitionMatrix {
        size: k,
        probs,
        uniform_rows,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationVector {
    pub weights: Vec<f64>,
    /// Every clipped score was zero, so the uniform distribution was used.
    pub uniform_fallback: bool,
}

/// Clips scores at zero and normalizes them to sum to one (uniform when all
/// clip to zero).
pub fn personalization_from_scores(scores: &[f64]) -> PersonalizationVector {
    let clipped: Vec<f64> = scores.iter().map(|&s| s.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    if sum > 0.0 {
        PersonalizationVector {
            weights: clipped.iter().map(|s| s / sum).collect(),
            uniform_fallback: false,
        }
    } else {
        if !scores.is_empty() {
            tracing::warn!("no chunk has positive similarity to the query; using uniform personalization");
        }
        let k = scores.len();
        PersonalizationVector {
            weights: vec![1.0 / k as f64; k],
            uniform_fallback: true,
        }
    }
}

/// `v_i ∝ max(0, s(x_i, q))`.
pub fn personalization(vectors: &[&[f64]], query: &[f64]) -> PersonalizationVector {
    let scores: Vec<f64> = vectors.iter().map(|x| cosine(x, query)).collect();
    personalization_from_scores(&scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankVector {
    pub scores: Vec<f64>,
    pub iterations: usize,
    /// L1 change of the last iteration.
    pub residual: f64,
    /// `‖r − (αPᵀr + (1−α)v)‖₁` at the returned iterate.
    pub stationarity: f64,
    pub converged: bool,
}

fn step(p: &TransitionMatrix, v: &[f64], alpha: f64, r: &[f64], out: &mut [f64]) {
    let k = p.size;
    for (o, vi) in out.iter_mut().zip(v) {
        *o = (1.0 - alpha) * vi;
    }
    // out += α Pᵀ r, accumulated row by row of P.
    for (i, ri) in r.iter().enumerate() {
        let w = alpha * ri;
        if w == 0.0 {
            continue;
        }
        for (o, pij) in out.iter_mut().zip(&p.probs[i * k..(i + 1) * k]) {
            *o += w * pij;
        }
    }
}

/// Power iteration `r ← αPᵀr + (1−α)v` from the uniform start, until the L1
/// change drops below `cfg.tol` or `cfg.max_iter` is hit. Hitting the cap
/// returns the last iterate with `converged = false`.
pub fn pagerank(p: &TransitionMatrix, v: &PersonalizationVector, cfg: &PrConfig) -> RankVector {
    let k = p.size;
    assert_eq!(k, v.weights.len(), "transition and personalization sizes differ");
    if k == 0 {
        return RankVector {
            scores: Vec::new(),
            iterations: 0,
            residual: 0.0,
            stationarity: 0.0,
            converged: true,
        };
    }
    let mut r = vec![1.0 / k as f64; k];
    let mut next = vec![0.0; k];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    while iterations < cfg.max_iter {
        step(p, &v.weights, cfg.alpha, &r, &mut next);
        residual = r.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut r, &mut next);
        iterations += 1;
        if residual < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        tracing::warn!(iterations, residual, "pagerank hit max_iter before converging");
    }
    step(p, &v.weights, cfg.alpha, &r, &mut next);
    let stationarity = r.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
    RankVector {
        scores: r,
        iterations,
        residual,
        stationarity,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedChunk {
    /// Chunk as it appears in the prompt; `text` is cut short when `truncated`.
    pub chunk: Chunk,
    pub rank_score: f64,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPack {
    pub chunks: Vec<RankedChunk>,
    pub combined_text: String,
    pub token_count: usize,
    pub truncated: bool,
}

impl ContextPack {
    pub fn empty() -> Self {
        Self {
            chunks: Vec::new(),
            combined_text: String::new(),
            token_count: 0,
            truncated: false,
        }
    }
}

pub fn chunk_header(chunk: &Chunk) -> String {
    format!("[Source: {} p.{} chunk {}]", chunk.filename, chunk.page, chunk.seq)
}

fn append_block(combined: &str, chunk: &Chunk, text: &str) -> String {
    let sep = if combined.is_empty() { "" } else { "\n\n" };
    format!("{combined}{sep}{}\n{text}", chunk_header(chunk))
}

/// Takes the `top_k` candidates by rank and concatenates them with source
/// headers, keeping the total (headers included) within `token_budget`.
///
/// Chunks are kept whole in rank order; the first one that would overflow is
/// cut at a token boundary to fill the remaining budget and the rest are
/// dropped.
pub fn select_context(
    candidates: &[ScoredChunk],
    ranks: &RankVector,
    cfg: &PrConfig,
    counter: &dyn TokenCounter,
) -> ContextPack {
    assert_eq!(candidates.len(), ranks.scores.len(), "one rank per candidate");
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        rank_order(
            (ranks.scores[a], &candidates[a].chunk.id),
            (ranks.scores[b], &candidates[b].chunk.id),
        )
    });
    order.truncate(cfg.top_k);

    let budget = cfg.token_budget;
    let mut pack = ContextPack::empty();
    for &i in &order {
        let chunk = &candidates[i].chunk;
        let whole = append_block(&pack.combined_text, chunk, &chunk.text);
        if counter.count(&whole) <= budget {
            pack.combined_text = whole;
            pack.chunks.push(RankedChunk {
                chunk: chunk.clone(),
                rank_score: ranks.scores[i],
                truncated: false,
            });
            continue;
        }
        pack.truncated = true;
        let fits = |n: usize| {
            let cut = counter.truncate(&chunk.text, n).trim_end();
            counter.count(&append_block(&pack.combined_text, chunk, cut)) <= budget
        };
        // Largest token prefix that still fits; the whole text does not.
        let (mut lo, mut hi) = (0usize, counter.count(&chunk.text));
        if fits(0) {
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if fits(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let cut = counter.truncate(&chunk.text, lo).trim_end();
            if !cut.trim().is_empty() {
                pack.combined_text = append_block(&pack.combined_text, chunk, cut);
                let mut trimmed = chunk.clone();
                trimmed.text = cut.to_string();
                trimmed.end = trimmed.start + cut.len();
                trimmed.token_len = counter.count(cut);
                pack.chunks.push(RankedChunk {
                    chunk: trimmed,
                    rank_score: ranks.scores[i],
                    truncated: true,
                });
            }
        }
        break;
    }
    pack.token_count = counter.count(&pack.combined_text);
    debug_assert!(pack.token_count <= budget);
    pack
}

/// Result of the full stage-2 pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reranked {
    pub pack: ContextPack,
    pub ranks: RankVector,
    pub edges: usize,
    pub uniform_personalization: bool,
}

/// Graph, transition, personalization, PageRank and context selection for
/// `candidates`. A single candidate skips the iteration (`r = (1)`).
pub fn rerank(
    candidates: &[ScoredChunk],
    query: &Embedding,
    cfg: &PrConfig,
    counter: &dyn TokenCounter,
) -> Reranked {
    let vectors: Vec<&[f64]> = candidates.iter().map(|c| c.vector.0.as_slice()).collect();
    let (ranks, edges, uniform_personalization) = match candidates.len() {
        0 | 1 => (
            RankVector {
                scores: vec![1.0; candidates.len()],
                iterations: 0,
                residual: 0.0,
                stationarity: 0.0,
                converged: true,
            },
            0,
            false,
        ),
        _ => {
            let graph = build_similarity_graph(&vectors, cfg.min_sim);
            let transition = to_transition(&graph);
            let v = personalization(&vectors, query);
            (pagerank(&transition, &v, cfg), graph.edge_count(), v.uniform_fallback)
        }
    };
    let pack = select_context(candidates, &ranks, cfg, counter);
    Reranked {
        pack,
        ranks,
        edges,
        uniform_personalization,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::WhitespaceCounter;

    fn graph_from(w: &[&[f64]], threshold: f64) -> SimilarityGraph {
        SimilarityGraph {
            size: w.len(),
            weights: w.iter().flat_map(|r| r.iter().copied()).collect(),
            threshold,
        }
    }

    #[test]
    fn identical_and_orthogonal_graphs() {
        let a = [1.0, 2.0];
        let g = build_similarity_graph(&[&a, &a], 0.01);
        assert_eq!((g.weight(0, 0), g.weight(1, 1)), (0.0, 0.0));
        assert!((g.weight(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(g.weight(0, 1), g.weight(1, 0));
        let g = build_similarity_graph(&[&[1.0, 0.0], &[0.0, 1.0]], 0.01);
        assert!(g.weights.iter().all(|&w| w == 0.0));
        let g = build_similarity_graph(&[&[3.0, 1.0]], 0.01);
        assert_eq!(g.size(), 1);
        assert_eq!(g.weight(0, 0), 0.0);
    }

    #[test]
    fn transition_rows() {
        let p = to_transition(&graph_from(&[&[0.0; 4], &[0.0; 4], &[0.0; 4], &[0.0; 4]], 0.01));
        assert!(p.probs.iter().all(|&x| x == 0.25));
        assert_eq!(p.uniform_rows, 4);

        let c = 0.4;
        let p = to_transition(&graph_from(&[&[0.0, 2.0 * c, c], &[2.0 * c, 0.0, 0.0], &[c, 0.0, 0.0]], 0.01));
        assert!((p.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.get(0, 2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.get(0, 0), 0.0);
    }

    #[test]
    fn personalization_cases() {
        let v = personalization(&[&[0.0, 1.0], &[0.0, -1.0]], &[1.0, 0.0]);
        assert!(v.uniform_fallback);
        assert_eq!(v.weights, vec![0.5, 0.5]);
        let v = personalization(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], &[1.0, 0.0, 0.0]);
        assert_eq!(v.weights, vec![1.0, 0.0, 0.0]);
        let v = personalization_from_scores(&[0.5, -0.2, 0.25]);
        assert_eq!(v.weights, vec![2.0 / 3.0, 0.0, 1.0 / 3.0]);
    }

    #[test]
    fn alpha_zero_returns_personalization() {
        let p = to_transition(&graph_from(&[&[0.0, 0.5], &[0.5, 0.0]], 0.01));
        let v = personalization_from_scores(&[0.8, 0.2]);
        let cfg = PrConfig { alpha: 0.0, max_iter: 1, ..Default::default() };
        let r = pagerank(&p, &v, &cfg);
        assert_eq!(r.iterations, 1);
        assert!((r.scores[0] - 0.8).abs() < 1e-15 && (r.scores[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn symmetric_complete_graph_is_uniform() {
        let k = 5;
        let row: Vec<f64> = vec![0.3; k];
        let mut w: Vec<Vec<f64>> = vec![row; k];
        for (i, r) in w.iter_mut().enumerate() {
            r[i] = 0.0;
        }
        let refs: Vec<&[f64]> = w.iter().map(Vec::as_slice).collect();
        let p = to_transition(&graph_from(&refs, 0.01));
        let v = personalization_from_scores(&[1.0; 5]);
        let r = pagerank(&p, &v, &PrConfig::default());
        assert!(r.converged);
        for s in &r.scores {
            assert!((s - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn max_iter_cap_is_reported() {
        let p = to_transition(&graph_from(&[&[0.0, 0.9], &[0.1, 0.0]], 0.01));
        let v = personalization_from_scores(&[1.0, 0.0]);
        let cfg = PrConfig { alpha: 0.99, max_iter: 3, ..Default::default() };
        let r = pagerank(&p, &v, &cfg);
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    fn cand(id: &str, seq: usize, text: &str) -> ScoredChunk {
        ScoredChunk {
            chunk: Chunk {
                id: id.into(),
                doc_id: "doc".into(),
                filename: "notes.txt".into(),
                page: 2,
                seq,
                text: text.into(),
                token_len: text.split_whitespace().count(),
                start: 0,
                end: text.len(),
                overlap_tokens: 0,
            },
            vector: Embedding(vec![1.0]),
            score: 1.0,
        }
    }

    fn ranks(scores: Vec<f64>) -> RankVector {
        RankVector {
            scores,
            iterations: 1,
            residual: 0.0,
            stationarity: 0.0,
            converged: true,
        }
    }

    #[test]
    fn context_is_rank_ordered_with_headers() {
        let c = vec![cand("a", 0, "alpha text"), cand("b", 1, "beta text")];
        let pack = select_context(&c, &ranks(vec![0.3, 0.7]), &PrConfig::default(), &WhitespaceCounter);
        assert_eq!(
            pack.combined_text,
            "[Source: notes.txt p.2 chunk 1]\nbeta text\n\n[Source: notes.txt p.2 chunk 0]\nalpha text"
        );
        assert!(!pack.truncated);
        assert_eq!(pack.token_count, WhitespaceCounter.count(&pack.combined_text));
    }

    #[test]
    fn overflowing_chunk_is_cut_and_rest_dropped() {
        let long = vec!["w"; 50].join(" ");
        let c = vec![cand("a", 0, &long), cand("b", 1, &long), cand("c", 2, &long)];
        let cfg = PrConfig { token_budget: 80, ..Default::default() };
        let pack = select_context(&c, &ranks(vec![0.5, 0.3, 0.2]), &cfg, &WhitespaceCounter);
        // header = 5 words; block a = 55, block b gets 80 - 55 - 5 = 20 words
        assert_eq!(pack.chunks.len(), 2);
        assert!(!pack.chunks[0].truncated);
        assert!(pack.chunks[1].truncated);
        assert_eq!(pack.chunks[1].chunk.text.split_whitespace().count(), 20);
        assert_eq!(pack.token_count, 80);
        assert!(pack.truncated);
    }

    #[test]
    fn top_k_larger_than_candidates_uses_all() {
        let c = vec![cand("a", 0, "x")];
        let cfg = PrConfig { top_k: 9, ..Default::default() };
        assert_eq!(select_context(&c, &ranks(vec![1.0]), &cfg, &WhitespaceCounter).chunks.len(), 1);
    }

    #[test]
    fn single_candidate_skips_iteration() {
        let c = vec![cand("a", 0, "only")];
        let out = rerank(&c, &Embedding(vec![1.0]), &PrConfig::default(), &WhitespaceCounter);
        assert_eq!(out.ranks.scores, vec![1.0]);
        assert_eq!(out.ranks.iterations, 0);
        assert_eq!(out.pack.chunks.len(), 1);
    }
}
