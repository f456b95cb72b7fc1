//! Stage-1 candidate selection by Maximal Marginal Relevance.
//!
//! Each round picks the unselected chunk maximizing
//! `λ·s(d, q) − (1 − λ)·max_{d' ∈ S} s(d, d')`. With nothing selected yet the
//! redundancy term is absent and the pick is the plain relevance argmax.

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::vector_index::{cosine, rank_order, ScoredChunk};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmrConfig {
    pub k: usize,
    pub lambda: f64,
    pub fetch_pool: usize,
}

impl Default for MmrConfig {
    fn default() -> Self {
        Self {
            k: 3,
            lambda: 0.5,
            fetch_pool: 20,
        }
    }
}

impl MmrConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("mmr.k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("mmr.lambda must lie in [0, 1] (got {})", self.lambda));
        }
        if self.fetch_pool < self.k {
            return Err(format!(
                "mmr.fetch_pool ({}) must be at least mmr.k ({})",
                self.fetch_pool, self.k
            ));
        }
        Ok(())
    }
}

/// Greedy MMR over `pool`, returning up to `cfg.k` chunks in selection order.
///
/// Relevance is recomputed from the stored vectors; the incoming scores are
/// not trusted. Returned `score`s are query relevance. Ties go to the lower
/// chunk id, so the result does not depend on pool order.
pub fn mmr_select(pool: &[ScoredChunk], query: &Embedding, cfg: &MmrConfig) -> Vec<ScoredChunk> {
    let n = pool.len();
    let want = cfg.k.min(n);
    let relevance: Vec<f64> = pool.iter().map(|c| cosine(&c.vector, query)).collect();
    // Highest similarity to anything selected so far, per candidate.
    let mut redundancy = vec![f64::NEG_INFINITY; n];
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(want);
    let lambda = cfg.lambda;

    for round in 0..want {
        let mut best: Option<(f64, usize)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let score = if round == 0 {
                relevance[i]
            } else {
                lambda * relevance[i] - (1.0 - lambda) * redundancy[i]
            };
            let better = match best {
                None => true,
                Some((b, j)) => {
                    rank_order((score, &pool[i].chunk.id), (b, &pool[j].chunk.id)).is_lt()
                }
            };
            if better {
                best = Some((score, i));
            }
        }
        let Some((_, pick)) = best else { break };
        taken[pick] = true;
        for i in (0..n).filter(|&i| !taken[i]) {
            let s = cosine(&pool[i].vector, &pool[pick].vector);
            if s > redundancy[i] {
                redundancy[i] = s;
            }
        }
        out.push(ScoredChunk {
            score: relevance[pick],
            ..pool[pick].clone()
        });
    }
    out
}
