//! Accuracy, macro-F1, ROUGE-N and ROUGE-L.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::generation::Label;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("predictions ({preds}) and gold labels ({gold}) differ in length")]
    LengthMismatch { preds: usize, gold: usize },
    #[error("no instances to score")]
    Empty,
    #[error("rouge n must be at least 1")]
    ZeroN,
}

fn check_lengths(preds: usize, gold: usize) -> Result<(), MetricsError> {
    if preds != gold {
        return Err(MetricsError::LengthMismatch { preds, gold });
    }
    if gold == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Fraction of predictions equal to gold; `None` counts as wrong.
pub fn accuracy<T: PartialEq>(preds: &[Option<T>], gold: &[T]) -> Result<f64, MetricsError> {
    check_lengths(preds.len(), gold.len())?;
    let hits = preds
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.as_ref() == Some(*g))
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Unweighted mean of per-label F1 over the labels present in `gold`.
/// Empty precision or recall denominators count as 0.
pub fn macro_f1<T: Eq + Hash + Ord>(preds: &[Option<T>], gold: &[T]) -> Result<f64, MetricsError> {
    check_lengths(preds.len(), gold.len())?;
    let labels: BTreeSet<&T> = gold.iter().collect();
    let mut tp: HashMap<&T, usize> = HashMap::new();
    let mut fp: HashMap<&T, usize> = HashMap::new();
    let mut fn_: HashMap<&T, usize> = HashMap::new();
    for (p, g) in preds.iter().zip(gold) {
        match p {
            Some(p) if p == g => *tp.entry(g).or_default() += 1,
            Some(p) => {
                *fp.entry(p).or_default() += 1;
                *fn_.entry(g).or_default() += 1;
            }
            None => *fn_.entry(g).or_default() += 1,
        }
    }
    let get = |m: &HashMap<&T, usize>, l: &T| m.get(l).copied().unwrap_or(0);
    let total: f64 = labels.iter().map(|l| f1(get(&tp, l), get(&fp, l), get(&fn_, l))).sum();
    Ok(total / labels.len() as f64)
}

/// Lowercased whitespace tokens with ASCII punctuation stripped from both
/// edges; tokens that were pure punctuation disappear.
pub fn rouge_tokens(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn f_measure(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 || cand == 0 || reference == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

/// F1 of clipped n-gram overlap.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroN);
    }
    let grams = |toks: &[String]| -> HashMap<Vec<String>, usize> {
        let mut m = HashMap::new();
        for w in toks.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
        m
    };
    let c = rouge_tokens(candidate);
    let r = rouge_tokens(reference);
    let (cg, rg) = (grams(&c), grams(&r));
    let overlap: usize = cg.iter().map(|(g, &k)| k.min(rg.get(g).copied().unwrap_or(0))).sum();
    let total = |m: &HashMap<Vec<String>, usize>| m.values().sum::<usize>();
    Ok(f_measure(overlap, total(&cg), total(&rg)))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure over word tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = rouge_tokens(candidate);
    let r = rouge_tokens(reference);
    f_measure(lcs_len(&c, &r), c.len(), r.len())
}

/// What one scored instance contributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Choice { predicted: Option<Label>, gold: Label },
    Open { prediction: String, reference: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredOutcome {
    pub outcome: Outcome,
    pub difficulty: Option<String>,
    pub failed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub failed: usize,
    pub choice: usize,
    pub open: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScore {
    pub count: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Aggregate scores. Accuracy and macro-F1 cover multiple-choice instances,
/// the ROUGE means cover open-ended ones; each is 0 when its kind is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub rouge_l: f64,
    pub rouge_n: f64,
    pub rouge_n_order: usize,
    pub per_difficulty: BTreeMap<String, DifficultyScore>,
    pub counts: Counts,
}

fn choice_scores<'a>(items: impl Iterator<Item = &'a ScoredOutcome>) -> (usize, f64, f64) {
    let (preds, gold): (Vec<Option<Label>>, Vec<Label>) = items
        .filter_map(|s| match &s.outcome {
            Outcome::Choice { predicted, gold } => Some((if s.failed { None } else { *predicted }, *gold)),
            Outcome::Open { .. } => None,
        })
        .unzip();
    if gold.is_empty() {
        return (0, 0.0, 0.0);
    }
    let acc = accuracy(&preds, &gold).expect("lengths match");
    let f1 = macro_f1(&preds, &gold).expect("lengths match");
    (gold.len(), acc, f1)
}

impl MetricReport {
    /// Failed instances score as wrong (and 0 ROUGE) and are also counted
    /// in `counts.failed`.
    pub fn from_outcomes(items: &[ScoredOutcome], rouge_order: usize) -> Result<Self, MetricsError> {
        if items.is_empty() {
            return Err(MetricsError::Empty);
        }
        if rouge_order == 0 {
            return Err(MetricsError::ZeroN);
        }
        let (choice, accuracy, macro_f1) = choice_scores(items.iter());
        let mut open = 0usize;
        let (mut rl, mut rn) = (0.0, 0.0);
        for s in items {
            if let Outcome::Open { prediction, reference } = &s.outcome {
                open += 1;
                if !s.failed {
                    rl += rouge_l(prediction, reference);
                    rn += rouge_n(prediction, reference, rouge_order)?;
                }
            }
        }
        let tags: BTreeSet<&str> = items.iter().filter_map(|s| s.difficulty.as_deref()).collect();
        let per_difficulty = tags
            .into_iter()
            .map(|tag| {
                let subset = items.iter().filter(|s| s.difficulty.as_deref() == Some(tag));
                let count = items.iter().filter(|s| s.difficulty.as_deref() == Some(tag)).count();
                let (_, accuracy, macro_f1) = choice_scores(subset);
                (tag.to_string(), DifficultyScore { count, accuracy, macro_f1 })
            })
            .collect();
        let mean = |x: f64| if open == 0 { 0.0 } else { x / open as f64 };
        Ok(Self {
            accuracy,
            macro_f1,
            rouge_l: mean(rl),
            rouge_n: mean(rn),
            rouge_n_order: rouge_order,
            per_difficulty,
            counts: Counts {
                total: items.len(),
                failed: items.iter().filter(|s| s.failed).count(),
                choice,
                open,
            },
        })
    }

    /// Plain-text table for terminals; scores for an absent kind show as `-`.
    pub fn render(&self) -> String {
        let show = |present: usize, x: f64| if present == 0 { "-".to_string() } else { format!("{x:.4}") };
        let mut out = format!(
            "instances  {} ({} failed; {} choice, {} open)\naccuracy   {}\nmacro_f1   {}\nrouge_l    {}\nrouge_{}    {}\n",
            self.counts.total,
            self.counts.failed,
            self.counts.choice,
            self.counts.open,
            show(self.counts.choice, self.accuracy),
            show(self.counts.choice, self.macro_f1),
            show(self.counts.open, self.rouge_l),
            self.rouge_n_order,
            show(self.counts.open, self.rouge_n)
        );
        for (tag, d) in &self.per_difficulty {
            out.push_str(&format!(
                "  {tag:<8} n={:<4} accuracy {:.4}  macro_f1 {:.4}\n",
                d.count, d.accuracy, d.macro_f1
            ));
        }
        out
    }
}
