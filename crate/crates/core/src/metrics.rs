//! ROUGE-N / ROUGE-L F1 and Best-Worst scaling.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrfScore {
    pub fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        let precision = if candidate > 0 {
            overlap as f64 / candidate as f64
        } else {
            0.0
        };
        let recall = if reference > 0 {
            overlap as f64 / reference as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        PrfScore {
            precision,
            recall,
            f1,
        }
    }
}

fn ngram_counts<S: AsRef<str>>(words: &[S], n: usize) -> (HashMap<Vec<&str>, usize>, usize) {
    let mut counts = HashMap::new();
    if words.len() < n {
        return (counts, 0);
    }
    for w in words.windows(n) {
        let key: Vec<&str> = w.iter().map(|s| s.as_ref()).collect();
        *counts.entry(key).or_insert(0) += 1;
    }
    (counts, words.len() + 1 - n)
}

/// ROUGE-N with clipped (multiset-intersection) n-gram counts.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> PrfScore {
    assert!(n >= 1, "rouge_n requires n >= 1");
    let (cand, cand_total) = ngram_counts(candidate, n);
    let (refc, ref_total) = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    PrfScore::from_counts(overlap, cand_total, ref_total)
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level ROUGE-L over whole texts.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> PrfScore {
    PrfScore::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// Best-Worst scaling counts for one system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BwsJudgments {
    pub n_best: usize,
    pub n_worst: usize,
    pub n_total: usize,
}

/// Fraction chosen as best minus fraction chosen as worst, in `[-1, 1]`.
pub fn bws_score(j: BwsJudgments) -> Result<f64> {
    if j.n_total == 0 {
        return Err(Error::Invalid("bws_score: no judgments".into()));
    }
    if j.n_best + j.n_worst > j.n_total {
        return Err(Error::Invalid(format!(
            "bws_score: best {} + worst {} exceeds total {}",
            j.n_best, j.n_worst, j.n_total
        )));
    }
    Ok((j.n_best as f64 - j.n_worst as f64) / j.n_total as f64)
}
