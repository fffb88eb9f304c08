//! Extractive and trivial summarisers: LexRank, clustroid, random, lead.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Review, ReviewGroup};
use crate::error::{Error, Result};
use crate::metrics::rouge_l;
use crate::textproc::{sentence_split, word_tokenize};

pub const LEXRANK_THRESHOLD: f64 = 0.1;
pub const LEXRANK_DAMPING: f64 = 0.15;
pub const LEXRANK_TOLERANCE: f64 = 1e-6;
const LEXRANK_MAX_ITERS: usize = 10_000;

/// Sentences joined by thresholded tf-idf cosine similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGraph {
    pub sentences: Vec<String>,
    /// Symmetric, zero diagonal, entries below the threshold set to 0.
    pub weights: Vec<Vec<f64>>,
    pub threshold: f64,
    pub damping: f64,
}

fn tfidf_vectors(docs: &[Vec<String>]) -> Vec<HashMap<String, f64>> {
    let n = docs.len() as f64;
    let mut df: HashMap<&str, usize> = HashMap::new();
    for d in docs {
        let mut seen: Vec<&str> = d.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for w in seen {
            *df.entry(w).or_insert(0) += 1;
        }
    }
    docs.iter()
        .map(|d| {
            let mut v: HashMap<String, f64> = HashMap::new();
            for w in d {
                *v.entry(w.clone()).or_insert(0.0) += 1.0;
            }
            for (w, x) in v.iter_mut() {
                // smoothed idf keeps terms shared by every sentence non-zero
                *x *= ((1.0 + n) / (1.0 + df[w.as_str()] as f64)).ln() + 1.0;
            }
            v
        })
        .collect()
}

fn cosine(a: &HashMap<String, f64>, b: &HashMap<String, f64>) -> f64 {
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let mut keys: Vec<&String> = a.keys().filter(|k| b.contains_key(*k)).collect();
    keys.sort();
    let dot: f64 = keys.iter().map(|k| a[*k] * b[*k]).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

impl SimilarityGraph {
    pub fn build(sentences: Vec<String>, threshold: f64, damping: f64) -> Self {
        let docs: Vec<Vec<String>> = sentences.iter().map(|s| word_tokenize(s)).collect();
        let vecs = tfidf_vectors(&docs);
        let n = sentences.len();
        let mut weights = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let s = cosine(&vecs[i], &vecs[j]);
                if s >= threshold {
                    weights[i][j] = s;
                    weights[j][i] = s;
                }
            }
        }
        SimilarityGraph {
            sentences,
            weights,
            threshold,
            damping,
        }
    }

    /// Row-stochastic transition matrix; sentences with no edges jump
    /// uniformly.
    pub fn transition(&self) -> Vec<Vec<f64>> {
        let n = self.sentences.len();
        self.weights
            .iter()
            .map(|row| {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    row.iter().map(|w| w / s).collect()
                } else {
                    vec![1.0 / n as f64; n]
                }
            })
            .collect()
    }

    /// Continuous LexRank by power iteration to L1 tolerance.
    pub fn centrality(&self) -> Vec<f64> {
        let n = self.sentences.len();
        if n == 0 {
            return Vec::new();
        }
        let m = self.transition();
        let mut p = vec![1.0 / n as f64; n];
        for _ in 0..LEXRANK_MAX_ITERS {
            let next = damped_step(&m, &p, self.damping);
            let delta: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
            p = next;
            if delta < LEXRANK_TOLERANCE {
                break;
            }
        }
        p
    }
}

/// One application of `p' = d/N + (1-d) M^T p`.
pub fn damped_step(m: &[Vec<f64>], p: &[f64], damping: f64) -> Vec<f64> {
    let n = p.len();
    (0..n)
        .map(|j| damping / n as f64 + (1.0 - damping) * (0..n).map(|i| m[i][j] * p[i]).sum::<f64>())
        .collect()
}

/// Picks sentences by descending centrality while they fit into
/// `budget_tokens` words and emits them in source order. The most central
/// sentence is always taken so the summary is never empty.
pub fn lexrank_sentences(sentences: Vec<String>, budget_tokens: usize) -> String {
    if sentences.is_empty() {
        return String::new();
    }
    let graph = SimilarityGraph::build(sentences, LEXRANK_THRESHOLD, LEXRANK_DAMPING);
    let c = graph.centrality();
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| c[b].total_cmp(&c[a]).then(a.cmp(&b)));
    let mut chosen = Vec::new();
    let mut used = 0;
    for i in order {
        let len = word_tokenize(&graph.sentences[i]).len();
        if !chosen.is_empty() && used + len > budget_tokens {
            break;
        }
        used += len;
        chosen.push(i);
    }
    chosen.sort_unstable();
    chosen.iter().map(|&i| graph.sentences[i].as_str()).collect::<Vec<_>>().join(" ")
}

/// Mean word count of the group's reviews, rounded.
pub fn mean_review_tokens(reviews: &[Review]) -> usize {
    if reviews.is_empty() {
        return 0;
    }
    let total: usize = reviews.iter().map(|r| word_tokenize(&r.text).len()).sum();
    (total as f64 / reviews.len() as f64).round() as usize
}

pub fn lexrank(reviews: &[Review], budget_tokens: usize) -> String {
    let sentences = reviews.iter().flat_map(|r| sentence_split(&r.text)).collect();
    lexrank_sentences(sentences, budget_tokens)
}

/// Mean ROUGE-L F1 of each review against all the others.
pub fn clustroid_scores(reviews: &[Review]) -> Vec<f64> {
    let words: Vec<Vec<String>> = reviews.iter().map(|r| word_tokenize(&r.text)).collect();
    (0..words.len())
        .map(|i| {
            let total: f64 = (0..words.len())
                .filter(|&j| j != i)
                .map(|j| rouge_l(&words[i], &words[j]).f1)
                .sum();
            total / (words.len() - 1).max(1) as f64
        })
        .collect()
}

/// Index of the review with the highest mean ROUGE-L F1 against the others;
/// ties go to the lowest index.
pub fn clustroid_index(reviews: &[Review]) -> Result<usize> {
    if reviews.len() < 2 {
        return Err(Error::Invalid(format!("clustroid needs at least 2 reviews, got {}", reviews.len())));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in clustroid_scores(reviews).into_iter().enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

pub fn clustroid(reviews: &[Review]) -> Result<&Review> {
    Ok(&reviews[clustroid_index(reviews)?])
}

pub fn random_review(reviews: &[Review], seed: u64) -> Result<&Review> {
    if reviews.is_empty() {
        return Err(Error::Empty("random review from an empty group".into()));
    }
    let i = ChaCha8Rng::seed_from_u64(seed).gen_range(0..reviews.len());
    Ok(&reviews[i])
}

/// First sentence of every review, in group order.
pub fn lead(reviews: &[Review]) -> String {
    reviews
        .iter()
        .filter_map(|r| sentence_split(&r.text).into_iter().next())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    LexRank,
    Clustroid,
    Random,
    Lead,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lexrank" => Ok(Baseline::LexRank),
            "clustroid" => Ok(Baseline::Clustroid),
            "random" => Ok(Baseline::Random),
            "lead" => Ok(Baseline::Lead),
            other => Err(Error::Invalid(format!("unknown baseline `{other}`"))),
        }
    }
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::LexRank => "lexrank",
            Baseline::Clustroid => "clustroid",
            Baseline::Random => "random",
            Baseline::Lead => "lead",
        }
    }

    /// Summary of a set of source reviews. `seed` only matters for random.
    pub fn run(self, reviews: &[Review], seed: u64) -> Result<String> {
        Ok(match self {
            Baseline::LexRank => lexrank(reviews, mean_review_tokens(reviews)),
            Baseline::Clustroid => clustroid(reviews)?.text.clone(),
            Baseline::Random => random_review(reviews, seed)?.text.clone(),
            Baseline::Lead => lead(reviews),
        })
    }

    pub fn run_group(self, group: &ReviewGroup, seed: u64) -> Result<String> {
        self.run(&group.reviews, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reviews(texts: &[&str]) -> Vec<Review> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Review {
                id: format!("r{i}"),
                product_id: "p".into(),
                rating: 4,
                text: t.to_string(),
                category: "c".into(),
            })
            .collect()
    }

    #[test]
    fn lead_takes_first_sentences() {
        assert_eq!(lead(&reviews(&["A. B.", "C!"])), "A. C!");
        assert_eq!(lead(&reviews(&["", "Only one here."])), "Only one here.");
    }

    #[test]
    fn single_sentence_lexrank() {
        assert_eq!(lexrank(&reviews(&["Just one sentence here."]), 4), "Just one sentence here.");
        assert_eq!(lexrank(&reviews(&[""]), 10), "");
    }

    #[test]
    fn hub_sentence_is_most_central() {
        let g = SimilarityGraph::build(
            vec![
                "red apple green pear".into(),
                "red apple blue sky".into(),
                "green pear dark night".into(),
            ],
            LEXRANK_THRESHOLD,
            LEXRANK_DAMPING,
        );
        assert_eq!(g.weights[1][2], 0.0);
        assert!(g.weights[0][1] > 0.0 && g.weights[0][2] > 0.0);
        let c = g.centrality();
        // hand solution: s0 links to both with equal weight, so M = [[0,.5,.5],[1,0,0],[1,0,0]]
        // and p0 = d/3 + (1-d)(p1+p2), p1 = p2 = d/3 + (1-d) p0 / 2
        let d = LEXRANK_DAMPING;
        let p0 = (d / 3.0 + (1.0 - d) * 2.0 * d / 3.0) / (1.0 - (1.0 - d) * (1.0 - d));
        let p1 = d / 3.0 + (1.0 - d) * p0 / 2.0;
        assert!((c[0] - p0).abs() < 1e-5, "{c:?}");
        assert!((c[1] - p1).abs() < 1e-5 && (c[2] - p1).abs() < 1e-5);
    }

    #[test]
    fn clustroid_cases() {
        let r = reviews(&["the battery is great", "the battery is great", "awful screen overall"]);
        assert_eq!(clustroid_index(&r).unwrap(), 0);
        let same = reviews(&["x y", "x y", "x y"]);
        assert_eq!(clustroid_index(&same).unwrap(), 0);
        assert!(clustroid_index(&r[..1]).is_err());
    }

    #[test]
    fn random_choice_is_seeded_and_uniform() {
        let r = reviews(&["a", "b", "c", "d", "e", "f", "g", "h", "i"]);
        assert_eq!(random_review(&r[..1], 5).unwrap().id, "r0");
        assert_eq!(random_review(&r, 11).unwrap(), random_review(&r, 11).unwrap());
        let n = 10_000;
        let mut counts = [0usize; 9];
        for s in 0..n {
            let id = &random_review(&r, s as u64).unwrap().id;
            counts[id[1..].parse::<usize>().unwrap()] += 1;
        }
        let p = 1.0 / 9.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn centrality_is_a_fixed_point(texts in prop::collection::vec("[abcde]{1,3}( [abcde]{1,3}){0,5}", 1..7)) {
            let g = SimilarityGraph::build(texts, LEXRANK_THRESHOLD, LEXRANK_DAMPING);
            let c = g.centrality();
            prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let next = damped_step(&g.transition(), &c, LEXRANK_DAMPING);
            let delta: f64 = next.iter().zip(&c).map(|(a, b)| (a - b).abs()).sum();
            prop_assert!(delta < LEXRANK_TOLERANCE);
            for row in &g.weights {
                prop_assert!(row.iter().all(|w| (0.0..=1.0).contains(w)));
            }
        }

        #[test]
        fn clustroid_follows_permutations(texts in prop::collection::vec("[abc]{1,2}( [abc]{1,2}){0,4}", 2..6), rot in 0usize..6) {
            let r = reviews(&texts.iter().map(String::as_str).collect::<Vec<_>>());
            let k = rot % r.len();
            let mut rotated = r.clone();
            rotated.rotate_left(k);
            let a = clustroid(&r).unwrap();
            let b = clustroid(&rotated).unwrap();
            let scores = clustroid_scores(&r);
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut winners: Vec<&str> = r.iter().zip(&scores).filter(|(_, s)| **s == top).map(|(x, _)| x.text.as_str()).collect();
            winners.dedup();
            if winners.len() == 1 {
                prop_assert_eq!(&a.text, &b.text);
            }
            prop_assert!(winners.contains(&b.text.as_str()));
        }
    }
}
