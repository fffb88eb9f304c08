//! Multi-reference ROUGE reports, text characteristics of generated
//! summaries, and cross-domain tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSet, Split};
use crate::error::{Error, Result};
use crate::metrics::{rouge_l, rouge_n};
use crate::oracle::{pov_distribution, PronounLexicon};
use crate::textproc::word_tokenize;

/// How the scores against several references of one entry are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefAggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rouge {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

impl Rouge {
    pub fn of(candidate: &str, reference: &str) -> Self {
        let c = word_tokenize(candidate);
        let r = word_tokenize(reference);
        Rouge {
            r1: rouge_n(&c, &r, 1).f1,
            r2: rouge_n(&c, &r, 2).f1,
            rl: rouge_l(&c, &r).f1,
        }
    }

    fn combine(scores: &[Rouge], agg: RefAggregation) -> Rouge {
        let pick = |f: fn(&Rouge) -> f64| match agg {
            RefAggregation::Mean => scores.iter().map(f).sum::<f64>() / scores.len().max(1) as f64,
            RefAggregation::Max => scores.iter().map(f).fold(0.0, f64::max),
        };
        Rouge {
            r1: pick(|s| s.r1),
            r2: pick(|s| s.r2),
            rl: pick(|s| s.rl),
        }
    }
}

/// Multi-reference score of one candidate.
pub fn score_entry(candidate: &str, references: &[String], agg: RefAggregation) -> Rouge {
    let per: Vec<Rouge> = references.iter().map(|r| Rouge::of(candidate, r)).collect();
    Rouge::combine(&per, agg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub rouge: Rouge,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub rouge: Rouge,
    pub entries: usize,
    pub per_domain: BTreeMap<String, DomainScore>,
    /// Entry-level scores keyed by group id.
    pub per_entry: BTreeMap<String, Rouge>,
}

fn mean_of<'a>(scores: impl Iterator<Item = &'a Rouge>) -> (Rouge, usize) {
    let mut s = Rouge::default();
    let mut n = 0;
    for r in scores {
        s.r1 += r.r1;
        s.r2 += r.r2;
        s.rl += r.rl;
        n += 1;
    }
    if n > 0 {
        let k = n as f64;
        s = Rouge {
            r1: s.r1 / k,
            r2: s.r2 / k,
            rl: s.rl / k,
        };
    }
    (s, n)
}

/// Scores every entry of `split` against its references and averages over
/// entries. Entries are visited in group-id order, so the result does not
/// depend on the order of the annotated set.
pub fn evaluate_rouge(
    system: &str,
    summaries: &BTreeMap<String, String>,
    set: &AnnotatedSet,
    split: Split,
    agg: RefAggregation,
) -> Result<EvalReport> {
    let entries = set.split(split);
    if entries.is_empty() {
        return Err(Error::Empty(format!("no {} entries to evaluate", split.as_str())));
    }
    let missing: Vec<String> = entries
        .iter()
        .filter(|e| !summaries.contains_key(&e.group_id))
        .map(|e| e.group_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGroups(missing));
    }
    let mut per_entry = BTreeMap::new();
    let mut domains: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in &entries {
        per_entry.insert(e.group_id.clone(), score_entry(&summaries[&e.group_id], &e.references, agg));
        domains.entry(e.category.clone()).or_default().push(e.group_id.clone());
    }
    let (rouge, n) = mean_of(per_entry.values());
    let per_domain = domains
        .into_iter()
        .map(|(d, mut ids)| {
            ids.sort();
            let (rouge, entries) = mean_of(ids.iter().map(|id| &per_entry[id]));
            (d, DomainScore { rouge, entries })
        })
        .collect();
    Ok(EvalReport {
        system: system.into(),
        rouge,
        entries: n,
        per_domain,
        per_entry,
    })
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("system,domain,entries,rouge1,rouge2,rougeL\n");
    for r in reports {
        let _ = writeln!(s, "{},all,{},{:.4},{:.4},{:.4}", r.system, r.entries, r.rouge.r1, r.rouge.r2, r.rouge.rl);
        for (d, ds) in &r.per_domain {
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{:.4},{:.4}",
                r.system, d, ds.entries, ds.rouge.r1, ds.rouge.r2, ds.rouge.rl
            );
        }
    }
    s
}

pub fn reports_table(reports: &[EvalReport]) -> String {
    let w = reports.iter().map(|r| r.system.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<w$}  {:>8}  {:>8}  {:>8}\n", "System", "R1", "R2", "RL");
    for r in reports {
        let _ = writeln!(s, "{:<w$}  {:>8.4}  {:>8.4}  {:>8.4}", r.system, r.rouge.r1, r.rouge.r2, r.rouge.rl);
    }
    s
}

/// Point-of-view percentages over {1st, 2nd, 3rd, no pronoun} and the mean
/// word-count difference from gold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextCharacteristics {
    pub pov_percent: [f64; 4],
    pub len_diff: f64,
}

/// Per-summary POV distributions averaged uniformly, as percentages; `Len`
/// is mean system word count minus mean gold word count.
pub fn text_characteristics(summaries: &[String], gold: &[String], lexicon: &PronounLexicon) -> Result<TextCharacteristics> {
    if summaries.is_empty() {
        return Err(Error::Empty("text characteristics of no summaries".into()));
    }
    if gold.is_empty() {
        return Err(Error::Empty("text characteristics without gold summaries".into()));
    }
    let mut pov = [0.0; 4];
    for s in summaries {
        for (a, b) in pov.iter_mut().zip(pov_distribution(s, lexicon)) {
            *a += b;
        }
    }
    let n = summaries.len() as f64;
    let words = |xs: &[String]| xs.iter().map(|x| word_tokenize(x).len() as f64).sum::<f64>() / xs.len() as f64;
    Ok(TextCharacteristics {
        pov_percent: pov.map(|p| 100.0 * p / n),
        len_diff: words(summaries) - words(gold),
    })
}

pub fn characteristics_table(rows: &[(String, TextCharacteristics)]) -> String {
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<w$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>7}\n", "System", "1st", "2nd", "3rd", "NoPr", "Len");
    for (name, t) in rows {
        let p = t.pov_percent;
        let _ = writeln!(
            s,
            "{:<w$}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6.1}  {:>7.1}",
            name, p[0], p[1], p[2], p[3], t.len_diff
        );
    }
    s
}

pub fn characteristics_csv(rows: &[(String, TextCharacteristics)]) -> String {
    let mut s = String::from("system,first,second,third,no_pronoun,len\n");
    for (name, t) in rows {
        let p = t.pov_percent;
        let _ = writeln!(s, "{name},{:.2},{:.2},{:.2},{:.2},{:.2}", p[0], p[1], p[2], p[3], t.len_diff);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain: String,
    pub mean: f64,
    /// Sample standard deviation across seeds; `None` for a single seed.
    pub std: Option<f64>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainReport {
    pub rows: Vec<DomainRow>,
    pub overall_mean: f64,
    /// Spread across seeds of the per-seed average over domains.
    pub overall_std: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    // shifting by the first value makes constant inputs give exactly 0
    let mean = xs[0] + xs.iter().map(|x| x - xs[0]).sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Per-domain ROUGE-L over seeds. `scores[domain][k]` is the score of seed
/// `k`.
pub fn cross_domain_report(scores: &BTreeMap<String, Vec<f64>>) -> Result<CrossDomainReport> {
    if scores.is_empty() {
        return Err(Error::Empty("cross-domain report without domains".into()));
    }
    let mut rows = Vec::new();
    for (d, xs) in scores {
        if xs.is_empty() {
            return Err(Error::Empty(format!("no scores for domain `{d}`")));
        }
        let (mean, std) = mean_std(xs);
        rows.push(DomainRow {
            domain: d.clone(),
            mean,
            std,
            seeds: xs.len(),
        });
    }
    let max_seeds = scores.values().map(Vec::len).max().unwrap_or(0);
    let per_seed: Vec<f64> = (0..max_seeds)
        .map(|k| {
            let vals: Vec<f64> = scores.values().filter_map(|xs| xs.get(k).copied()).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let (_, overall_std) = mean_std(&per_seed);
    let overall_mean = rows.iter().map(|r| r.mean).sum::<f64>() / rows.len() as f64;
    Ok(CrossDomainReport {
        rows,
        overall_mean,
        overall_std,
    })
}

fn fmt_std(s: Option<f64>) -> String {
    s.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

pub fn cross_domain_table(r: &CrossDomainReport) -> String {
    let w = r.rows.iter().map(|x| x.domain.len()).max().unwrap_or(6).max(7);
    let mut s = format!("{:<w$}  {:>8}  {:>8}  {:>5}\n", "Domain", "RL", "std", "seeds");
    for row in &r.rows {
        let _ = writeln!(s, "{:<w$}  {:>8.4}  {:>8}  {:>5}", row.domain, row.mean, fmt_std(row.std), row.seeds);
    }
    let _ = writeln!(s, "{:<w$}  {:>8.4}  {:>8}", "Overall", r.overall_mean, fmt_std(r.overall_std));
    s
}

pub fn cross_domain_csv(r: &CrossDomainReport) -> String {
    let mut s = String::from("domain,rougeL,std,seeds\n");
    for row in &r.rows {
        let _ = writeln!(s, "{},{:.4},{},{}", row.domain, row.mean, fmt_std(row.std), row.seeds);
    }
    let _ = writeln!(s, "overall,{:.4},{},", r.overall_mean, fmt_std(r.overall_std));
    s
}
