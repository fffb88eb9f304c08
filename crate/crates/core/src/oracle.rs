//! The property oracle: content coverage, point-of-view distribution, rating
//! deviation and length deviation of a target text relative to its sources.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{LooInstance, Review};
use crate::error::{Error, Result};
use crate::metrics::{rouge_l, rouge_n};
use crate::textproc::word_tokenize;

pub const NUM_PROPERTIES: usize = 9;

/// Column names of the flat property layout.
pub const PROPERTY_NAMES: [&str; NUM_PROPERTIES] = [
    "rouge1_f1",
    "rouge2_f1",
    "rougel_f1",
    "pov_first",
    "pov_second",
    "pov_third",
    "pov_none",
    "rating_dev",
    "length_dev",
];

pub const COVERAGE: std::ops::Range<usize> = 0..3;
pub const POV: std::ops::Range<usize> = 3..7;
pub const RATING_DEV: usize = 7;
pub const LENGTH_DEV: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PropertyVector {
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    pub rougel_f1: f64,
    /// First, second, third person and no-pronoun shares.
    pub pov: [f64; 4],
    pub rating_dev: f64,
    /// Token difference already divided by the normalisation constant.
    pub length_dev: f64,
}

impl PropertyVector {
    pub fn to_array(&self) -> [f64; NUM_PROPERTIES] {
        [
            self.rouge1_f1,
            self.rouge2_f1,
            self.rougel_f1,
            self.pov[0],
            self.pov[1],
            self.pov[2],
            self.pov[3],
            self.rating_dev,
            self.length_dev,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != NUM_PROPERTIES {
            return Err(Error::shape(
                "property_vector",
                format!("expected {NUM_PROPERTIES} values, got {}", v.len()),
            ));
        }
        Ok(PropertyVector {
            rouge1_f1: v[0],
            rouge2_f1: v[1],
            rougel_f1: v[2],
            pov: [v[3], v[4], v[5], v[6]],
            rating_dev: v[7],
            length_dev: v[8],
        })
    }

    /// Checks ranges: coverage in `[0,1]`, POV block on the simplex.
    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("property vector has non-finite values".into()));
        }
        if a[COVERAGE].iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Invalid("coverage scores must lie in [0, 1]".into()));
        }
        let s: f64 = self.pov.iter().sum();
        if self.pov.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("pov block {:?} is not a distribution", self.pov)));
        }
        Ok(())
    }
}

/// Pronoun sets for the three points of view.
#[derive(Clone, Debug, PartialEq)]
pub struct PronounLexicon {
    pub first: HashSet<String>,
    pub second: HashSet<String>,
    pub third: HashSet<String>,
}

impl Default for PronounLexicon {
    fn default() -> Self {
        let set = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect::<HashSet<_>>();
        PronounLexicon {
            first: set(&["i", "me", "my", "mine", "myself", "we", "us", "our", "ours", "ourselves"]),
            second: set(&["you", "your", "yours", "yourself", "yourselves"]),
            third: set(&[
                "he", "him", "his", "himself", "she", "her", "hers", "herself", "it", "its",
                "itself", "they", "them", "their", "theirs", "themselves",
            ]),
        }
    }
}

impl PronounLexicon {
    /// Index of the class a lowercase word belongs to, if any.
    pub fn class_of(&self, word: &str) -> Option<usize> {
        if self.first.contains(word) {
            Some(0)
        } else if self.second.contains(word) {
            Some(1)
        } else if self.third.contains(word) {
            Some(2)
        } else {
            None
        }
    }
}

/// Settings that scale oracle outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Length deviations are divided by this (the filter's maximum word count).
    pub length_norm: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { length_norm: 70.0 }
    }
}

/// ROUGE-1/2/L F1 of the target text against each source, averaged over the
/// sources. Per-source scores are summed in sorted order so the result does
/// not depend on source order, not even in the last bit.
pub fn content_coverage(target: &str, sources: &[Review]) -> Result<(f64, f64, f64)> {
    if sources.is_empty() {
        return Err(Error::Empty("content_coverage: no sources".into()));
    }
    let cand = word_tokenize(target);
    let mut scores = [Vec::new(), Vec::new(), Vec::new()];
    for r in sources {
        let reference = word_tokenize(&r.text);
        scores[0].push(rouge_n(&cand, &reference, 1).f1);
        scores[1].push(rouge_n(&cand, &reference, 2).f1);
        scores[2].push(rouge_l(&cand, &reference).f1);
    }
    let mean = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / v.len() as f64
    };
    Ok((mean(&mut scores[0]), mean(&mut scores[1]), mean(&mut scores[2])))
}

/// Share of first/second/third person pronouns, or `(0,0,0,1)` when the text
/// has none.
pub fn pov_distribution(text: &str, lexicon: &PronounLexicon) -> [f64; 4] {
    let mut counts = [0usize; 3];
    for w in word_tokenize(text) {
        if let Some(c) = lexicon.class_of(&w) {
            counts[c] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return [0.0, 0.0, 0.0, 1.0];
    }
    let t = total as f64;
    [counts[0] as f64 / t, counts[1] as f64 / t, counts[2] as f64 / t, 0.0]
}

pub fn rating_deviation(target: u8, sources: &[u8]) -> Result<f64> {
    if sources.is_empty() {
        return Err(Error::Empty("rating_deviation: no sources".into()));
    }
    let mean = sources.iter().map(|&r| r as f64).sum::<f64>() / sources.len() as f64;
    Ok(target as f64 - mean)
}

/// Word-token count of the target minus the mean over the sources.
pub fn length_deviation(target: &str, sources: &[Review]) -> Result<f64> {
    if sources.is_empty() {
        return Err(Error::Empty("length_deviation: no sources".into()));
    }
    let mean = sources
        .iter()
        .map(|r| word_tokenize(&r.text).len() as f64)
        .sum::<f64>()
        / sources.len() as f64;
    Ok(word_tokenize(target).len() as f64 - mean)
}

#[derive(Clone, Debug, Default)]
pub struct Oracle {
    pub lexicon: PronounLexicon,
    pub config: OracleConfig,
}

impl Oracle {
    pub fn new(config: OracleConfig) -> Self {
        Oracle {
            lexicon: PronounLexicon::default(),
            config,
        }
    }

    fn assemble(&self, text: &str, rating_dev: f64, sources: &[Review]) -> Result<PropertyVector> {
        let (r1, r2, rl) = content_coverage(text, sources)?;
        Ok(PropertyVector {
            rouge1_f1: r1,
            rouge2_f1: r2,
            rougel_f1: rl,
            pov: pov_distribution(text, &self.lexicon),
            rating_dev,
            length_dev: length_deviation(text, sources)? / self.config.length_norm,
        })
    }

    /// Properties of a leave-one-out target relative to its sources.
    pub fn compute_properties(&self, instance: &LooInstance) -> Result<PropertyVector> {
        let ratings: Vec<u8> = instance.sources.iter().map(|r| r.rating).collect();
        let rd = rating_deviation(instance.target.rating, &ratings)?;
        self.assemble(&instance.target.text, rd, &instance.sources)
    }

    /// Properties of a summary; summaries carry no rating, so the rating
    /// deviation is 0.
    pub fn summary_properties(&self, summary: &str, sources: &[Review]) -> Result<PropertyVector> {
        self.assemble(summary, 0.0, sources)
    }
}

/// Writes one row per vector under a header naming the nine fields.
pub fn write_properties_csv(path: &Path, rows: &[(String, PropertyVector)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(f, "id,{}", PROPERTY_NAMES.join(",")).map_err(io)?;
    for (id, p) in rows {
        let vals: Vec<String> = p.to_array().iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{id},{}", vals.join(",")).map_err(io)?;
    }
    f.flush().map_err(io)
}
