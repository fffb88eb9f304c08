//! Review ingestion, filtering, grouping and the annotated summary sets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub id: String,
    pub product_id: String,
    pub rating: u8,
    pub text: String,
    pub category: String,
}

impl Review {
    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewGroup {
    pub group_id: String,
    pub product_id: String,
    pub reviews: Vec<Review>,
}

/// One leave-one-out training instance: a target review and the rest of its group.
#[derive(Clone, Debug, PartialEq)]
pub struct LooInstance {
    pub group_id: String,
    pub target: Review,
    pub sources: Vec<Review>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "valid" | "validation" | "dev" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedEntry {
    pub group_id: String,
    pub category: String,
    pub sources: Vec<Review>,
    pub references: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotatedSet {
    pub entries: Vec<AnnotatedEntry>,
}

impl AnnotatedSet {
    pub fn split(&self, split: Split) -> Vec<&AnnotatedEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let c = |s| self.entries.iter().filter(|e| e.split == s).count();
        (c(Split::Train), c(Split::Valid), c(Split::Test))
    }
}

pub const ANNOTATED_SOURCES: usize = 8;
pub const ANNOTATED_REFERENCES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_reviews_per_product: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Products with more surviving reviews than this percentile (nearest
    /// rank) of per-product counts are dropped. 100 disables the cut.
    pub popularity_percentile: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_reviews_per_product: 10,
            min_words: 20,
            max_words: 70,
            popularity_percentile: 90.0,
        }
    }
}

fn field<'a>(obj: &'a Value, key: &str, line: usize) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::MissingField {
        line,
        field: key.to_string(),
    })
}

fn string_field(obj: &Value, key: &str, line: usize) -> Result<String> {
    match field(obj, key, line)? {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(Error::Parse {
            line,
            message: format!("field `{key}` must be a string, got {other}"),
        }),
    }
}

fn rating_field(obj: &Value, line: usize) -> Result<u8> {
    let v = field(obj, "rating", line)?;
    let r = v.as_f64().ok_or_else(|| Error::Parse {
        line,
        message: format!("field `rating` must be a number, got {v}"),
    })?;
    if r.fract() != 0.0 || !(1.0..=5.0).contains(&r) {
        return Err(Error::Parse {
            line,
            message: format!("rating {r} outside 1..=5"),
        });
    }
    Ok(r as u8)
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn review_from_value(obj: &Value, line: usize) -> Result<Review> {
    let text = normalize_ws(&string_field(obj, "text", line)?);
    if text.is_empty() {
        return Err(Error::Parse {
            line,
            message: "review text is empty".into(),
        });
    }
    Ok(Review {
        id: string_field(obj, "id", line)?,
        product_id: string_field(obj, "product_id", line)?,
        rating: rating_field(obj, line)?,
        text,
        category: string_field(obj, "category", line)?,
    })
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.to_string()))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect())
}

fn parse_json(line: usize, text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

/// Reads a JSONL review file. Errors carry the 1-based line number.
pub fn load_reviews(path: &Path) -> Result<Vec<Review>> {
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        out.push(review_from_value(&parse_json(line, &text)?, line)?);
    }
    log::info!("loaded {} reviews from {}", out.len(), path.display());
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for it in items {
        let line = serde_json::to_string(it).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Nearest-rank percentile of `values` (which need not be sorted).
pub fn nearest_rank_percentile(values: &[usize], percentile: f64) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Length filter, minimum-reviews filter, then the popularity cut, which is
/// computed over the surviving per-product counts.
pub fn filter_reviews(reviews: &[Review], cfg: &FilterConfig) -> Vec<Review> {
    let by_length: Vec<&Review> = reviews
        .iter()
        .filter(|r| (cfg.min_words..=cfg.max_words).contains(&r.word_count()))
        .collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &by_length {
        *counts.entry(r.product_id.as_str()).or_default() += 1;
    }
    counts.retain(|_, c| *c >= cfg.min_reviews_per_product);
    if cfg.popularity_percentile < 100.0 {
        let values: Vec<usize> = counts.values().copied().collect();
        if let Some(cut) = nearest_rank_percentile(&values, cfg.popularity_percentile) {
            counts.retain(|_, c| *c <= cut);
        }
    }
    by_length
        .into_iter()
        .filter(|r| counts.contains_key(r.product_id.as_str()))
        .cloned()
        .collect()
}

/// Per product (in product-id order), shuffles with the seeded RNG and cuts
/// consecutive groups of `group_size`; leftovers are discarded.
pub fn make_groups(reviews: &[Review], group_size: usize, seed: u64) -> Result<Vec<ReviewGroup>> {
    if group_size < 2 {
        return Err(Error::config("group_size", "must be at least 2"));
    }
    let mut by_product: BTreeMap<&str, Vec<&Review>> = BTreeMap::new();
    for r in reviews {
        by_product.entry(r.product_id.as_str()).or_default().push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    for (pid, mut rs) in by_product {
        rs.shuffle(&mut rng);
        for (k, chunk) in rs.chunks_exact(group_size).enumerate() {
            groups.push(ReviewGroup {
                group_id: format!("{pid}-{k}"),
                product_id: pid.to_string(),
                reviews: chunk.iter().map(|r| (*r).clone()).collect(),
            });
        }
    }
    Ok(groups)
}

/// One instance per member: target `i`, sources the other members in order.
pub fn leave_one_out(group: &ReviewGroup) -> Vec<LooInstance> {
    (0..group.reviews.len())
        .map(|i| LooInstance {
            group_id: group.group_id.clone(),
            target: group.reviews[i].clone(),
            sources: group
                .reviews
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, r)| r.clone())
                .collect(),
        })
        .collect()
}

/// How annotated entries are assigned to splits.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    /// Use the `split` field of each entry.
    Embedded,
    /// Consecutive blocks in file order with sizes proportional to the weights.
    Proportional { train: usize, valid: usize, test: usize },
    /// Explicit split name → group ids map.
    Explicit(HashMap<Split, Vec<String>>),
}

impl SplitSpec {
    pub fn amazon() -> Self {
        SplitSpec::Proportional {
            train: 28,
            valid: 12,
            test: 20,
        }
    }

    pub fn yelp() -> Self {
        SplitSpec::Proportional {
            train: 30,
            valid: 30,
            test: 40,
        }
    }

    /// Reads a JSON object mapping split names to lists of group ids.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: HashMap<String, Vec<String>> =
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?;
        let mut map = HashMap::new();
        for (k, v) in raw {
            let s = Split::parse(&k)
                .ok_or_else(|| Error::Invalid(format!("unknown split name `{k}`")))?;
            map.insert(s, v);
        }
        Ok(SplitSpec::Explicit(map))
    }

    /// Block sizes for `n` entries.
    pub fn sizes(train: usize, valid: usize, test: usize, n: usize) -> (usize, usize, usize) {
        let total = (train + valid + test) as f64;
        let tr = (n as f64 * train as f64 / total).round() as usize;
        let va = ((n as f64 * valid as f64 / total).round() as usize).min(n - tr.min(n));
        let tr = tr.min(n);
        (tr, va, n - tr - va)
    }
}

#[derive(Deserialize)]
struct RawAnnotated {
    group_id: String,
    #[serde(default)]
    category: String,
    reviews: Vec<Value>,
    summaries: Vec<String>,
    #[serde(default)]
    split: Option<String>,
}

#[derive(Serialize)]
struct AnnotatedRecord<'a> {
    group_id: &'a str,
    category: &'a str,
    reviews: &'a [Review],
    summaries: &'a [String],
    split: &'a str,
}

/// Loads annotated groups (8 sources and 3 reference summaries each) and
/// assigns splits.
pub fn load_annotated(path: &Path, spec: &SplitSpec) -> Result<AnnotatedSet> {
    let mut raw_entries = Vec::new();
    for (line, text) in read_lines(path)? {
        let raw: RawAnnotated = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        raw_entries.push((line, raw));
    }
    let mut entries = Vec::with_capacity(raw_entries.len());
    for (line, raw) in &raw_entries {
        if raw.summaries.len() != ANNOTATED_REFERENCES {
            return Err(Error::InvalidEntry {
                group_id: raw.group_id.clone(),
                message: format!(
                    "expected {ANNOTATED_REFERENCES} summaries, found {}",
                    raw.summaries.len()
                ),
            });
        }
        if raw.reviews.len() != ANNOTATED_SOURCES {
            return Err(Error::InvalidEntry {
                group_id: raw.group_id.clone(),
                message: format!(
                    "expected {ANNOTATED_SOURCES} reviews, found {}",
                    raw.reviews.len()
                ),
            });
        }
        let mut sources = Vec::with_capacity(ANNOTATED_SOURCES);
        for (k, v) in raw.reviews.iter().enumerate() {
            let text = normalize_ws(&string_field(v, "text", *line)?);
            sources.push(Review {
                id: v
                    .get("id")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("{}-r{k}", raw.group_id)),
                product_id: v
                    .get("product_id")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .unwrap_or_else(|| raw.group_id.clone()),
                rating: rating_field(v, *line)?,
                text,
                category: v
                    .get("category")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .unwrap_or_else(|| raw.category.clone()),
            });
        }
        entries.push(AnnotatedEntry {
            group_id: raw.group_id.clone(),
            category: raw.category.clone(),
            sources,
            references: raw.summaries.iter().map(|s| normalize_ws(s)).collect(),
            split: Split::Train,
        });
    }
    assign_splits(&mut entries, &raw_entries.iter().map(|(_, r)| r.split.clone()).collect::<Vec<_>>(), spec)?;
    Ok(AnnotatedSet { entries })
}

fn assign_splits(
    entries: &mut [AnnotatedEntry],
    embedded: &[Option<String>],
    spec: &SplitSpec,
) -> Result<()> {
    match spec {
        SplitSpec::Embedded => {
            for (e, s) in entries.iter_mut().zip(embedded) {
                let name = s.as_deref().ok_or_else(|| Error::InvalidEntry {
                    group_id: e.group_id.clone(),
                    message: "entry has no split field".into(),
                })?;
                e.split = Split::parse(name).ok_or_else(|| Error::InvalidEntry {
                    group_id: e.group_id.clone(),
                    message: format!("unknown split `{name}`"),
                })?;
            }
        }
        SplitSpec::Proportional { train, valid, test } => {
            let (tr, va, _) = SplitSpec::sizes(*train, *valid, *test, entries.len());
            for (i, e) in entries.iter_mut().enumerate() {
                e.split = if i < tr {
                    Split::Train
                } else if i < tr + va {
                    Split::Valid
                } else {
                    Split::Test
                };
            }
        }
        SplitSpec::Explicit(map) => {
            let mut lookup: HashMap<&str, Split> = HashMap::new();
            for (s, ids) in map {
                for id in ids {
                    if lookup.insert(id.as_str(), *s).is_some() {
                        return Err(Error::InvalidEntry {
                            group_id: id.clone(),
                            message: "listed in more than one split".into(),
                        });
                    }
                }
            }
            for e in entries.iter_mut() {
                e.split = *lookup.get(e.group_id.as_str()).ok_or_else(|| Error::InvalidEntry {
                    group_id: e.group_id.clone(),
                    message: "not assigned to any split".into(),
                })?;
            }
        }
    }
    Ok(())
}

pub fn save_annotated(path: &Path, set: &AnnotatedSet) -> Result<()> {
    let recs: Vec<AnnotatedRecord> = set
        .entries
        .iter()
        .map(|e| AnnotatedRecord {
            group_id: &e.group_id,
            category: &e.category,
            reviews: &e.sources,
            summaries: &e.references,
            split: e.split.as_str(),
        })
        .collect();
    write_jsonl(path, &recs)
}

/// Cross-domain protocol: train/valid entries come from other categories with
/// the same per-split counts as the in-domain experiment; test entries are the
/// target category's test entries.
pub fn cross_domain_split(set: &AnnotatedSet, target: &str, seed: u64) -> AnnotatedSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for split in [Split::Train, Split::Valid] {
        let want = set
            .entries
            .iter()
            .filter(|e| e.split == split && e.category == target)
            .count();
        let mut pool: Vec<&AnnotatedEntry> = set
            .entries
            .iter()
            .filter(|e| e.split == split && e.category != target)
            .collect();
        pool.shuffle(&mut rng);
        entries.extend(pool.into_iter().take(want).cloned());
    }
    entries.extend(
        set.entries
            .iter()
            .filter(|e| e.split == Split::Test && e.category == target)
            .cloned(),
    );
    AnnotatedSet { entries }
}

pub fn categories(set: &AnnotatedSet) -> Vec<String> {
    let mut seen = HashSet::new();
    set.entries
        .iter()
        .filter(|e| seen.insert(e.category.clone()))
        .map(|e| e.category.clone())
        .collect()
}
