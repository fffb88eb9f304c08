//! Browser bindings for the text-side pieces of fewsum: the property oracle,
//! ROUGE and the extractive baselines. Nothing here needs a trained model.
//!
//! Reviews are passed as one review per line. The `*_json` functions are
//! plain Rust so they can be tested natively; the exported wrappers only
//! turn errors into JS exceptions.

use serde_json::json;
use wasm_bindgen::prelude::*;

use fewsum::baselines::Baseline;
use fewsum::corpus::Review;
use fewsum::metrics::{rouge_l, rouge_n, PrfScore};
use fewsum::oracle::Oracle;
use fewsum::textproc::word_tokenize;

pub fn parse_reviews(text: &str) -> Result<Vec<Review>, String> {
    let reviews: Vec<Review> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| Review {
            id: format!("r{i}"),
            product_id: "demo".into(),
            rating: 3,
            text: l.to_string(),
            category: "demo".into(),
        })
        .collect();
    if reviews.is_empty() {
        return Err("no reviews given".into());
    }
    Ok(reviews)
}

fn prf(s: PrfScore) -> serde_json::Value {
    json!({ "precision": s.precision, "recall": s.recall, "f1": s.f1 })
}

/// The nine summary properties of `summary` against the reviews.
pub fn properties_json(summary: &str, reviews: &str) -> Result<String, String> {
    let reviews = parse_reviews(reviews)?;
    let p = Oracle::default()
        .summary_properties(summary, &reviews)
        .map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&p).expect("plain floats"))
}

/// ROUGE-1, ROUGE-2 and ROUGE-L of a candidate against one reference.
pub fn rouge_json(candidate: &str, reference: &str) -> String {
    let (c, r) = (word_tokenize(candidate), word_tokenize(reference));
    json!({
        "rouge1": prf(rouge_n(&c, &r, 1)),
        "rouge2": prf(rouge_n(&c, &r, 2)),
        "rougeL": prf(rouge_l(&c, &r)),
    })
    .to_string()
}

/// Extractive summary from one of lexrank, clustroid, random or lead.
pub fn baseline_text(kind: &str, reviews: &str, seed: u64) -> Result<String, String> {
    let b: Baseline = kind.parse().map_err(|e: fewsum::error::Error| e.to_string())?;
    b.run(&parse_reviews(reviews)?, seed).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn properties(summary: &str, reviews: &str) -> Result<String, JsError> {
    properties_json(summary, reviews).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn rouge(candidate: &str, reference: &str) -> String {
    rouge_json(candidate, reference)
}

#[wasm_bindgen]
pub fn baseline(kind: &str, reviews: &str, seed: u32) -> Result<String, JsError> {
    baseline_text(kind, reviews, seed as u64).map_err(|e| JsError::new(&e))
}
