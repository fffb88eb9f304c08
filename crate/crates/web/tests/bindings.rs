use fewsum_web::{baseline_text, parse_reviews, properties_json, rouge_json};
use serde_json::Value;

const REVIEWS: &str = "I love this soap. It smells great.\n\n  The bottle leaked but the soap is nice.  \nGreat smell, too small.\n";

#[test]
fn blank_lines_are_skipped() {
    let r = parse_reviews(REVIEWS).unwrap();
    assert_eq!(r.len(), 3);
    assert_eq!(r[1].text, "The bottle leaked but the soap is nice.");
    assert!(parse_reviews(" \n\n").is_err());
}

#[test]
fn properties_have_nine_fields() {
    let v: Value = serde_json::from_str(&properties_json("This soap smells great.", REVIEWS).unwrap()).unwrap();
    let pov: Vec<f64> = v["pov"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(pov.len(), 4);
    // no pronouns at all
    assert_eq!(pov, vec![0.0, 0.0, 0.0, 1.0]);
    assert_eq!(v["rating_dev"].as_f64(), Some(0.0));
    let r1 = v["rouge1_f1"].as_f64().unwrap();
    assert!(r1 > 0.0 && r1 <= 1.0);
    assert!(properties_json("x", "").is_err());
}

#[test]
fn rouge_of_identical_texts_is_one() {
    let v: Value = serde_json::from_str(&rouge_json("the soap is nice", "the soap is nice")).unwrap();
    for k in ["rouge1", "rouge2", "rougeL"] {
        assert_eq!(v[k]["f1"].as_f64(), Some(1.0), "{k}");
    }
    let v: Value = serde_json::from_str(&rouge_json("a b", "c d")).unwrap();
    assert_eq!(v["rougeL"]["f1"].as_f64(), Some(0.0));
}

#[test]
fn baselines_pick_from_the_reviews() {
    assert_eq!(baseline_text("lead", REVIEWS, 0).unwrap().split_whitespace().next(), Some("I"));
    let c = baseline_text("clustroid", REVIEWS, 0).unwrap();
    assert!(parse_reviews(REVIEWS).unwrap().iter().any(|r| r.text == c));
    assert!(!baseline_text("lexrank", REVIEWS, 0).unwrap().is_empty());
    assert!(baseline_text("abstractive", REVIEWS, 0).is_err());
}
