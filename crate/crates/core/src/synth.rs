//! A templated product-review corpus with gold summaries, so the whole
//! pipeline can run without the original datasets.
//!
//! Every product has a few aspects with a latent polarity. Reviews are
//! mostly informal and first person, and mention some of those aspects (with
//! occasional polarity flips); their star rating follows the aspect balance.
//! A minority of reviews use the formal register of the gold summaries, which
//! are third person and cover the majority opinion on every aspect.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SynthConfig;
use crate::corpus::{AnnotatedEntry, AnnotatedSet, Review, Split, SplitSpec, ANNOTATED_REFERENCES, ANNOTATED_SOURCES};

struct Aspect {
    name: &'static str,
    good: &'static [&'static str],
    bad: &'static [&'static str],
}

struct Category {
    name: &'static str,
    products: &'static [&'static str],
    aspects: &'static [Aspect],
}

const CATEGORIES: &[Category] = &[
    Category {
        name: "electronics",
        products: &["headphones", "speaker", "charger", "keyboard", "camera", "tablet"],
        aspects: &[
            Aspect { name: "sound", good: &["clear", "rich"], bad: &["muffled", "tinny"] },
            Aspect { name: "battery", good: &["reliable", "strong"], bad: &["weak", "poor"] },
            Aspect { name: "screen", good: &["bright", "sharp"], bad: &["dim", "blurry"] },
            Aspect { name: "setup", good: &["easy", "quick"], bad: &["confusing", "slow"] },
            Aspect { name: "case", good: &["solid", "sturdy"], bad: &["flimsy", "cheap"] },
        ],
    },
    Category {
        name: "kitchen",
        products: &["blender", "kettle", "toaster", "pan", "knife", "mixer"],
        aspects: &[
            Aspect { name: "motor", good: &["powerful", "quiet"], bad: &["noisy", "weak"] },
            Aspect { name: "handle", good: &["comfortable", "sturdy"], bad: &["loose", "flimsy"] },
            Aspect { name: "lid", good: &["tight", "solid"], bad: &["loose", "cheap"] },
            Aspect { name: "cleanup", good: &["easy", "quick"], bad: &["messy", "slow"] },
            Aspect { name: "finish", good: &["smooth", "durable"], bad: &["scratched", "rough"] },
        ],
    },
    Category {
        name: "clothing",
        products: &["jacket", "shirt", "dress", "sweater", "boots", "jeans"],
        aspects: &[
            Aspect { name: "fabric", good: &["soft", "thick"], bad: &["thin", "scratchy"] },
            Aspect { name: "fit", good: &["perfect", "true"], bad: &["tight", "baggy"] },
            Aspect { name: "color", good: &["vivid", "lovely"], bad: &["faded", "dull"] },
            Aspect { name: "stitching", good: &["neat", "strong"], bad: &["loose", "sloppy"] },
            Aspect { name: "zipper", good: &["smooth", "solid"], bad: &["stiff", "cheap"] },
        ],
    },
    Category {
        name: "health",
        products: &["vitamins", "lotion", "shampoo", "toothbrush", "massager", "scale"],
        aspects: &[
            Aspect { name: "scent", good: &["fresh", "pleasant"], bad: &["strong", "odd"] },
            Aspect { name: "texture", good: &["smooth", "light"], bad: &["greasy", "sticky"] },
            Aspect { name: "packaging", good: &["neat", "solid"], bad: &["leaky", "cheap"] },
            Aspect { name: "results", good: &["noticeable", "great"], bad: &["weak", "poor"] },
            Aspect { name: "size", good: &["generous", "handy"], bad: &["tiny", "bulky"] },
        ],
    },
];

const PEOPLE: &[&str] = &["wife", "husband", "son", "daughter", "mother", "father", "friend", "sister"];

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// One product's hidden state.
struct Product {
    id: String,
    category: usize,
    noun: &'static str,
    /// (aspect index, positive?)
    opinions: Vec<(usize, bool)>,
}

impl Product {
    fn sample<R: Rng>(rng: &mut R, id: String) -> Product {
        let category = rng.gen_range(0..CATEGORIES.len());
        let cat = &CATEGORIES[category];
        let noun = pick(rng, cat.products);
        let mut idx: Vec<usize> = (0..cat.aspects.len()).collect();
        idx.shuffle(rng);
        let lean = rng.gen_range(0.15..0.9);
        let opinions = idx[..3].iter().map(|&a| (a, rng.gen_bool(lean))).collect();
        Product {
            id,
            category,
            noun,
            opinions,
        }
    }
}

fn adjective<R: Rng>(rng: &mut R, aspect: &Aspect, positive: bool) -> &'static str {
    pick(rng, if positive { aspect.good } else { aspect.bad })
}

fn verdict(share: f64) -> &'static str {
    if share >= 1.0 {
        "an excellent choice"
    } else if share >= 0.5 {
        "a good choice"
    } else if share > 0.0 {
        "a mediocre choice"
    } else {
        "a poor choice"
    }
}

/// The formal register shared by gold summaries and the minority of formal
/// reviews: aspects grouped by polarity, then a verdict.
fn formal_text<R: Rng>(rng: &mut R, p: &Product, opinions: &[(usize, bool)], style: usize) -> String {
    let cat = &CATEGORIES[p.category];
    let noun = p.noun;
    let good: Vec<String> = opinions
        .iter()
        .filter(|o| o.1)
        .map(|&(a, _)| {
            let asp = &cat.aspects[a];
            format!("{} {}", adjective(rng, asp, true), asp.name)
        })
        .collect();
    let bad: Vec<String> = opinions
        .iter()
        .filter(|o| !o.1)
        .map(|&(a, _)| {
            let asp = &cat.aspects[a];
            format!("the {} is {}", asp.name, adjective(rng, asp, false))
        })
        .collect();
    let verdict = verdict(good.len() as f64 / opinions.len().max(1) as f64);
    let mut s = Vec::new();
    if !good.is_empty() {
        s.push(match style {
            0 => format!("This {noun} has {}.", join_and(&good)),
            1 => format!("Customers agree that this {noun} offers {}.", join_and(&good)),
            _ => format!("The {noun} comes with {}.", join_and(&good)),
        });
    } else {
        s.push(match style {
            0 => format!("This {noun} disappoints most customers."),
            1 => format!("Customers are unhappy with this {noun}."),
            _ => format!("The {noun} fails to impress."),
        });
    }
    if !bad.is_empty() {
        let lead = if good.is_empty() { "Also" } else { "However" };
        s.push(format!("{lead}, {}.", join_and(&bad)));
    }
    s.push(match style {
        0 => format!("Overall, it is {verdict}."),
        1 => format!("Overall, the {noun} is {verdict} for the price."),
        _ => format!("In general, it is {verdict}."),
    });
    s.into_iter().map(|x| capitalize(&x)).collect::<Vec<_>>().join(" ")
}

fn review_text<R: Rng>(rng: &mut R, p: &Product, cfg: &SynthConfig) -> (String, u8) {
    let cat = &CATEGORIES[p.category];
    let mut mentioned = p.opinions.clone();
    mentioned.shuffle(rng);
    mentioned.truncate(rng.gen_range(2..=3));
    for o in mentioned.iter_mut() {
        if rng.gen_bool(cfg.polarity_noise) {
            o.1 = !o.1;
        }
    }
    let pos = mentioned.iter().filter(|o| o.1).count();
    let share = pos as f64 / mentioned.len() as f64;
    let rating = (1.0 + 4.0 * share + rng.gen_range(-0.6..0.6)).round().clamp(1.0, 5.0) as u8;
    if rng.gen_bool(cfg.third_person_share) {
        let style = rng.gen_range(0..3);
        let mut text = formal_text(rng, p, &mentioned, style);
        while text.split_whitespace().count() < 20 {
            text.push(' ');
            text.push_str(pick(rng, &["It arrived on time.", "The box was plain.", "Delivery was fast."]));
        }
        return (text, rating);
    }
    let mut aspect_sents = Vec::new();
    for &(a, polarity) in &mentioned {
        let asp = &cat.aspects[a];
        let adj = adjective(rng, asp, polarity);
        aspect_sents.push(match rng.gen_range(0..4) {
            0 => format!("The {} is {}.", asp.name, adj),
            1 => format!("I found the {} really {}.", asp.name, adj),
            2 => format!("Honestly the {} seems {} to me.", asp.name, adj),
            _ => format!("My {} says the {} is {}.", pick(rng, PEOPLE), asp.name, adj),
        });
    }
    let noun = p.noun;
    let opening = match rng.gen_range(0..3) {
        0 => format!("I bought this {noun} for my {}.", pick(rng, PEOPLE)),
        1 => format!("We got this {noun} last month."),
        _ => format!("My {} asked me for this {noun}.", pick(rng, PEOPLE)),
    };
    let closing = if rating >= 4 {
        pick(rng, &["I would recommend it to you.", "You will love it.", "I am very happy with it."])
    } else if rating <= 2 {
        pick(rng, &["I would not buy it again.", "Save your money.", "I am sending it back."])
    } else {
        pick(rng, &["It is okay for the price.", "I have mixed feelings about it."])
    };
    let mut parts = vec![opening];
    parts.extend(aspect_sents);
    parts.push(closing.to_string());
    let mut text = parts.join(" ");
    while text.split_whitespace().count() < 20 {
        text.push(' ');
        text.push_str(pick(
            rng,
            &["It arrived on time.", "Shipping was fast.", "The box was fine.", "Nothing else to add."],
        ));
    }
    (text, rating)
}

/// A gold summary: the formal register over the product's true opinions.
fn summary_text<R: Rng>(rng: &mut R, p: &Product, style: usize) -> String {
    formal_text(rng, p, &p.opinions, style)
}

fn join_and(xs: &[String]) -> String {
    match xs.len() {
        0 => String::new(),
        1 => xs[0].clone(),
        n => format!("{} and {}", xs[..n - 1].join(", "), xs[n - 1]),
    }
}

/// The generated corpus: unannotated reviews plus a separate annotated set.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub reviews: Vec<Review>,
    pub annotated: AnnotatedSet,
}

fn reviews_for<R: Rng>(rng: &mut R, p: &Product, n: usize, cfg: &SynthConfig) -> Vec<Review> {
    (0..n)
        .map(|k| {
            let (text, rating) = review_text(rng, p, cfg);
            Review {
                id: format!("{}-r{k}", p.id),
                product_id: p.id.clone(),
                rating,
                text,
                category: CATEGORIES[p.category].name.to_string(),
            }
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reviews = Vec::new();
    for i in 0..cfg.n_products {
        let p = Product::sample(&mut rng, format!("p{i:04}"));
        let n = rng.gen_range(cfg.min_reviews..=cfg.max_reviews);
        reviews.extend(reviews_for(&mut rng, &p, n, cfg));
    }
    let (tr, va, _) = SplitSpec::sizes(28, 12, 20, cfg.n_annotated);
    let mut entries = Vec::new();
    for i in 0..cfg.n_annotated {
        let p = Product::sample(&mut rng, format!("a{i:04}"));
        let sources = reviews_for(&mut rng, &p, ANNOTATED_SOURCES, cfg);
        let mut styles = [0usize, 1, 2];
        styles.shuffle(&mut rng);
        let references = styles[..ANNOTATED_REFERENCES]
            .iter()
            .map(|&s| summary_text(&mut rng, &p, s))
            .collect();
        let split = if i < tr {
            Split::Train
        } else if i < tr + va {
            Split::Valid
        } else {
            Split::Test
        };
        entries.push(AnnotatedEntry {
            group_id: p.id.clone(),
            category: CATEGORIES[p.category].name.to_string(),
            sources,
            references,
            split,
        });
    }
    SynthCorpus {
        reviews,
        annotated: AnnotatedSet { entries },
    }
}
