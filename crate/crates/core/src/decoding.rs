//! Beam search with n-gram blocking and length normalisation, and the
//! summarisation entry points built on it.

use serde::{Deserialize, Serialize};

use crate::config::DecodeConfig;
use crate::corpus::Review;
use crate::diff::{log_softmax, Tensor};
use crate::error::{Error, Result};
use crate::model::{DecodeCache, Memory, Model, TASK_SUMMARY};
use crate::oracle::{PropertyVector, NUM_PROPERTIES};
use crate::plugin::Plugin;
use crate::textproc::{BpeModel, TokenSeq, BOS, EOS, PAD, UNK};
use crate::training::tokenize;

/// Anything that scores next tokens for a set of growing hypotheses.
pub trait StepModel {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities of the next token for each hypothesis after this
    /// step. Hypothesis `i` extends hypothesis `parents[i]` of the previous
    /// call by `tokens[i]`; on the first call `parents` is ignored.
    fn step(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Vec<Vec<f64>>>;
}

/// True unless appending `next` to `hyp` repeats an `n`-gram already in it.
pub fn ngram_block(hyp: &[usize], next: usize, n: usize) -> bool {
    if n < 2 || hyp.len() < n - 1 {
        return true;
    }
    let tail = &hyp[hyp.len() - (n - 1)..];
    !hyp.windows(n).any(|w| w[n - 1] == next && &w[..n - 1] == tail)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, without BOS; ends with EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Length-normalised score `log_prob / len^alpha`.
    pub score: f64,
    /// Whether the hypothesis ended with EOS.
    pub finished: bool,
}

pub fn normalized_score(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(alpha)
}

fn better(a: &Hypothesis, b: &Hypothesis) -> bool {
    a.score > b.score
}

/// Beam search from `bos`. Live hypotheses are ranked by summed log
/// probability; at each step the top `beam_size` allowed expansions are kept
/// and those ending in `eos` retire. The result is the best retired
/// hypothesis by normalised score, or the best one cut at `max_tokens` when
/// none ended in `eos`.
pub fn beam_search<M: StepModel>(
    model: &mut M,
    cfg: &DecodeConfig,
    bos: usize,
    eos: usize,
    banned: &[usize],
) -> Result<Hypothesis> {
    cfg.validate()?;
    let vocab = model.vocab_size();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        score: 0.0,
        finished: false,
    }];
    let mut log_probs = model.step(&[0], &[bos])?;
    let mut best_done: Option<Hypothesis> = None;
    let mut best_cut: Option<Hypothesis> = None;
    let offer = |slot: &mut Option<Hypothesis>, h: Hypothesis| {
        if slot.as_ref().is_none_or(|b| better(&h, b)) {
            *slot = Some(h);
        }
    };
    for _ in 0..cfg.max_tokens {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (p, (h, lp)) in live.iter().zip(&log_probs).enumerate() {
            if lp.len() != vocab {
                return Err(Error::shape("beam_search", format!("{} scores for vocab {vocab}", lp.len())));
            }
            for (tok, &l) in lp.iter().enumerate() {
                if banned.contains(&tok) || !ngram_block(&h.tokens, tok, cfg.block_n) {
                    continue;
                }
                cands.push((h.log_prob + l, p, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(cfg.beam_size);
        let mut next = Vec::new();
        let mut parents = Vec::new();
        let mut tokens = Vec::new();
        for (lp, p, tok) in cands {
            let mut t = live[p].tokens.clone();
            t.push(tok);
            let h = Hypothesis {
                score: normalized_score(lp, t.len(), cfg.length_normalization_alpha),
                tokens: t,
                log_prob: lp,
                finished: tok == eos,
            };
            if h.finished {
                offer(&mut best_done, h);
            } else if h.tokens.len() == cfg.max_tokens {
                offer(&mut best_cut, h);
            } else {
                parents.push(p);
                tokens.push(tok);
                next.push(h);
            }
        }
        if next.is_empty() {
            live = next;
            break;
        }
        log_probs = model.step(&parents, &tokens)?;
        live = next;
    }
    for h in live {
        // only reachable when blocking left a hypothesis without expansions
        offer(&mut best_cut, h);
    }
    match (best_done, best_cut) {
        (Some(h), _) => Ok(h),
        (None, Some(h)) => {
            log::warn!("no hypothesis reached EOS within {} tokens", cfg.max_tokens);
            Ok(h)
        }
        (None, None) => Err(Error::Empty("beam search produced no hypothesis".into())),
    }
}

/// The generator as a step model over a fixed memory and property vector,
/// reusing cached keys and values across steps.
pub struct GeneratorStep<'a> {
    model: &'a Model,
    cache: DecodeCache,
    rows: Vec<Vec<usize>>,
    props: Vec<f64>,
    task: Option<usize>,
}

impl<'a> GeneratorStep<'a> {
    pub fn new(model: &'a Model, memory: &Memory, props: &[f64], task: Option<usize>) -> Result<Self> {
        Ok(GeneratorStep {
            model,
            cache: model.start_decode(memory)?,
            rows: vec![Vec::new()],
            props: props.to_vec(),
            task,
        })
    }
}

impl StepModel for GeneratorStep<'_> {
    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_size
    }

    fn step(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let history: Vec<Vec<usize>> = parents
            .iter()
            .map(|&p| self.rows.get(p).cloned().unwrap_or_default())
            .collect();
        let base = self.cache.rows();
        let logits: Tensor = self.model.decode_step(&mut self.cache, &history, tokens, &self.props, self.task)?;
        self.rows = history
            .into_iter()
            .enumerate()
            .map(|(i, mut h)| {
                h.push(base + i);
                h
            })
            .collect();
        Ok((0..logits.rows()).map(|r| log_softmax(logits.row(r))).collect())
    }
}

/// Tokens never proposed by the decoder.
pub const BANNED: [usize; 3] = [PAD, BOS, UNK];

/// One generated summary, as written to JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub group_id: String,
    pub summary: String,
    pub properties_used: Vec<f64>,
    pub score: f64,
    pub finished: bool,
}

/// A decoded summary with its token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub text: String,
    pub tokens: Vec<usize>,
    pub properties: [f64; NUM_PROPERTIES],
    pub score: f64,
    pub finished: bool,
}

impl Generated {
    pub fn record(&self, group_id: &str) -> SummaryRecord {
        SummaryRecord {
            group_id: group_id.into(),
            summary: self.text.clone(),
            properties_used: self.properties.to_vec(),
            score: self.score,
            finished: self.finished,
        }
    }
}

/// Where the generator's property vector comes from at inference.
#[derive(Clone, Copy, Debug)]
pub enum PropertySource<'a> {
    Plugin(&'a Plugin),
    Fixed(&'a PropertyVector),
    /// All zeros: the unconditioned variants.
    Zero,
}

pub fn encode_reviews(model: &Model, bpe: &BpeModel, sources: &[Review]) -> Result<Memory> {
    if sources.is_empty() {
        return Err(Error::Empty("no source reviews to summarise".into()));
    }
    let seqs: Vec<TokenSeq> = sources
        .iter()
        .map(|r| TokenSeq::new(tokenize(bpe, &r.text, model.cfg.max_len)))
        .collect();
    model.encode_sources(&seqs)
}

/// Decodes a summary of already encoded sources. Models trained with a task
/// embedding are switched to the summary task.
pub fn decode_memory(
    model: &Model,
    bpe: &BpeModel,
    memory: &Memory,
    source: PropertySource<'_>,
    cfg: &DecodeConfig,
) -> Result<Generated> {
    let properties = match source {
        PropertySource::Plugin(p) => p.forward(memory)?.to_array(),
        PropertySource::Fixed(p) => {
            p.validate()?;
            p.to_array()
        }
        PropertySource::Zero => [0.0; NUM_PROPERTIES],
    };
    let task = model.has_task_embedding().then_some(TASK_SUMMARY);
    let mut step = GeneratorStep::new(model, memory, &properties, task)?;
    let h = beam_search(&mut step, cfg, BOS, EOS, &BANNED)?;
    Ok(Generated {
        text: bpe.decode_ids(&h.tokens)?,
        tokens: h.tokens,
        properties,
        score: h.score,
        finished: h.finished,
    })
}

/// Summary of `sources` with properties predicted by the plug-in.
pub fn summarize(
    model: &Model,
    plugin: &Plugin,
    bpe: &BpeModel,
    cfg: &DecodeConfig,
    sources: &[Review],
) -> Result<Generated> {
    let memory = encode_reviews(model, bpe, sources)?;
    decode_memory(model, bpe, &memory, PropertySource::Plugin(plugin), cfg)
}

/// Summary of `sources` with explicitly supplied properties.
pub fn summarize_oracle(
    model: &Model,
    bpe: &BpeModel,
    cfg: &DecodeConfig,
    sources: &[Review],
    props: &PropertyVector,
) -> Result<Generated> {
    let memory = encode_reviews(model, bpe, sources)?;
    decode_memory(model, bpe, &memory, PropertySource::Fixed(props), cfg)
}

/// Next-token distribution after BOS, for probing how properties steer the
/// generator.
pub fn first_token_distribution(model: &Model, memory: &Memory, props: &[f64]) -> Result<Vec<f64>> {
    let task = model.has_task_embedding().then_some(TASK_SUMMARY);
    let mut step = GeneratorStep::new(model, memory, props, task)?;
    let lp = step.step(&[0], &[BOS])?;
    Ok(lp[0].iter().map(|l| l.exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scores depend on the whole prefix through a fixed table lookup.
    struct Toy {
        prefixes: Vec<Vec<usize>>,
        score: Box<dyn Fn(&[usize]) -> Vec<f64>>,
    }

    impl Toy {
        fn new(score: impl Fn(&[usize]) -> Vec<f64> + 'static) -> Self {
            Toy {
                prefixes: vec![vec![]],
                score: Box::new(score),
            }
        }
    }

    impl StepModel for Toy {
        fn vocab_size(&self) -> usize {
            3
        }

        fn step(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
            self.prefixes = parents
                .iter()
                .zip(tokens)
                .map(|(&p, &t)| {
                    let mut v = self.prefixes[p].clone();
                    v.push(t);
                    v
                })
                .collect();
            Ok(self.prefixes.iter().map(|p| (self.score)(&p[1..])).collect())
        }
    }

    fn normalize(raw: [f64; 3]) -> Vec<f64> {
        log_softmax(&raw)
    }

    // token 2 is EOS; BOS is encoded as 9 and never scored
    fn hand_built(prefix: &[usize]) -> Vec<f64> {
        let last = prefix.last().copied().unwrap_or(9);
        let raw = match (last, prefix.len()) {
            (9, _) => [1.0, 0.2, -1.0],
            (0, n) if n < 3 => [0.1, 1.2, 0.0],
            (0, _) => [0.3, 0.1, 1.5],
            (1, _) => [0.9, -0.4, 0.6],
            _ => [0.0, 0.0, 0.0],
        };
        normalize(raw)
    }

    fn exhaustive(score: &dyn Fn(&[usize]) -> Vec<f64>, cfg: &DecodeConfig) -> Hypothesis {
        let mut best_done: Option<Hypothesis> = None;
        let mut best_cut: Option<Hypothesis> = None;
        let mut stack = vec![(Vec::<usize>::new(), 0.0)];
        while let Some((seq, lp)) = stack.pop() {
            let probs = score(&seq);
            for tok in 0..3 {
                if !ngram_block(&seq, tok, cfg.block_n) {
                    continue;
                }
                let mut s = seq.clone();
                s.push(tok);
                let l = lp + probs[tok];
                let h = Hypothesis {
                    score: normalized_score(l, s.len(), cfg.length_normalization_alpha),
                    tokens: s.clone(),
                    log_prob: l,
                    finished: tok == 2,
                };
                let slot = if h.finished {
                    &mut best_done
                } else if s.len() == cfg.max_tokens {
                    &mut best_cut
                } else {
                    stack.push((s, l));
                    continue;
                };
                if slot.as_ref().is_none_or(|b| h.score > b.score) {
                    *slot = Some(h);
                }
            }
        }
        best_done.or(best_cut).unwrap()
    }

    fn wide(max_tokens: usize, block_n: usize) -> DecodeConfig {
        DecodeConfig {
            beam_size: 729,
            block_n,
            max_tokens,
            length_normalization_alpha: 0.8,
        }
    }

    #[test]
    fn blocking_cases() {
        assert!(!ngram_block(&[0, 1, 2, 0, 1], 2, 3));
        assert!(ngram_block(&[0, 1, 2, 0, 1], 3, 3));
        assert!(ngram_block(&[0], 0, 3));
        assert!(!ngram_block(&[5, 5], 5, 2));
    }

    #[test]
    fn hand_built_model_matches_exhaustive_search() {
        for max_tokens in 1..=6 {
            for block_n in [2, 3] {
                let cfg = wide(max_tokens, block_n);
                let got = beam_search(&mut Toy::new(hand_built), &cfg, 9, 2, &[]).unwrap();
                let want = exhaustive(&hand_built, &cfg);
                assert_eq!(got.tokens, want.tokens, "max_tokens {max_tokens} block {block_n}");
                assert!((got.score - want.score).abs() < 1e-12);
            }
        }
    }

    fn random_model(seed: u64) -> impl Fn(&[usize]) -> Vec<f64> + Clone {
        move |prefix: &[usize]| {
            let mut h = seed;
            for &t in prefix {
                h = h.wrapping_mul(31).wrapping_add(t as u64 + 1);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            normalize([rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
        }
    }

    proptest! {
        #[test]
        fn random_toys_match_exhaustive_search(seed in 0u64..10_000, max_tokens in 1usize..=6, block_n in 2usize..=3) {
            let f = random_model(seed);
            let cfg = wide(max_tokens, block_n);
            let got = beam_search(&mut Toy::new(f.clone()), &cfg, 9, 2, &[]).unwrap();
            let want = exhaustive(&f, &cfg);
            prop_assert_eq!(got.tokens, want.tokens);
        }

        #[test]
        fn unit_beam_is_greedy(seed in 0u64..10_000, max_tokens in 1usize..=8) {
            let f = random_model(seed);
            let cfg = DecodeConfig { beam_size: 1, block_n: 3, max_tokens, length_normalization_alpha: 0.8 };
            let got = beam_search(&mut Toy::new(f.clone()), &cfg, 9, 2, &[]).unwrap();
            let mut seq = Vec::new();
            loop {
                let lp = f(&seq);
                let tok = (0..3)
                    .filter(|&t| ngram_block(&seq, t, 3))
                    .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)));
                let Some(tok) = tok else { break };
                seq.push(tok);
                if tok == 2 || seq.len() == max_tokens {
                    break;
                }
            }
            prop_assert_eq!(got.tokens, seq);
        }

        #[test]
        fn kept_hypotheses_are_top_expansions(seed in 0u64..10_000, beam in 1usize..5) {
            // one search step against a direct ranking of all expansions
            let f = random_model(seed);
            let cfg = DecodeConfig { beam_size: beam, block_n: 3, max_tokens: 2, length_normalization_alpha: 0.0 };
            let got = beam_search(&mut Toy::new(f.clone()), &cfg, 9, 2, &[]).unwrap();
            let first = f(&[]);
            let mut firsts: Vec<usize> = (0..3).collect();
            firsts.sort_by(|&a, &b| first[b].total_cmp(&first[a]).then(a.cmp(&b)));
            firsts.truncate(beam);
            let mut all = Vec::new();
            for &a in &firsts {
                if a == 2 {
                    all.push((vec![2], first[2]));
                    continue;
                }
                let second = f(&[a]);
                for b in 0..3 {
                    all.push((vec![a, b], first[a] + second[b]));
                }
            }
            let mut kept: Vec<(Vec<usize>, f64)> = all.iter().filter(|x| x.0.len() == 2).cloned().collect();
            kept.sort_by(|x, y| y.1.total_cmp(&x.1));
            kept.truncate(beam);
            kept.extend(all.iter().filter(|x| x.0.len() == 1).cloned());
            let done = kept.iter().filter(|x| x.0.last() == Some(&2)).max_by(|x, y| x.1.total_cmp(&y.1));
            let cut = kept.iter().filter(|x| x.0.last() != Some(&2)).max_by(|x, y| x.1.total_cmp(&y.1));
            prop_assert_eq!(&got.tokens, &done.or(cut).unwrap().0);
        }
    }

    #[test]
    fn generator_step_matches_full_forward() {
        use crate::config::ModelConfig;
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_subword_emb: 10,
            d_len_emb: 2,
            d_model: 12,
            d_ffn: 16,
            vocab_size: 20,
            dropout_sublayer: 0.1,
            dropout_emb: 0.1,
            n_properties: NUM_PROPERTIES,
            max_len: 16,
        };
        let model = Model::init(&cfg, 3).unwrap();
        let memory = model
            .encode_sources(&[TokenSeq::new(vec![BOS, 5, 6, EOS]), TokenSeq::new(vec![BOS, 7, EOS])])
            .unwrap();
        let props = [0.4, 0.1, 0.3, 0.0, 0.0, 1.0, 0.0, 0.2, -0.1];
        let dcfg = DecodeConfig {
            beam_size: 3,
            block_n: 3,
            max_tokens: 6,
            length_normalization_alpha: 0.8,
        };
        let mut step = GeneratorStep::new(&model, &memory, &props, None).unwrap();
        let h = beam_search(&mut step, &dcfg, BOS, EOS, &BANNED).unwrap();
        let mut ids = vec![BOS];
        ids.extend(&h.tokens);
        let logits = model.generator_forward_raw(&TokenSeq::new(ids.clone()), &memory, &props).unwrap();
        let lp: f64 = h
            .tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| log_softmax(logits.row(i))[t])
            .sum();
        assert!((lp - h.log_prob).abs() < 1e-9, "{lp} vs {}", h.log_prob);
        assert!(h.tokens.iter().all(|t| !BANNED.contains(t)));
    }
}
