//! The shared encoder/generator Transformer.
//!
//! One pre-LN stack serves both roles. The encoder runs self-attention and
//! feed-forward sublayers over each source review separately; the generator
//! runs causal self-attention, cross-attention over the encoded sources and
//! the feed-forward sublayer. Generator inputs are the subword embedding, the
//! position embedding and the property vector, concatenated and projected to
//! the model width. The subword embedding doubles as the output projection.

use std::ops::Range;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::diff::{Graph, KeySpans, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::oracle::{PropertyVector, NUM_PROPERTIES};
use crate::textproc::{TokenSeq, NUM_SPECIALS, PAD};

pub const TASK_EMBEDDING: &str = "task.emb";
/// Rows of the task embedding table.
pub const TASK_REVIEW: usize = 0;
pub const TASK_SUMMARY: usize = 1;

/// Parameter names and shapes for a configuration, without allocating.
pub fn manifest(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let d = cfg.d_model;
    let mut m = vec![
        ("emb.sub".to_string(), (cfg.vocab_size, cfg.d_subword_emb)),
        ("emb.len".to_string(), (cfg.max_len, cfg.d_len_emb)),
        ("prop_proj.w".to_string(), (d + cfg.n_properties, d)),
        ("prop_proj.b".to_string(), (1, d)),
    ];
    for l in 0..cfg.n_layers {
        let p = format!("layer{l}");
        for ln in ["ln_self", "ln_cross", "ln_ffn"] {
            m.push((format!("{p}.{ln}.g"), (1, d)));
            m.push((format!("{p}.{ln}.b"), (1, d)));
        }
        for att in ["self", "cross"] {
            for w in ["q", "k", "v", "o"] {
                m.push((format!("{p}.{att}.w{w}"), (d, d)));
                m.push((format!("{p}.{att}.b{w}"), (1, d)));
            }
        }
        m.push((format!("{p}.ffn.w1"), (d, cfg.d_ffn)));
        m.push((format!("{p}.ffn.b1"), (1, cfg.d_ffn)));
        m.push((format!("{p}.ffn.w2"), (cfg.d_ffn, d)));
        m.push((format!("{p}.ffn.b2"), (1, d)));
    }
    m.push(("ln_final.g".to_string(), (1, d)));
    m.push(("ln_final.b".to_string(), (1, d)));
    m.push(("out.proj".to_string(), (d, cfg.d_subword_emb)));
    m.push(("out.bias".to_string(), (1, cfg.vocab_size)));
    m
}

/// Exact parameter count of the model, computed from the manifest.
pub fn param_count(cfg: &ModelConfig) -> usize {
    manifest(cfg).iter().map(|(_, (r, c))| r * c).sum()
}

/// Source reviews encoded one at a time and stacked. `blocks[i]` holds the
/// rows of source `i`; an all-padding source has an empty block.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    pub states: Tensor,
    pub blocks: Vec<Range<usize>>,
    pub source_ids: Vec<Vec<usize>>,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }

    /// The same sources in another order: block `i` of the result is block
    /// `order[i]` of `self`.
    pub fn permute_blocks(&self, order: &[usize]) -> Memory {
        let mut rows = Vec::new();
        let mut blocks = Vec::new();
        let mut ids = Vec::new();
        for &b in order {
            let start = rows.len();
            rows.extend(self.blocks[b].clone());
            blocks.push(start..rows.len());
            ids.push(self.source_ids[b].clone());
        }
        Memory {
            states: self.states.select_rows(&rows),
            blocks,
            source_ids: ids,
        }
    }
}

/// Encoded sources inside a graph.
#[derive(Clone, Debug)]
pub struct MemoryVar {
    pub states: Var,
    pub blocks: Vec<Range<usize>>,
}

/// Subword ids occurring in the sources. Special tokens are always absent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceVocabMask {
    pub present: Vec<bool>,
}

impl SourceVocabMask {
    pub fn from_sources<S: AsRef<[usize]>>(sources: &[S], vocab_size: usize) -> Result<Self> {
        let mut present = vec![false; vocab_size];
        for (pos, &id) in sources.iter().flat_map(|s| s.as_ref().iter()).enumerate() {
            if id >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    position: pos,
                    vocab: vocab_size,
                });
            }
            if id >= NUM_SPECIALS {
                present[id] = true;
            }
        }
        Ok(SourceVocabMask { present })
    }

    /// Ids whose probability mass the novelty term penalises.
    pub fn penalized(&self) -> Vec<bool> {
        self.present
            .iter()
            .enumerate()
            .map(|(id, &p)| !p && id >= NUM_SPECIALS)
            .collect()
    }
}

/// One teacher-forced sequence in a generator batch.
#[derive(Clone, Debug)]
pub struct SeqTarget {
    /// Full sequence starting with BOS; positions `0..n-1` are inputs and
    /// `1..n` are predicted.
    pub tokens: Vec<usize>,
    /// Memory blocks the sequence may attend to.
    pub blocks: Vec<usize>,
    /// Row of the property matrix used for this sequence.
    pub prop_row: usize,
    /// Index into the novelty mask list, if the novelty term applies.
    pub mask: Option<usize>,
}

/// Summed parts of a batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub nll: f64,
    pub novelty: f64,
    pub tokens: usize,
}

impl LossParts {
    pub fn mean_nll(&self) -> f64 {
        self.nll / self.tokens.max(1) as f64
    }

    pub fn mean_novelty(&self) -> f64 {
        self.novelty / self.tokens.max(1) as f64
    }
}

/// Per-layer key/value rows cached during incremental decoding.
#[derive(Clone, Debug)]
pub struct DecodeCache {
    self_k: Vec<Tensor>,
    self_v: Vec<Tensor>,
    cross_k: Vec<Tensor>,
    cross_v: Vec<Tensor>,
    memory_rows: usize,
    rows: usize,
}

impl DecodeCache {
    /// Number of cached token rows.
    pub fn rows(&self) -> usize {
        self.rows
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

fn strip_pad(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&t| t != PAD).collect()
}

impl Model {
    /// Glorot-uniform matrices, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, (r, c)) in manifest(cfg) {
            let t = if name.ends_with(".g") {
                Tensor::filled(r, c, 1.0)
            } else if r == 1 {
                Tensor::zeros(r, c)
            } else {
                Tensor::glorot(r, c, &mut rng)
            };
            params.insert(name, t);
        }
        Ok(Model {
            cfg: cfg.clone(),
            params,
        })
    }

    /// Adds the two-row task embedding used by multi-task training.
    pub fn add_task_embedding(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params
            .insert(TASK_EMBEDDING, Tensor::glorot(2, self.cfg.d_model, &mut rng));
    }

    pub fn has_task_embedding(&self) -> bool {
        self.params.contains(TASK_EMBEDDING)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Checks that every manifest tensor exists with the right shape.
    pub fn check_shapes(&self) -> Result<()> {
        for (name, shape) in manifest(&self.cfg) {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        if let Some(t) = self.params.get(TASK_EMBEDDING) {
            if t.shape() != (2, self.cfg.d_model) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{TASK_EMBEDDING}` has shape {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        g.param(&self.params, name)
    }

    fn linear(&self, g: &mut Graph, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var> {
        let wv = self.p(g, &format!("{prefix}.{w}"))?;
        let bv = self.p(g, &format!("{prefix}.{b}"))?;
        let y = g.matmul(x, wv)?;
        g.add_row(y, bv)
    }

    fn ln(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.p(g, &format!("{prefix}.g"))?;
        let bias = self.p(g, &format!("{prefix}.b"))?;
        g.layer_norm(x, gain, bias)
    }

    fn check_positions(&self, positions: &[usize]) -> Result<()> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.cfg.max_len) {
            return Err(Error::Invalid(format!(
                "position {p} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some((pos, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= self.cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                position: pos,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Concatenated subword and position embeddings, `T x d_model`.
    fn embed(&self, g: &mut Graph, ids: &[usize], positions: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        self.check_positions(positions)?;
        let sub = self.p(g, "emb.sub")?;
        let len = self.p(g, "emb.len")?;
        let a = g.embedding(sub, ids)?;
        let b = g.embedding(len, positions)?;
        let x = g.concat_cols(&[a, b])?;
        Ok(g.dropout(x, self.cfg.dropout_emb))
    }

    fn residual(&self, g: &mut Graph, x: Var, branch: Var) -> Result<Var> {
        let d = g.dropout(branch, self.cfg.dropout_sublayer);
        g.add(x, d)
    }

    fn attention_out(
        &self,
        g: &mut Graph,
        prefix: &str,
        q: Var,
        k: Var,
        v: Var,
        spans: Rc<KeySpans>,
    ) -> Result<Var> {
        let a = g.attention(q, k, v, self.cfg.n_heads, spans, 0.0)?;
        self.linear(g, a, prefix, "wo", "bo")
    }

    fn self_sublayer(&self, g: &mut Graph, l: usize, x: Var, spans: Rc<KeySpans>) -> Result<Var> {
        let a = self.ln(g, x, &format!("layer{l}.ln_self"))?;
        let pre = format!("layer{l}.self");
        let q = self.linear(g, a, &pre, "wq", "bq")?;
        let k = self.linear(g, a, &pre, "wk", "bk")?;
        let v = self.linear(g, a, &pre, "wv", "bv")?;
        let o = self.attention_out(g, &pre, q, k, v, spans)?;
        self.residual(g, x, o)
    }

    fn cross_sublayer(
        &self,
        g: &mut Graph,
        l: usize,
        x: Var,
        k: Var,
        v: Var,
        spans: Rc<KeySpans>,
    ) -> Result<Var> {
        let a = self.ln(g, x, &format!("layer{l}.ln_cross"))?;
        let pre = format!("layer{l}.cross");
        let q = self.linear(g, a, &pre, "wq", "bq")?;
        let o = self.attention_out(g, &pre, q, k, v, spans)?;
        self.residual(g, x, o)
    }

    fn cross_kv(&self, g: &mut Graph, l: usize, memory: Var) -> Result<(Var, Var)> {
        let pre = format!("layer{l}.cross");
        let k = self.linear(g, memory, &pre, "wk", "bk")?;
        let v = self.linear(g, memory, &pre, "wv", "bv")?;
        Ok((k, v))
    }

    fn ffn_sublayer(&self, g: &mut Graph, l: usize, x: Var) -> Result<Var> {
        let a = self.ln(g, x, &format!("layer{l}.ln_ffn"))?;
        let pre = format!("layer{l}.ffn");
        let h = self.linear(g, a, &pre, "w1", "b1")?;
        let h = g.relu(h);
        let o = self.linear(g, h, &pre, "w2", "b2")?;
        self.residual(g, x, o)
    }

    /// Final layer norm, projection to the embedding width and scoring against
    /// the shared subword embedding.
    fn output_logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln(g, x, "ln_final")?;
        let proj = self.p(g, "out.proj")?;
        let h = g.matmul(h, proj)?;
        let emb = self.p(g, "emb.sub")?;
        let logits = g.matmul_bt(h, emb)?;
        let bias = self.p(g, "out.bias")?;
        g.add_row(logits, bias)
    }

    /// Encodes each source on its own and stacks the results.
    pub fn encode_graph<S: AsRef<[usize]>>(&self, g: &mut Graph, sources: &[S]) -> Result<MemoryVar> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::new();
        let mut blocks = Vec::new();
        for s in sources {
            let toks = strip_pad(s.as_ref());
            if toks.len() > self.cfg.max_len {
                return Err(Error::Invalid(format!(
                    "source of {} tokens exceeds max_len {}",
                    toks.len(),
                    self.cfg.max_len
                )));
            }
            let start = ids.len();
            positions.extend(0..toks.len());
            lengths.push(toks.len());
            ids.extend(toks);
            blocks.push(start..ids.len());
        }
        if ids.is_empty() {
            return Err(Error::Empty("encode_sources: no source tokens".into()));
        }
        let spans = Rc::new(KeySpans::block_segments(&lengths));
        let mut x = self.embed(g, &ids, &positions)?;
        for l in 0..self.cfg.n_layers {
            x = self.self_sublayer(g, l, x, spans.clone())?;
            x = self.ffn_sublayer(g, l, x)?;
        }
        let states = self.ln(g, x, "ln_final")?;
        Ok(MemoryVar { states, blocks })
    }

    /// Eval-mode encoding of token sequences.
    pub fn encode_sources(&self, sources: &[TokenSeq]) -> Result<Memory> {
        let mut g = Graph::eval();
        let ids: Vec<&[usize]> = sources.iter().map(|s| s.ids.as_slice()).collect();
        let mv = self.encode_graph(&mut g, &ids)?;
        Ok(Memory {
            states: g.value(mv.states).clone(),
            blocks: mv.blocks,
            source_ids: sources.iter().map(|s| strip_pad(&s.ids)).collect(),
        })
    }

    /// Logits for every input position of every sequence, stacked. `props`
    /// holds one property row per `prop_row` index. Without memory the
    /// cross-attention sublayers are skipped.
    pub fn generate_graph(
        &self,
        g: &mut Graph,
        seqs: &[SeqTarget],
        memory: Option<&MemoryVar>,
        props: Var,
        task: Option<usize>,
    ) -> Result<Var> {
        let pv = g.value(props);
        if pv.cols() != self.cfg.n_properties {
            return Err(Error::shape(
                "generator",
                format!("property matrix {:?}, expected {} columns", pv.shape(), self.cfg.n_properties),
            ));
        }
        let n_prop_rows = pv.rows();
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::new();
        let mut prop_rows = Vec::new();
        let mut cross = Vec::new();
        for s in seqs {
            if s.tokens.len() < 2 {
                return Err(Error::Invalid("target needs BOS and at least one token".into()));
            }
            if s.prop_row >= n_prop_rows {
                return Err(Error::shape("generator", format!("prop_row {} of {n_prop_rows}", s.prop_row)));
            }
            let n = s.tokens.len() - 1;
            ids.extend_from_slice(&s.tokens[..n]);
            positions.extend(0..n);
            lengths.push(n);
            prop_rows.extend(std::iter::repeat(s.prop_row).take(n));
            if let Some(m) = memory {
                let mut spans = Vec::new();
                for &b in &s.blocks {
                    let r = m.blocks.get(b).ok_or_else(|| {
                        Error::shape("generator", format!("block {b} of {}", m.blocks.len()))
                    })?;
                    if !r.is_empty() {
                        spans.push(r.clone());
                    }
                }
                for _ in 0..n {
                    cross.push(spans.clone());
                }
            }
        }
        let x = self.embed(g, &ids, &positions)?;
        let pr = g.select_rows(props, &prop_rows)?;
        let x = g.concat_cols(&[x, pr])?;
        let mut x = self.linear(g, x, "prop_proj", "w", "b")?;
        if let Some(t) = task {
            let table = self.p(g, TASK_EMBEDDING)?;
            let rows = g.select_rows(table, &vec![t; ids.len()])?;
            x = g.add(x, rows)?;
        }
        let self_spans = Rc::new(KeySpans::causal_segments(&lengths));
        let cross_spans = Rc::new(KeySpans::new(cross));
        for l in 0..self.cfg.n_layers {
            x = self.self_sublayer(g, l, x, self_spans.clone())?;
            if let Some(m) = memory {
                let (k, v) = self.cross_kv(g, l, m.states)?;
                x = self.cross_sublayer(g, l, x, k, v, cross_spans.clone())?;
            }
            x = self.ffn_sublayer(g, l, x)?;
        }
        self.output_logits(g, x)
    }

    /// Teacher-forced loss `(NLL + lambda * novelty) / tokens` for a batch.
    /// `masks` are the per-sequence source vocabularies referenced by
    /// `SeqTarget::mask`; sequences without a mask add no novelty term.
    #[allow(clippy::too_many_arguments)]
    pub fn sequence_loss(
        &self,
        g: &mut Graph,
        seqs: &[SeqTarget],
        memory: Option<&MemoryVar>,
        props: Var,
        task: Option<usize>,
        masks: &[SourceVocabMask],
        lambda: f64,
    ) -> Result<(Var, LossParts)> {
        let logits = self.generate_graph(g, seqs, memory, props, task)?;
        let mut targets = Vec::new();
        let mut row_sets = Vec::new();
        let mut masked_rows = Vec::new();
        for s in seqs {
            for (t, &tok) in s.tokens[1..].iter().enumerate() {
                if let Some(m) = s.mask {
                    if m >= masks.len() {
                        return Err(Error::shape("novelty", format!("mask {m} of {}", masks.len())));
                    }
                    masked_rows.push(targets.len());
                    row_sets.push(m);
                }
                let _ = t;
                targets.push(tok);
            }
        }
        self.check_ids(&targets)?;
        if targets.iter().all(|&t| t == PAD) {
            return Err(Error::Invalid("target consists only of padding".into()));
        }
        let keep: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] != PAD).collect();
        let tokens = keep.len();
        let (scored, kept_targets) = if keep.len() == targets.len() {
            (logits, targets.clone())
        } else {
            let sel = g.select_rows(logits, &keep)?;
            (sel, keep.iter().map(|&i| targets[i]).collect())
        };
        let nll = g.cross_entropy_sum(scored, &kept_targets)?;
        let mut parts = LossParts {
            nll: g.value(nll).item(),
            novelty: 0.0,
            tokens,
        };
        let mut total = nll;
        if !masked_rows.is_empty() {
            for m in masks {
                if m.present.len() != self.cfg.vocab_size {
                    return Err(Error::shape(
                        "novelty",
                        format!("mask of {} for vocab {}", m.present.len(), self.cfg.vocab_size),
                    ));
                }
            }
            let sets = Rc::new(masks.iter().map(|m| m.penalized()).collect::<Vec<_>>());
            let rows = g.select_rows(logits, &masked_rows)?;
            let nov = g.prob_mass(rows, &row_sets, sets)?;
            parts.novelty = g.value(nov).item();
            let weighted = g.scale(nov, lambda);
            total = g.add(total, weighted)?;
        }
        let loss = g.scale(total, 1.0 / tokens as f64);
        Ok((loss, parts))
    }

    /// Eval-mode logits `(|target| x vocab)` for one target given encoded
    /// sources and properties.
    pub fn generator_forward(
        &self,
        target: &TokenSeq,
        memory: &Memory,
        props: &PropertyVector,
    ) -> Result<Tensor> {
        self.generator_forward_raw(target, memory, &props.to_array())
    }

    pub fn generator_forward_raw(&self, target: &TokenSeq, memory: &Memory, props: &[f64]) -> Result<Tensor> {
        if props.len() != self.cfg.n_properties {
            return Err(Error::shape(
                "generator",
                format!("property vector of {} values, expected {}", props.len(), self.cfg.n_properties),
            ));
        }
        let mut g = Graph::eval();
        let states = g.constant(memory.states.clone());
        let mv = MemoryVar {
            states,
            blocks: memory.blocks.clone(),
        };
        // a dummy final token turns every target position into an input
        let mut tokens = target.ids.clone();
        tokens.push(PAD);
        let seq = SeqTarget {
            tokens,
            blocks: (0..memory.blocks.len()).collect(),
            prop_row: 0,
            mask: None,
        };
        let pv = g.constant(Tensor::row_vector(props.to_vec()));
        let logits = self.generate_graph(&mut g, &[seq], Some(&mv), pv, None)?;
        Ok(g.value(logits).clone())
    }

    /// Starts incremental decoding against fixed memory.
    pub fn start_decode(&self, memory: &Memory) -> Result<DecodeCache> {
        let mut g = Graph::eval();
        let states = g.constant(memory.states.clone());
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for l in 0..self.cfg.n_layers {
            let (k, v) = self.cross_kv(&mut g, l, states)?;
            cross_k.push(g.value(k).clone());
            cross_v.push(g.value(v).clone());
        }
        let d = self.cfg.d_model;
        Ok(DecodeCache {
            self_k: vec![Tensor::zeros(0, d); self.cfg.n_layers],
            self_v: vec![Tensor::zeros(0, d); self.cfg.n_layers],
            cross_k,
            cross_v,
            memory_rows: memory.len(),
            rows: 0,
        })
    }

    /// Feeds one new token per hypothesis and returns next-token logits
    /// `(B x vocab)`. `history[b]` lists the cache rows of hypothesis `b`'s
    /// earlier tokens; the new tokens occupy rows `cache.rows()..+B`, in order.
    pub fn decode_step(
        &self,
        cache: &mut DecodeCache,
        history: &[Vec<usize>],
        tokens: &[usize],
        props: &[f64],
        task: Option<usize>,
    ) -> Result<Tensor> {
        let b = tokens.len();
        if history.len() != b {
            return Err(Error::shape("decode_step", format!("{} histories for {b} tokens", history.len())));
        }
        if props.len() != self.cfg.n_properties {
            return Err(Error::shape("decode_step", format!("{} property values", props.len())));
        }
        let base = cache.rows;
        let positions: Vec<usize> = history.iter().map(|h| h.len()).collect();
        let mut g = Graph::eval();
        let x = self.embed(&mut g, tokens, &positions)?;
        let pv = g.constant(Tensor::from_vec(b, props.len(), props.repeat(b)));
        let x = g.concat_cols(&[x, pv])?;
        let mut x = self.linear(&mut g, x, "prop_proj", "w", "b")?;
        if let Some(t) = task {
            let table = self.p(&mut g, TASK_EMBEDDING)?;
            let rows = g.select_rows(table, &vec![t; b])?;
            x = g.add(x, rows)?;
        }
        let self_spans = Rc::new(KeySpans::new(
            history
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    let mut s: Vec<Range<usize>> = h.iter().map(|&r| r..r + 1).collect();
                    s.push(base + i..base + i + 1);
                    s
                })
                .collect(),
        ));
        let cross_spans = Rc::new(KeySpans::new(vec![
            if cache.memory_rows > 0 {
                vec![0..cache.memory_rows]
            } else {
                vec![]
            };
            b
        ]));
        for l in 0..self.cfg.n_layers {
            let a = self.ln(&mut g, x, &format!("layer{l}.ln_self"))?;
            let pre = format!("layer{l}.self");
            let q = self.linear(&mut g, a, &pre, "wq", "bq")?;
            let k = self.linear(&mut g, a, &pre, "wk", "bk")?;
            let v = self.linear(&mut g, a, &pre, "wv", "bv")?;
            append_rows(&mut cache.self_k[l], g.value(k));
            append_rows(&mut cache.self_v[l], g.value(v));
            let kc = g.constant(cache.self_k[l].clone());
            let vc = g.constant(cache.self_v[l].clone());
            let o = self.attention_out(&mut g, &pre, q, kc, vc, self_spans.clone())?;
            x = self.residual(&mut g, x, o)?;
            if cache.memory_rows > 0 {
                let kc = g.constant(cache.cross_k[l].clone());
                let vc = g.constant(cache.cross_v[l].clone());
                x = self.cross_sublayer(&mut g, l, x, kc, vc, cross_spans.clone())?;
            }
            x = self.ffn_sublayer(&mut g, l, x)?;
        }
        cache.rows += b;
        let logits = self.output_logits(&mut g, x)?;
        Ok(g.value(logits).clone())
    }
}

fn append_rows(dst: &mut Tensor, src: &Tensor) {
    let mut data = std::mem::take(dst).into_vec();
    data.extend_from_slice(src.data());
    *dst = Tensor::from_vec(data.len() / src.cols(), src.cols(), data);
}

/// Per-sequence property rows for a batch, as a constant.
pub fn props_constant(g: &mut Graph, props: &[[f64; NUM_PROPERTIES]]) -> Var {
    let data: Vec<f64> = props.iter().flat_map(|p| p.iter().copied()).collect();
    g.constant(Tensor::from_vec(props.len(), NUM_PROPERTIES, data))
}
