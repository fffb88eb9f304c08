//! Optimisation: Adam, the shared stage loop, and every training stage.
//!
//! Batches are a pure function of `(seed, step)`, dropout masks are seeded
//! per step, and optimiser moments are checkpointed with the parameters, so
//! a stage resumed from a checkpoint continues bit-for-bit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::TrainingState;
use crate::config::{DistanceWeights, StageConfig};
use crate::corpus::{leave_one_out, AnnotatedEntry, ReviewGroup};
use crate::diff::{Gradients, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{props_constant, LossParts, Memory, Model, SeqTarget, SourceVocabMask, TASK_REVIEW, TASK_SUMMARY};
use crate::oracle::{Oracle, NUM_PROPERTIES};
use crate::plugin::{distance_graph, Plugin};
use crate::textproc::{BpeModel, EOS};

pub const CLIP_NORM: f64 = 1.0;

/// Bias-corrected Adam with lazily created moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }
}

impl Adam {
    /// One update of every parameter that has a gradient. Parameters are
    /// looked up in `stores` in order.
    pub fn update(&mut self, stores: &mut [&mut ParamStore], grads: &Gradients, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    stage: "adam".into(),
                    step: self.step as usize,
                    detail: format!("gradient of `{name}`"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let Some(p) = stores.iter_mut().find_map(|s| s.get_mut(name)) else {
                return Err(Error::Invalid(format!("gradient for unknown parameter `{name}`")));
            };
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("`{name}` {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            if !self.m.contains(name) {
                let (r, c) = g.shape();
                self.m.insert(name, Tensor::zeros(r, c));
                self.v.insert(name, Tensor::zeros(r, c));
            }
            let m = self.m.get_mut(name).expect("moment exists");
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.get_mut(name).expect("moment exists");
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let m = self.m.get(name).expect("moment exists");
            let v = self.v.get(name).expect("moment exists");
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn to_store(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.m.iter() {
            out.insert(format!("adam.m.{n}"), t.clone());
        }
        for (n, t) in self.v.iter() {
            out.insert(format!("adam.v.{n}"), t.clone());
        }
        out
    }

    fn from_store(store: &ParamStore, step: u64) -> Self {
        let mut a = Adam {
            step,
            ..Adam::default()
        };
        for (n, t) in store.iter() {
            if let Some(rest) = n.strip_prefix("adam.m.") {
                a.m.insert(rest, t.clone());
            } else if let Some(rest) = n.strip_prefix("adam.v.") {
                a.v.insert(rest, t.clone());
            }
        }
        a
    }
}

/// Scales gradients so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_assign(k);
        }
    }
    norm
}

/// A review group ready for training: tokenised reviews plus, for each review
/// as target, its oracle properties and the vocabulary of the other reviews.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupData {
    pub group_id: String,
    pub tokens: Vec<Vec<usize>>,
    pub props: Vec<[f64; NUM_PROPERTIES]>,
    pub masks: Vec<SourceVocabMask>,
}

/// An annotated entry ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryData {
    pub group_id: String,
    pub sources: Vec<Vec<usize>>,
    pub references: Vec<Vec<usize>>,
    pub ref_props: Vec<[f64; NUM_PROPERTIES]>,
}

/// BOS..EOS token ids, cut to `max_len` with the final EOS kept.
pub fn tokenize(bpe: &BpeModel, text: &str, max_len: usize) -> Vec<usize> {
    let mut ids = bpe.encode(text, true).ids;
    if ids.len() > max_len {
        ids.truncate(max_len);
        if let Some(last) = ids.last_mut() {
            *last = EOS;
        }
    }
    ids
}

pub fn prepare_groups(
    groups: &[ReviewGroup],
    bpe: &BpeModel,
    oracle: &Oracle,
    max_len: usize,
) -> Result<Vec<GroupData>> {
    let vocab = bpe.vocab_size();
    groups
        .iter()
        .map(|g| {
            let tokens: Vec<Vec<usize>> = g.reviews.iter().map(|r| tokenize(bpe, &r.text, max_len)).collect();
            let mut props = Vec::new();
            let mut masks = Vec::new();
            for (j, inst) in leave_one_out(g).iter().enumerate() {
                props.push(oracle.compute_properties(inst)?.to_array());
                let others: Vec<&Vec<usize>> =
                    tokens.iter().enumerate().filter(|(k, _)| *k != j).map(|(_, t)| t).collect();
                masks.push(SourceVocabMask::from_sources(&others, vocab)?);
            }
            Ok(GroupData {
                group_id: g.group_id.clone(),
                tokens,
                props,
                masks,
            })
        })
        .collect()
}

pub fn prepare_summaries(
    entries: &[&AnnotatedEntry],
    bpe: &BpeModel,
    oracle: &Oracle,
    max_len: usize,
) -> Result<Vec<SummaryData>> {
    entries
        .iter()
        .map(|e| {
            let mut ref_props = Vec::new();
            for r in &e.references {
                ref_props.push(oracle.summary_properties(r, &e.sources)?.to_array());
            }
            Ok(SummaryData {
                group_id: e.group_id.clone(),
                sources: e.sources.iter().map(|r| tokenize(bpe, &r.text, max_len)).collect(),
                references: e.references.iter().map(|r| tokenize(bpe, r, max_len)).collect(),
                ref_props,
            })
        })
        .collect()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    pub novelty: f64,
    pub grad_norm: f64,
}

impl std::fmt::Display for LogRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "stage={} step={} loss={:.6} nll={:.6} novelty={:.6} grad_norm={:.4}",
            self.stage, self.step, self.loss, self.nll, self.novelty, self.grad_norm
        )
    }
}

/// Result of a stage: loss on a fixed probe set before and after, plus the
/// periodic log records.
#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: String,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub log: Vec<LogRecord>,
}

/// Where and how often a stage saves resumable checkpoints, and where its
/// log lines go.
#[derive(Clone, Debug, Default)]
pub struct StageIo {
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub log_file: Option<PathBuf>,
    /// Stop after this many steps (for interruption tests); the checkpoint
    /// is saved first.
    pub stop_after: Option<usize>,
}

/// Which stream a batch is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Review,
    Summary,
}

/// The review/summary alternation for multi-task training.
pub fn mtl_schedule(ratio: [usize; 2], steps: usize) -> Vec<Task> {
    let period = ratio[0] + ratio[1];
    (0..steps)
        .map(|s| if s % period < ratio[0] { Task::Review } else { Task::Summary })
        .collect()
}

/// Deterministic sub-seed for stream `a` of a run seeded with `seed`.
pub fn mix(seed: u64, a: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Item indices of batch number `k` in a stream of `n` items reshuffled
/// every epoch.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, k: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let bs = batch_size.clamp(1, n);
    let per_epoch = n.div_ceil(bs);
    let epoch = k / per_epoch;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
    let start = (k % per_epoch) * bs;
    perm[start..(start + bs).min(n)].to_vec()
}

type StepFn<'a> = dyn FnMut(&TrainingState, Task, &[usize], u64) -> Result<(f64, LossParts, Gradients)> + 'a;

const META_STAGE: &str = "stage";
const META_STEP: &str = "stage.step";
const META_ADAM_STEP: &str = "adam.step";

fn save_progress(path: &Path, state: &TrainingState, adam: &Adam, stage: &str, step: usize) -> Result<()> {
    let mut st = state.clone();
    st.extra = adam.to_store();
    st.metadata.insert(META_STAGE.into(), stage.into());
    st.metadata.insert(META_STEP.into(), step.to_string());
    st.metadata.insert(META_ADAM_STEP.into(), adam.step.to_string());
    st.save(path)
}

/// Generic stage loop. `n_items` gives the stream sizes for review and
/// summary batches; `schedule[s]` picks the stream of step `s`.
fn optimize(
    name: &str,
    cfg: &StageConfig,
    seed: u64,
    io: &StageIo,
    state: &mut TrainingState,
    schedule: &[Task],
    n_items: [usize; 2],
    step_fn: &mut StepFn<'_>,
) -> Result<Vec<LogRecord>> {
    let mut adam = Adam::default();
    let mut start = 0;
    if let Some(path) = &io.checkpoint {
        if path.exists() {
            let saved = TrainingState::load(path)?;
            if saved.metadata.get(META_STAGE).map(String::as_str) == Some(name) {
                let step: usize = saved.metadata.get(META_STEP).and_then(|s| s.parse().ok()).unwrap_or(0);
                let astep: u64 = saved.metadata.get(META_ADAM_STEP).and_then(|s| s.parse().ok()).unwrap_or(0);
                adam = Adam::from_store(&saved.extra, astep);
                let mut restored = saved;
                restored.extra = ParamStore::new();
                restored.metadata = state.metadata.clone();
                *state = restored;
                start = step;
                log::info!("{name}: resuming at step {step}");
            }
        }
    }
    let mut log = Vec::new();
    let mut counters = [0usize; 2];
    for task in &schedule[..start.min(schedule.len())] {
        counters[*task as usize] += 1;
    }
    let mut log_out = match &io.log_file {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };
    for (step, &task) in schedule.iter().enumerate().skip(start) {
        let stream = task as usize;
        let items = batch_indices(n_items[stream], cfg.batch_size, mix(seed, 17 + stream as u64), counters[stream]);
        counters[stream] += 1;
        let (loss, parts, mut grads) = step_fn(state, task, &items, mix(seed, 1_000_003 + step as u64))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                stage: name.into(),
                step,
                detail: format!("loss {loss}"),
            });
        }
        let grad_norm = clip_global_norm(&mut grads, CLIP_NORM);
        {
            let TrainingState { model, plugin, .. } = state;
            let mut stores: Vec<&mut ParamStore> = vec![&mut model.params];
            if let Some(p) = plugin {
                stores.push(&mut p.params);
            }
            adam.update(&mut stores, &grads, cfg.lr).map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite {
                    stage: name.into(),
                    step,
                    detail,
                },
                other => other,
            })?;
        }
        let done = step + 1;
        if done % cfg.log_every == 0 || done == schedule.len() {
            let rec = LogRecord {
                stage: name.into(),
                step: done,
                loss,
                nll: parts.nll / parts.tokens.max(1) as f64,
                novelty: parts.novelty / parts.tokens.max(1) as f64,
                grad_norm,
            };
            log::debug!("{rec}");
            if let Some(f) = log_out.as_mut() {
                writeln!(f, "{rec}").map_err(|e| Error::io(io.log_file.as_ref().expect("log path"), e))?;
            }
            log.push(rec);
        }
        if let Some(path) = &io.checkpoint {
            let periodic = io.checkpoint_every > 0 && done % io.checkpoint_every == 0;
            let stopping = io.stop_after == Some(done);
            if periodic || stopping {
                save_progress(path, state, &adam, name, done)?;
            }
            if stopping {
                return Err(Error::Invalid(format!("{name}: stopped after {done} steps")));
            }
        }
    }
    Ok(log)
}

fn trainable_graph(cfg: &StageConfig, seed: u64) -> Graph {
    let c = cfg.clone();
    Graph::new(true, seed).with_trainable(move |n| c.is_trainable(n))
}

fn loo_targets(n: usize, with_mask: bool) -> Vec<SeqTarget> {
    (0..n)
        .map(|j| SeqTarget {
            tokens: Vec::new(),
            blocks: (0..n).filter(|&k| k != j).collect(),
            prop_row: j,
            mask: with_mask.then_some(j),
        })
        .collect()
}

/// How group properties are fed to the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    Oracle,
    /// Zero property vectors: the unconditioned variant.
    Zero,
}

/// Leave-one-out loss of one group, built into `g`.
fn group_loss(
    model: &Model,
    g: &mut Graph,
    group: &GroupData,
    cond: Conditioning,
    lambda: Option<f64>,
    task: Option<usize>,
) -> Result<(crate::diff::Var, LossParts)> {
    let n = group.tokens.len();
    let mem = model.encode_graph(g, &group.tokens)?;
    let mut seqs = loo_targets(n, lambda.is_some());
    for (s, t) in seqs.iter_mut().zip(&group.tokens) {
        s.tokens = t.clone();
    }
    let props = match cond {
        Conditioning::Oracle => props_constant(g, &group.props),
        Conditioning::Zero => props_constant(g, &vec![[0.0; NUM_PROPERTIES]; n]),
    };
    model.sequence_loss(g, &seqs, Some(&mem), props, task, &group.masks, lambda.unwrap_or(0.0))
}

fn mean_losses(
    g: &mut Graph,
    parts: Vec<(crate::diff::Var, LossParts)>,
) -> Result<(crate::diff::Var, LossParts)> {
    let n = parts.len();
    let mut total = LossParts::default();
    let mut acc = None;
    for (v, p) in parts {
        total.nll += p.nll;
        total.novelty += p.novelty;
        total.tokens += p.tokens;
        acc = Some(match acc {
            None => v,
            Some(a) => g.add(a, v)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Empty("empty batch".into()))?;
    Ok((g.scale(acc, 1.0 / n as f64), total))
}

fn backward(g: &mut Graph, loss: crate::diff::Var, parts: LossParts) -> Result<(f64, LossParts, Gradients)> {
    let value = g.value(loss).item();
    g.backward(loss)?;
    Ok((value, parts, g.param_grads()))
}

fn steps_schedule(cfg: &StageConfig, n: usize) -> Vec<Task> {
    vec![Task::Review; cfg.total_steps(n)]
}

fn probe(n: usize) -> Vec<usize> {
    (0..n.min(8)).collect()
}

/// Mean eval-mode leave-one-out loss over a set of groups.
pub fn eval_group_loss(
    model: &Model,
    groups: &[GroupData],
    cond: Conditioning,
    lambda: Option<f64>,
    task: Option<usize>,
) -> Result<f64> {
    let mut total = 0.0;
    for gd in groups {
        let mut g = Graph::eval();
        let (l, _) = group_loss(model, &mut g, gd, cond, lambda, task)?;
        total += g.value(l).item();
    }
    Ok(total / groups.len().max(1) as f64)
}

fn pick<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}

/// Plain language-model pretraining on single reviews: no memory, zero
/// properties.
pub fn pretrain_lm(
    state: &mut TrainingState,
    reviews: &[Vec<usize>],
    cfg: &StageConfig,
    seed: u64,
    io: &StageIo,
) -> Result<StageReport> {
    let lm_loss = |model: &Model, g: &mut Graph, idx: &[usize]| {
        let seqs: Vec<SeqTarget> = idx
            .iter()
            .map(|&i| SeqTarget {
                tokens: reviews[i].clone(),
                blocks: vec![],
                prop_row: 0,
                mask: None,
            })
            .collect();
        let props = props_constant(g, &[[0.0; NUM_PROPERTIES]]);
        model.sequence_loss(g, &seqs, None, props, None, &[], 0.0)
    };
    let probe_idx: Vec<usize> = (0..reviews.len().min(64)).collect();
    let eval = |model: &Model| -> Result<f64> {
        let mut g = Graph::eval();
        let (l, _) = lm_loss(model, &mut g, &probe_idx)?;
        Ok(g.value(l).item())
    };
    let initial = eval(&state.model)?;
    let schedule = steps_schedule(cfg, reviews.len());
    let log = optimize(
        "pretrain_lm",
        cfg,
        seed,
        io,
        state,
        &schedule,
        [reviews.len(), 0],
        &mut |st, _, idx, s| {
            let mut g = trainable_graph(cfg, s);
            let (l, p) = lm_loss(&st.model, &mut g, idx)?;
            backward(&mut g, l, p)
        },
    )?;
    Ok(StageReport {
        stage: "pretrain_lm".into(),
        steps: schedule.len(),
        initial_loss: initial,
        final_loss: eval(&state.model)?,
        log,
    })
}

/// Leave-one-out training, with oracle properties or (for the unconditioned
/// variant) zero properties.
pub fn train_loo(
    state: &mut TrainingState,
    groups: &[GroupData],
    cond: Conditioning,
    cfg: &StageConfig,
    seed: u64,
    io: &StageIo,
) -> Result<StageReport> {
    loo_stage("train_loo", state, groups, cond, None, cfg, seed, io)
}

/// Leave-one-out training with the novelty penalty weighted by `cfg.lambda`.
pub fn novelty_phase(
    state: &mut TrainingState,
    groups: &[GroupData],
    cfg: &StageConfig,
    seed: u64,
    io: &StageIo,
) -> Result<StageReport> {
    loo_stage("novelty_phase", state, groups, Conditioning::Oracle, Some(cfg.lambda), cfg, seed, io)
}

#[allow(clippy::too_many_arguments)]
fn loo_stage(
    name: &str,
    state: &mut TrainingState,
    groups: &[GroupData],
    cond: Conditioning,
    lambda: Option<f64>,
    cfg: &StageConfig,
    seed: u64,
    io: &StageIo,
) -> Result<StageReport> {
    if groups.is_empty() {
        return Err(Error::Empty(format!("{name}: no groups")));
    }
    let probe_groups = pick(groups, &probe(groups.len()));
    let initial = eval_group_loss(&state.model, &probe_groups, cond, lambda, None)?;
    let schedule = steps_schedule(cfg, groups.len());
    let log = optimize(name, cfg, seed, io, state, &schedule, [groups.len(), 0], &mut |st, _, idx, s| {
        let mut g = trainable_graph(cfg, s);
        let mut parts = Vec::new();
        for &i in idx {
            parts.push(group_loss(&st.model, &mut g, &groups[i], cond, lambda, None)?);
        }
        let (l, p) = mean_losses(&mut g, parts)?;
        backward(&mut g, l, p)
    })?;
    Ok(StageReport {
        stage: name.into(),
        steps: schedule.len(),
        initial_loss: initial,
        final_loss: eval_group_loss(&state.model, &probe_groups, cond, lambda, None)?,
        log,
    })
}

/// Eval-mode encodings, computed once for stages that keep the encoder fixed.
pub fn encode_all<S: AsRef<[usize]>>(model: &Model, sources: &[Vec<S>]) -> Result<Vec<Memory>> {
    sources
        .iter()
        .map(|srcs| {
            let seqs: Vec<crate::textproc::TokenSeq> =
                srcs.iter().map(|s| crate::textproc::TokenSeq::new(s.as_ref().to_vec())).collect();
            model.encode_sources(&seqs)
        })
        .collect()
}

/// A plug-in training example: memory rows to read and the oracle target.
struct PluginExample {
    memory: usize,
    rows: Vec<usize>,
    target: crate::oracle::PropertyVector,
}

fn plugin_loss(
    plugin: &Plugin,
    g: &mut Graph,
    memories: &[Memory],
    examples: &[&PluginExample],
    w: &DistanceWeights,
) -> Result<(crate::diff::Var, LossParts)> {
    let mut consts: BTreeMap<usize, crate::diff::Var> = BTreeMap::new();
    let mut parts = Vec::new();
    for ex in examples {
        let states = *consts
            .entry(ex.memory)
            .or_insert_with(|| g.constant(memories[ex.memory].states.clone()));
        let pred = plugin.forward_graph(g, states, &ex.rows)?;
        let d = distance_graph(g, pred, &ex.target, w)?;
        let v = g.value(d).item();
        parts.push((
            d,
            LossParts {
                nll: v,
                novelty: 0.0,
                tokens: 1,
            },
        ));
    }
    mean_losses(g, parts)
}

fn plugin_stage(
    name: &str,
    state: &mut TrainingState,
    memories: &[Memory],
    examples: &[PluginExample],
    w: &DistanceWeights,
    cfg: &StageConfig,
    seed: u64,
    io: &StageIo,
) -> Result<StageReport> {
    if examples.is_empty() {
        return Err(Error::Empty(format!("{name}: no examples")));
    }
    let probe_ex: Vec<&PluginExample> = examples.iter().take(64).collect();
    let eval = |st: &TrainingState| -> Result<f64> {
        let plugin = st.plugin.as_ref().ok_or_else(|| Error::Invalid(format!("{name}: no plug-in")))?;
        let mut g = Graph::eval();
        let (l, _) = plugin_loss(plugin, &mut g, memories, &probe_ex, w)?;
        Ok(g.value(l).item())
    };
    let initial = eval(state)?;
    let model_before = state.model.params.clone();
    let schedule = steps_schedule(cfg, examples.len());
    let log = optimize(name, cfg, seed, io, state, &schedule, [examples.len(), 0], &mut |st, _, idx, s| {
        let plugin = st.plugin.as_ref().expect("plug-in present");
        let mut g = trainable_graph(cfg, s);
        let batch: Vec<&PluginExample> = idx.iter().map(|&i| &examples[i]).collect();
        let (l, p) = plugin_loss(plugin, &mut g, memories, &batch, w)?;
        backward(&mut g, l, p)
    })?;
    debug_assert!(state.model.params == model_before);
    Ok(StageReport {
        stage: name.into(),
        steps: schedule.len(),
        initial_loss: initial,
        final_loss: eval(state)?,
        log,
    })
}

/// Fits the plug-in to oracle properties of leave-one-out targets, reading
/// the frozen encoder's states of the other reviews.
#[allow(clippy::too_many_arguments)]
pub fn plugin_init(
    state: &mut TrainingState,
    groups: &[GroupData],
    w: &DistanceWeights,
    cfg: &StageConfig,
    seed: u64,
    io: &StageIo,
) -> Result<StageReport> {
    let memories = encode_all(&state.model, &groups.iter().map(|g| g.tokens.clone()).collect::<Vec<_>>())?;
    let mut examples = Vec::new();
    for (gi, (gd, mem)) in groups.iter().zip(&memories).enumerate() {
        for j in 0..gd.tokens.len() {
            let rows: Vec<usize> = mem
                .blocks
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != j)
                .flat_map(|(_, r)| r.clone())
                .collect();
            examples.push(PluginExample {
                memory: gi,
                rows,
                target: crate::oracle::PropertyVector::from_slice(&gd.props[j])?,
            });
        }
    }
    plugin_stage("plugin_init", state, &memories, &examples, w, cfg, seed, io)
}

/// Fits the plug-in to the properties of gold summaries.
pub fn plugin_finetune(
    state: &mut TrainingState,
    entries: &[SummaryData],
    w: &DistanceWeights,
    cfg: &StageConfig,
    seed: u64,
    io: &StageIo,
) -> Result<StageReport> {
    let memories = encode_all(&state.model, &entries.iter().map(|e| e.sources.clone()).collect::<Vec<_>>())?;
    let mut examples = Vec::new();
    for (ei, (e, mem)) in entries.iter().zip(&memories).enumerate() {
        for p in &e.ref_props {
            examples.push(PluginExample {
                memory: ei,
                rows: (0..mem.len()).collect(),
                target: crate::oracle::PropertyVector::from_slice(p)?,
            });
        }
    }
    plugin_stage("plugin_finetune", state, &memories, &examples, w, cfg, seed, io)
}

/// How summaries are conditioned during summary-likelihood training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SummaryCond {
    /// Properties predicted by the plug-in, inside the graph.
    Plugin,
    Zero,
}

/// Summary NLL for a batch of entries. With `fixed_memory` the encoder
/// states are constants.
fn summary_loss(
    st: &TrainingState,
    g: &mut Graph,
    entries: &[SummaryData],
    idx: &[usize],
    fixed_memory: Option<&[Memory]>,
    cond: SummaryCond,
    task: Option<usize>,
) -> Result<(crate::diff::Var, LossParts)> {
    let mut parts = Vec::new();
    for &i in idx {
        let e = &entries[i];
        let mem = match fixed_memory {
            Some(ms) => {
                let states = g.constant(ms[i].states.clone());
                crate::model::MemoryVar {
                    states,
                    blocks: ms[i].blocks.clone(),
                }
            }
            None => st.model.encode_graph(g, &e.sources)?,
        };
        let props = match cond {
            SummaryCond::Plugin => {
                let plugin = st.plugin.as_ref().ok_or_else(|| Error::Invalid("no plug-in".into()))?;
                let rows: Vec<usize> = (0..g.value(mem.states).rows()).collect();
                plugin.forward_graph(g, mem.states, &rows)?
            }
            SummaryCond::Zero => props_constant(g, &[[0.0; NUM_PROPERTIES]]),
        };
        let seqs: Vec<SeqTarget> = e
            .references
            .iter()
            .map(|r| SeqTarget {
                tokens: r.clone(),
                blocks: (0..e.sources.len()).collect(),
                prop_row: 0,
                mask: None,
            })
            .collect();
        parts.push(st.model.sequence_loss(g, &seqs, Some(&mem), props, task, &[], 0.0)?);
    }
    mean_losses(g, parts)
}

#[allow(clippy::too_many_arguments)]
fn summary_stage(
    name: &str,
    state: &mut TrainingState,
    entries: &[SummaryData],
    cond: SummaryCond,
    fixed_encoder: bool,
    task: Option<usize>,
    cfg: &StageConfig,
    seed: u64,
    io: &StageIo,
) -> Result<StageReport> {
    if entries.is_empty() {
        return Err(Error::Empty(format!("{name}: no annotated entries")));
    }
    let memories = if fixed_encoder {
        Some(encode_all(&state.model, &entries.iter().map(|e| e.sources.clone()).collect::<Vec<_>>())?)
    } else {
        None
    };
    let probe_idx = probe(entries.len());
    let eval = |st: &TrainingState| -> Result<f64> {
        let mut g = Graph::eval();
        let (l, _) = summary_loss(st, &mut g, entries, &probe_idx, memories.as_deref(), cond, task)?;
        Ok(g.value(l).item())
    };
    let initial = eval(state)?;
    let schedule = steps_schedule(cfg, entries.len());
    let log = optimize(name, cfg, seed, io, state, &schedule, [entries.len(), 0], &mut |st, _, idx, s| {
        let mut g = trainable_graph(cfg, s);
        let (l, p) = summary_loss(st, &mut g, entries, idx, memories.as_deref(), cond, task)?;
        backward(&mut g, l, p)
    })?;
    Ok(StageReport {
        stage: name.into(),
        steps: schedule.len(),
        initial_loss: initial,
        final_loss: eval(state)?,
        log,
    })
}

/// Summary-likelihood fine-tuning of the cross-attention and the plug-in,
/// with properties coming from the plug-in. The encoder is frozen, so its
/// states are computed once.
pub fn joint_finetune(
    state: &mut TrainingState,
    entries: &[SummaryData],
    cfg: &StageConfig,
    seed: u64,
    io: &StageIo,
) -> Result<StageReport> {
    let encoder_frozen = crate::model::manifest(&state.model.cfg)
        .iter()
        .filter(|(n, _)| !n.contains(".cross.") && !n.contains(".ln_cross."))
        .all(|(n, _)| !cfg.is_trainable(n));
    summary_stage("joint_finetune", state, entries, SummaryCond::Plugin, encoder_frozen, None, cfg, seed, io)
}

/// Fine-tuning of every model parameter on summaries without properties.
pub fn usl_finetune(
    state: &mut TrainingState,
    entries: &[SummaryData],
    cfg: &StageConfig,
    seed: u64,
    io: &StageIo,
) -> Result<StageReport> {
    let mut report = summary_stage("usl_finetune", state, entries, SummaryCond::Zero, false, None, cfg, seed, io)?;
    state.metadata.insert("mode".into(), "USL+F".into());
    report.stage = "usl_finetune".into();
    Ok(report)
}

/// Multi-task training: review and summary batches interleaved by
/// `cfg.mix_ratio`, each marked by a row of the task embedding.
pub fn mtl_train(
    state: &mut TrainingState,
    groups: &[GroupData],
    entries: &[SummaryData],
    cfg: &StageConfig,
    seed: u64,
    io: &StageIo,
) -> Result<StageReport> {
    if groups.is_empty() || entries.is_empty() {
        return Err(Error::Empty("mtl: needs both groups and annotated entries".into()));
    }
    if !state.model.has_task_embedding() {
        state.model.add_task_embedding(mix(seed, 99));
    }
    let probe_idx = probe(entries.len());
    let eval = |st: &TrainingState| -> Result<f64> {
        let mut g = Graph::eval();
        let (l, _) = summary_loss(st, &mut g, entries, &probe_idx, None, SummaryCond::Zero, Some(TASK_SUMMARY))?;
        Ok(g.value(l).item())
    };
    let initial = eval(state)?;
    let steps = cfg.total_steps(entries.len() * (cfg.mix_ratio[0] + cfg.mix_ratio[1]) / cfg.mix_ratio[1]);
    let schedule = mtl_schedule(cfg.mix_ratio, steps);
    let log = optimize(
        "mtl",
        cfg,
        seed,
        io,
        state,
        &schedule,
        [groups.len(), entries.len()],
        &mut |st, task, idx, s| {
            let mut g = trainable_graph(cfg, s);
            let (l, p) = match task {
                Task::Review => {
                    let mut parts = Vec::new();
                    for &i in idx {
                        parts.push(group_loss(&st.model, &mut g, &groups[i], Conditioning::Zero, None, Some(TASK_REVIEW))?);
                    }
                    mean_losses(&mut g, parts)?
                }
                Task::Summary => summary_loss(st, &mut g, entries, idx, None, SummaryCond::Zero, Some(TASK_SUMMARY))?,
            };
            backward(&mut g, l, p)
        },
    )?;
    state.metadata.insert("mode".into(), "MTL".into());
    Ok(StageReport {
        stage: "mtl".into(),
        steps: schedule.len(),
        initial_loss: initial,
        final_loss: eval(state)?,
        log,
    })
}

/// Mean probability the generator puts on subwords absent from the sources,
/// per target position, over leave-one-out targets of `groups` (eval mode,
/// oracle conditioning).
pub fn out_of_source_mass(model: &Model, groups: &[GroupData]) -> Result<f64> {
    let mut mass = 0.0;
    let mut tokens = 0;
    for gd in groups {
        let mut g = Graph::eval();
        let (_, parts) = group_loss(model, &mut g, gd, Conditioning::Oracle, Some(0.0), None)?;
        mass += parts.novelty;
        tokens += parts.tokens;
    }
    Ok(mass / tokens.max(1) as f64)
}
