//! Run directories, stage markers and end-to-end orchestration.
//!
//! A run directory holds `manifest.json`, `config.toml`, `data/`,
//! `checkpoints/`, `outputs/`, `reports/` and `logs/`. A stage counts as done
//! when its marker records the current config hash and its checkpoint file
//! still has the recorded hash; done stages are skipped on re-runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::Baseline;
use crate::checkpoint::{file_hash, TrainingState};
use crate::config::{ModelConfig, RunConfig};
use crate::corpus::{
    cross_domain_split, filter_reviews, load_annotated, load_reviews, make_groups, read_jsonl, save_annotated,
    write_jsonl, AnnotatedEntry, AnnotatedSet, Review, ReviewGroup, Split, SplitSpec,
};
use crate::decoding::{decode_memory, encode_reviews, PropertySource, SummaryRecord};
use crate::error::{Error, Result};
use crate::evaluation::{
    characteristics_csv, characteristics_table, evaluate_rouge, reports_csv, reports_table, text_characteristics,
    EvalReport, RefAggregation, TextCharacteristics,
};
use crate::model::Model;
use crate::oracle::{Oracle, PronounLexicon};
use crate::plugin::Plugin;
use crate::textproc::BpeModel;
use crate::training::{
    self, mix, out_of_source_mass, prepare_groups, prepare_summaries, tokenize, Conditioning, GroupData,
    StageIo, StageReport, SummaryData,
};

/// Training steps of a run, in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Step {
    PretrainLm,
    TrainLoo,
    Novelty,
    PluginInit,
    PluginFinetune,
    JointFinetune,
    /// Leave-one-out training without properties.
    Usl,
    UslFinetune,
    Mtl,
}

impl Step {
    pub const ALL: [Step; 9] = [
        Step::PretrainLm,
        Step::TrainLoo,
        Step::Novelty,
        Step::PluginInit,
        Step::PluginFinetune,
        Step::JointFinetune,
        Step::Usl,
        Step::UslFinetune,
        Step::Mtl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::PretrainLm => "pretrain_lm",
            Step::TrainLoo => "train_loo",
            Step::Novelty => "novelty_phase",
            Step::PluginInit => "plugin_init",
            Step::PluginFinetune => "plugin_finetune",
            Step::JointFinetune => "joint_finetune",
            Step::Usl => "usl",
            Step::UslFinetune => "usl_finetune",
            Step::Mtl => "mtl",
        }
    }

    pub fn parent(self) -> Option<Step> {
        match self {
            Step::PretrainLm => None,
            Step::TrainLoo | Step::Usl => Some(Step::PretrainLm),
            Step::Novelty => Some(Step::TrainLoo),
            Step::PluginInit => Some(Step::Novelty),
            Step::PluginFinetune => Some(Step::PluginInit),
            Step::JointFinetune => Some(Step::PluginFinetune),
            Step::UslFinetune | Step::Mtl => Some(Step::Usl),
        }
    }

    fn index(self) -> u64 {
        Step::ALL.iter().position(|s| *s == self).expect("listed") as u64
    }
}

impl std::str::FromStr for Step {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Step::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown step `{s}`")))
    }
}

/// Summarisers built from trained checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum System {
    FewSum,
    Usl,
    UslF,
    Mtl,
}

impl System {
    pub const ALL: [System; 4] = [System::FewSum, System::Usl, System::UslF, System::Mtl];

    pub fn name(self) -> &'static str {
        match self {
            System::FewSum => "fewsum",
            System::Usl => "usl",
            System::UslF => "usl_f",
            System::Mtl => "mtl",
        }
    }

    pub fn step(self) -> Step {
        match self {
            System::FewSum => Step::JointFinetune,
            System::Usl => Step::Usl,
            System::UslF => Step::UslFinetune,
            System::Mtl => Step::Mtl,
        }
    }
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown system `{s}`")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub config_hash: String,
    /// Run-relative artifact path and its hash.
    pub artifact: String,
    pub artifact_hash: String,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub deterministic: bool,
    pub stages: BTreeMap<String, StageMarker>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("bad manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Data loaded for training and evaluation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub bpe: BpeModel,
    pub model_cfg: ModelConfig,
    pub reviews: Vec<Vec<usize>>,
    pub train_groups: Vec<GroupData>,
    pub heldout_groups: Vec<GroupData>,
    pub annotated: AnnotatedSet,
    pub train_summaries: Vec<SummaryData>,
}

/// Where the raw data comes from; `None` means the bundled synthetic corpus.
#[derive(Clone, Debug, Default)]
pub struct DataSources {
    pub reviews: Option<PathBuf>,
    pub annotated: Option<PathBuf>,
    pub splits: Option<PathBuf>,
}

pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub sources: DataSources,
    /// Steps between resumable mid-stage checkpoints (0 disables them).
    pub checkpoint_every: usize,
    /// Abort a stage after this many steps, leaving its partial checkpoint
    /// behind (simulates an interrupt).
    pub stop_after: Option<usize>,
    prepared: Option<Prepared>,
}

pub const DATA_REVIEWS: &str = "data/reviews.jsonl";
pub const DATA_GROUPS: &str = "data/groups.jsonl";
pub const DATA_ANNOTATED: &str = "data/annotated.jsonl";
pub const DATA_BPE: &str = "data/bpe.txt";

/// Filters reviews and cuts them into groups, as the preprocess step does.
pub fn preprocess(reviews: &[Review], cfg: &RunConfig) -> Result<Vec<ReviewGroup>> {
    let kept = filter_reviews(reviews, &cfg.data.filter);
    let groups = make_groups(&kept, cfg.data.group_size, cfg.seed)?;
    if groups.is_empty() {
        return Err(Error::Empty("no review groups survive filtering".into()));
    }
    Ok(groups)
}

/// BPE trained on review texts to the configured vocabulary size.
pub fn train_bpe(reviews: &[Review], vocab_size: usize) -> Result<BpeModel> {
    let texts: Vec<&str> = reviews.iter().map(|r| r.text.as_str()).collect();
    BpeModel::train_to_vocab(&texts, vocab_size)
}

impl Run {
    /// Opens (or creates) a run directory. A manifest written under a
    /// different config is discarded, so every stage re-runs.
    pub fn open(dir: &Path, cfg: RunConfig, deterministic: bool) -> Result<Self> {
        cfg.validate()?;
        for sub in ["data", "checkpoints", "outputs", "reports", "logs"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let hash = cfg.hash();
        let mpath = dir.join("manifest.json");
        let mut manifest = if mpath.exists() { RunManifest::load(&mpath)? } else { RunManifest::default() };
        if manifest.config_hash != hash {
            if !manifest.stages.is_empty() {
                log::warn!("config changed since the last run in {}; starting over", dir.display());
            }
            manifest = RunManifest {
                config_hash: hash,
                seed: cfg.seed,
                deterministic,
                stages: BTreeMap::new(),
            };
        }
        let cpath = dir.join("config.toml");
        std::fs::write(&cpath, cfg.to_toml()).map_err(|e| Error::io(&cpath, e))?;
        let run = Run {
            cfg,
            dir: dir.to_path_buf(),
            manifest,
            sources: DataSources::default(),
            checkpoint_every: 25,
            stop_after: None,
            prepared: None,
        };
        run.save_manifest()?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn save_manifest(&self) -> Result<()> {
        self.manifest.save(&self.dir.join("manifest.json"))
    }

    /// Whether `key` is marked done under the current config with an intact
    /// artifact.
    pub fn is_done(&self, key: &str) -> bool {
        let Some(m) = self.manifest.stages.get(key) else {
            return false;
        };
        m.config_hash == self.manifest.config_hash
            && file_hash(&self.path(&m.artifact)).map(|h| h == m.artifact_hash).unwrap_or(false)
    }

    fn mark(&mut self, key: &str, artifact: &str, metrics: BTreeMap<String, f64>) -> Result<()> {
        let marker = StageMarker {
            config_hash: self.manifest.config_hash.clone(),
            artifact: artifact.into(),
            artifact_hash: file_hash(&self.path(artifact))?,
            metrics,
        };
        self.manifest.stages.insert(key.into(), marker);
        self.save_manifest()
    }

    pub fn marker(&self, key: &str) -> Option<&StageMarker> {
        self.manifest.stages.get(key)
    }

    /// Writes the raw data files: the synthetic corpus or the configured
    /// inputs, then the review groups.
    pub fn prepare_data(&mut self) -> Result<()> {
        if self.is_done("data") && self.path(DATA_REVIEWS).exists() && self.path(DATA_ANNOTATED).exists() {
            return Ok(());
        }
        let (reviews, annotated) = match (&self.sources.reviews, &self.sources.annotated) {
            (None, None) => {
                let c = crate::synth::generate(&self.cfg.data.synth, self.cfg.seed);
                (c.reviews, c.annotated)
            }
            (Some(r), Some(a)) => {
                let spec = match &self.sources.splits {
                    Some(p) => SplitSpec::from_file(p)?,
                    None => SplitSpec::amazon(),
                };
                (load_reviews(r)?, load_annotated(a, &spec)?)
            }
            _ => return Err(Error::Invalid("give both a review file and an annotated file, or neither".into())),
        };
        write_jsonl(&self.path(DATA_REVIEWS), &reviews)?;
        save_annotated(&self.path(DATA_ANNOTATED), &annotated)?;
        let groups = preprocess(&reviews, &self.cfg)?;
        write_jsonl(&self.path(DATA_GROUPS), &groups)?;
        log::info!("data: {} reviews, {} groups, {} annotated", reviews.len(), groups.len(), annotated.entries.len());
        let mut m = BTreeMap::new();
        m.insert("groups".into(), groups.len() as f64);
        self.mark("data", DATA_GROUPS, m)
    }

    pub fn prepare_bpe(&mut self) -> Result<()> {
        self.prepare_data()?;
        if self.is_done("bpe") {
            return Ok(());
        }
        let reviews: Vec<Review> = read_jsonl(&self.path(DATA_REVIEWS))?;
        let bpe = train_bpe(&reviews, self.cfg.model.vocab_size)?;
        bpe.save(&self.path(DATA_BPE))?;
        let mut m = BTreeMap::new();
        m.insert("vocab_size".into(), bpe.vocab_size() as f64);
        self.mark("bpe", DATA_BPE, m)
    }

    /// Tokenised training data, built once per process.
    pub fn prepared(&mut self) -> Result<&Prepared> {
        if self.prepared.is_none() {
            self.prepare_bpe()?;
            let bpe = BpeModel::load(&self.path(DATA_BPE))?;
            let mut model_cfg = self.cfg.model.clone();
            if bpe.vocab_size() != model_cfg.vocab_size {
                log::warn!("vocabulary holds {} subwords, not {}", bpe.vocab_size(), model_cfg.vocab_size);
                model_cfg.vocab_size = bpe.vocab_size();
            }
            let mut groups: Vec<ReviewGroup> = read_jsonl(&self.path(DATA_GROUPS))?;
            let annotated = load_annotated(&self.path(DATA_ANNOTATED), &SplitSpec::Embedded)?;
            let mut order: Vec<usize> = (0..groups.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, 404)));
            let n_held = self.cfg.data.heldout_groups.min(groups.len().saturating_sub(1));
            let held_idx: std::collections::HashSet<usize> = order[..n_held].iter().copied().collect();
            let mut held = Vec::new();
            let mut train = Vec::new();
            for (i, g) in groups.drain(..).enumerate() {
                if held_idx.contains(&i) {
                    held.push(g);
                } else {
                    train.push(g);
                }
            }
            let oracle = Oracle::new(self.cfg.oracle.clone());
            let max_len = model_cfg.max_len;
            let reviews = train
                .iter()
                .flat_map(|g| g.reviews.iter().map(|r| tokenize(&bpe, &r.text, max_len)))
                .collect();
            let train_groups = prepare_groups(&train, &bpe, &oracle, max_len)?;
            let heldout_groups = prepare_groups(&held, &bpe, &oracle, max_len)?;
            let train_summaries = prepare_summaries(&annotated.split(Split::Train), &bpe, &oracle, max_len)?;
            self.prepared = Some(Prepared {
                bpe,
                model_cfg,
                reviews,
                train_groups,
                heldout_groups,
                annotated,
                train_summaries,
            });
        }
        Ok(self.prepared.as_ref().expect("just built"))
    }

    pub fn checkpoint_rel(step: Step) -> String {
        format!("checkpoints/{}.ckpt", step.name())
    }

    pub fn load_state(&self, step: Step) -> Result<TrainingState> {
        TrainingState::load(&self.path(&Self::checkpoint_rel(step)))
    }

    /// Runs one training step (and, first, any unfinished step it depends
    /// on). Finished steps are skipped.
    pub fn train(&mut self, step: Step) -> Result<Option<StageReport>> {
        if let Some(p) = step.parent() {
            self.train(p)?;
        }
        let key = step.name();
        if self.is_done(key) {
            log::info!("{key}: up to date");
            return Ok(None);
        }
        self.prepared()?;
        let seed = mix(self.cfg.seed, 100 + step.index());
        let mut state = match step.parent() {
            None => TrainingState::new(Model::init(&self.prepared.as_ref().expect("prepared").model_cfg, seed)?, None),
            Some(p) => self.load_state(p)?,
        };
        state.extra = crate::diff::ParamStore::new();
        let partial = self.path(&format!("checkpoints/{key}.partial"));
        let io = StageIo {
            checkpoint: Some(partial.clone()),
            checkpoint_every: self.checkpoint_every,
            log_file: Some(self.path("logs/train.log")),
            stop_after: self.stop_after,
        };
        let st = &self.cfg.stages;
        let data = self.prepared.as_ref().expect("prepared");
        let mut metrics = BTreeMap::new();
        let report = match step {
            Step::PretrainLm => training::pretrain_lm(&mut state, &data.reviews, &st.pretrain_lm, seed, &io)?,
            Step::TrainLoo => {
                training::train_loo(&mut state, &data.train_groups, Conditioning::Oracle, &st.train_loo, seed, &io)?
            }
            Step::Usl => training::train_loo(&mut state, &data.train_groups, Conditioning::Zero, &st.train_loo, seed, &io)?,
            Step::Novelty => {
                let before = out_of_source_mass(&state.model, &data.heldout_groups)?;
                let r = training::novelty_phase(&mut state, &data.train_groups, &st.novelty_phase, seed, &io)?;
                let after = out_of_source_mass(&state.model, &data.heldout_groups)?;
                metrics.insert("heldout_out_of_source_mass_before".into(), before);
                metrics.insert("heldout_out_of_source_mass_after".into(), after);
                r
            }
            Step::PluginInit => {
                if state.plugin.is_none() {
                    state.plugin = Some(Plugin::init(&self.cfg.plugin, data.model_cfg.d_model, seed)?);
                }
                training::plugin_init(&mut state, &data.train_groups, &self.cfg.distance, &st.plugin_init, seed, &io)?
            }
            Step::PluginFinetune => training::plugin_finetune(
                &mut state,
                &data.train_summaries,
                &self.cfg.distance,
                &st.plugin_finetune,
                seed,
                &io,
            )?,
            Step::JointFinetune => {
                training::joint_finetune(&mut state, &data.train_summaries, &st.joint_finetune, seed, &io)?
            }
            Step::UslFinetune => {
                training::usl_finetune(&mut state, &data.train_summaries, &st.usl_finetune, seed, &io)?
            }
            Step::Mtl => training::mtl_train(&mut state, &data.train_groups, &data.train_summaries, &st.mtl, seed, &io)?,
        };
        log::info!(
            "{key}: {} steps, loss {:.4} -> {:.4}",
            report.steps,
            report.initial_loss,
            report.final_loss
        );
        state.extra = crate::diff::ParamStore::new();
        state.metadata.insert("stage".into(), key.into());
        state.metadata.insert("seed".into(), self.cfg.seed.to_string());
        state.metadata.remove("stage.step");
        state.metadata.remove("adam.step");
        let rel = Self::checkpoint_rel(step);
        state.save(&self.path(&rel))?;
        if partial.exists() {
            std::fs::remove_file(&partial).map_err(|e| Error::io(&partial, e))?;
        }
        metrics.insert("initial_loss".into(), report.initial_loss);
        metrics.insert("final_loss".into(), report.final_loss);
        metrics.insert("steps".into(), report.steps as f64);
        self.mark(key, &rel, metrics)?;
        Ok(Some(report))
    }

    fn entries(&mut self, split: Split) -> Result<Vec<AnnotatedEntry>> {
        Ok(self.prepared()?.annotated.split(split).into_iter().cloned().collect())
    }

    pub fn output_rel(name: &str, split: Split) -> String {
        format!("outputs/{name}.{}.jsonl", split.as_str())
    }

    /// Decodes summaries of every entry of `split` with a trained system.
    pub fn summarize(&mut self, system: System, split: Split) -> Result<Vec<SummaryRecord>> {
        self.train(system.step())?;
        let key = format!("summarize.{}.{}", system.name(), split.as_str());
        let rel = Self::output_rel(system.name(), split);
        if self.is_done(&key) {
            return read_jsonl(&self.path(&rel));
        }
        let state = self.load_state(system.step())?;
        let entries = self.entries(split)?;
        let bpe = &self.prepared()?.bpe.clone();
        let records = summarize_entries(&state, bpe, &self.cfg.decode, system, &entries)?;
        write_jsonl(&self.path(&rel), &records)?;
        self.mark(&key, &rel, BTreeMap::new())?;
        Ok(records)
    }

    pub fn baseline(&mut self, b: Baseline, split: Split) -> Result<Vec<SummaryRecord>> {
        let key = format!("baseline.{}.{}", b.name(), split.as_str());
        let rel = Self::output_rel(b.name(), split);
        if self.is_done(&key) {
            return read_jsonl(&self.path(&rel));
        }
        let entries = self.entries(split)?;
        let records = run_baseline(b, &entries, self.cfg.seed)?;
        write_jsonl(&self.path(&rel), &records)?;
        self.mark(&key, &rel, BTreeMap::new())?;
        Ok(records)
    }

    /// ROUGE of every system output present for `split`, written to
    /// `reports/rouge.<split>.{csv,txt}`.
    pub fn evaluate(&mut self, names: &[&str], split: Split) -> Result<Vec<EvalReport>> {
        self.prepare_data()?;
        let annotated = load_annotated(&self.path(DATA_ANNOTATED), &SplitSpec::Embedded)?;
        let mut reports = Vec::new();
        for name in names {
            let path = self.path(&Self::output_rel(name, split));
            let recs: Vec<SummaryRecord> = read_jsonl(&path)?;
            let map: BTreeMap<String, String> = recs.into_iter().map(|r| (r.group_id, r.summary)).collect();
            reports.push(evaluate_rouge(name, &map, &annotated, split, RefAggregation::Mean)?);
        }
        let base = format!("reports/rouge.{}", split.as_str());
        write_text(&self.path(&format!("{base}.csv")), &reports_csv(&reports))?;
        write_text(&self.path(&format!("{base}.txt")), &reports_table(&reports))?;
        Ok(reports)
    }

    /// Point-of-view shares and length gap of each system against the gold
    /// summaries of `split`, with the training reviews as a reference row.
    pub fn analyze_text(&mut self, names: &[&str], split: Split) -> Result<Vec<(String, TextCharacteristics)>> {
        self.prepare_data()?;
        let annotated = load_annotated(&self.path(DATA_ANNOTATED), &SplitSpec::Embedded)?;
        let gold: Vec<String> = annotated.split(split).iter().flat_map(|e| e.references.clone()).collect();
        let lex = PronounLexicon::default();
        let mut rows = vec![("gold".to_string(), text_characteristics(&gold, &gold, &lex)?)];
        let groups: Vec<ReviewGroup> = read_jsonl(&self.path(DATA_GROUPS))?;
        let reviews: Vec<String> = groups.iter().flat_map(|g| g.reviews.iter().map(|r| r.text.clone())).collect();
        rows.push(("reviews".to_string(), text_characteristics(&reviews, &gold, &lex)?));
        for name in names {
            let recs: Vec<SummaryRecord> = read_jsonl(&self.path(&Self::output_rel(name, split)))?;
            let texts: Vec<String> = recs.into_iter().map(|r| r.summary).collect();
            rows.push((name.to_string(), text_characteristics(&texts, &gold, &lex)?));
        }
        let base = format!("reports/text.{}", split.as_str());
        write_text(&self.path(&format!("{base}.csv")), &characteristics_csv(&rows))?;
        write_text(&self.path(&format!("{base}.txt")), &characteristics_table(&rows))?;
        Ok(rows)
    }

    /// Cross-domain protocol for one target category: the plug-in and the
    /// cross-attention are adapted on summaries of other categories only,
    /// then the target's test entries are scored. Returns test ROUGE-L.
    pub fn cross_domain(&mut self, target: &str, seed: u64) -> Result<f64> {
        self.train(Step::PluginInit)?;
        let data = self.prepared()?.clone();
        let split = cross_domain_split(&data.annotated, target, seed);
        let oracle = Oracle::new(self.cfg.oracle.clone());
        let train = prepare_summaries(&split.split(Split::Train), &data.bpe, &oracle, data.model_cfg.max_len)?;
        let mut state = self.load_state(Step::PluginInit)?;
        let io = StageIo::default();
        let s = mix(seed, 7);
        training::plugin_finetune(&mut state, &train, &self.cfg.distance, &self.cfg.stages.plugin_finetune, s, &io)?;
        training::joint_finetune(&mut state, &train, &self.cfg.stages.joint_finetune, s, &io)?;
        let test: Vec<AnnotatedEntry> = split.split(Split::Test).into_iter().cloned().collect();
        let recs = summarize_entries(&state, &data.bpe, &self.cfg.decode, System::FewSum, &test)?;
        let map: BTreeMap<String, String> = recs.into_iter().map(|r| (r.group_id, r.summary)).collect();
        Ok(evaluate_rouge("cross", &map, &split, Split::Test, RefAggregation::Mean)?.rouge.rl)
    }

    /// The full schedule: the main chain, summaries, baselines and ROUGE on
    /// the test split; with `variants` also the unconditioned model and its
    /// fine-tuned version, and with `mtl` the multi-task variant.
    pub fn pipeline(&mut self, variants: bool, mtl: bool) -> Result<PipelineResult> {
        let mut systems = vec![System::FewSum];
        if variants {
            systems.extend([System::Usl, System::UslF]);
        }
        if mtl {
            systems.push(System::Mtl);
        }
        for s in &systems {
            self.train(s.step())?;
        }
        for s in &systems {
            self.summarize(*s, Split::Test)?;
        }
        let baselines = [Baseline::Random, Baseline::Lead, Baseline::LexRank, Baseline::Clustroid];
        for b in baselines {
            self.baseline(b, Split::Test)?;
        }
        let names: Vec<&str> = systems
            .iter()
            .map(|s| s.name())
            .chain(baselines.iter().map(|b| b.name()))
            .collect();
        let reports = self.evaluate(&names, Split::Test)?;
        self.analyze_text(&names, Split::Test)?;
        Ok(PipelineResult {
            reports,
            manifest: self.manifest.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub reports: Vec<EvalReport>,
    pub manifest: RunManifest,
}

impl PipelineResult {
    pub fn rouge_l(&self, system: &str) -> Option<f64> {
        self.reports.iter().find(|r| r.system == system).map(|r| r.rouge.rl)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Decodes every entry with the given system's conditioning.
pub fn summarize_entries(
    state: &TrainingState,
    bpe: &BpeModel,
    cfg: &crate::config::DecodeConfig,
    system: System,
    entries: &[AnnotatedEntry],
) -> Result<Vec<SummaryRecord>> {
    let source = match system {
        System::FewSum => PropertySource::Plugin(
            state
                .plugin
                .as_ref()
                .ok_or_else(|| Error::Invalid("checkpoint has no plug-in".into()))?,
        ),
        _ => PropertySource::Zero,
    };
    entries
        .iter()
        .map(|e| {
            let memory = encode_reviews(&state.model, bpe, &e.sources)?;
            let g = decode_memory(&state.model, bpe, &memory, source, cfg)?;
            if !g.finished {
                log::warn!("{}: summary cut at {} tokens", e.group_id, cfg.max_tokens);
            }
            Ok(g.record(&e.group_id))
        })
        .collect()
}

pub fn run_baseline(b: Baseline, entries: &[AnnotatedEntry], seed: u64) -> Result<Vec<SummaryRecord>> {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(SummaryRecord {
                group_id: e.group_id.clone(),
                summary: b.run(&e.sources, mix(seed, 5000 + i as u64))?,
                properties_used: Vec::new(),
                score: 0.0,
                finished: true,
            })
        })
        .collect()
}
