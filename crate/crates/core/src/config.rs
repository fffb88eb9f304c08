//! Configuration: model and plug-in shapes, training stages, decoding, and
//! the run-level file that ties them together.
//!
//! A run config starts from a preset (`paper` or `desk`); a TOML file only
//! needs the keys it wants to override.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::FilterConfig;
use crate::error::{Error, Result};
use crate::oracle::{OracleConfig, NUM_PROPERTIES};

/// Novelty weight used on the Amazon-style corpus.
pub const LAMBDA_AMAZON: f64 = 2.0;
/// Novelty weight used on the Yelp-style corpus.
pub const LAMBDA_YELP: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::config("preset", format!("unknown preset `{other}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_subword_emb: usize,
    /// Width of the trainable position ("length") embedding.
    pub d_len_emb: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub dropout_sublayer: f64,
    pub dropout_emb: f64,
    pub n_properties: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            n_layers: 6,
            n_heads: 8,
            d_subword_emb: 390,
            d_len_emb: 10,
            d_model: 400,
            d_ffn: 1000,
            vocab_size: 32000,
            dropout_sublayer: 0.1,
            dropout_emb: 0.1,
            n_properties: NUM_PROPERTIES,
            max_len: 256,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_subword_emb: 60,
            d_len_emb: 4,
            d_model: 64,
            d_ffn: 128,
            vocab_size: 600,
            dropout_sublayer: 0.1,
            dropout_emb: 0.1,
            n_properties: NUM_PROPERTIES,
            max_len: 96,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("model.n_layers", self.n_layers),
            ("model.n_heads", self.n_heads),
            ("model.d_subword_emb", self.d_subword_emb),
            ("model.d_len_emb", self.d_len_emb),
            ("model.d_ffn", self.d_ffn),
            ("model.max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.d_model != self.d_subword_emb + self.d_len_emb {
            return Err(Error::config(
                "model.d_model",
                format!(
                    "must equal d_subword_emb + d_len_emb ({} + {})",
                    self.d_subword_emb, self.d_len_emb
                ),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.n_heads",
                format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.vocab_size <= crate::textproc::NUM_SPECIALS {
            return Err(Error::config("model.vocab_size", "must exceed the special-token count"));
        }
        check_rate("model.dropout_sublayer", self.dropout_sublayer)?;
        check_rate("model.dropout_emb", self.dropout_emb)?;
        if self.n_properties != NUM_PROPERTIES {
            return Err(Error::config(
                "model.n_properties",
                format!("must be {NUM_PROPERTIES}"),
            ));
        }
        Ok(())
    }
}

fn check_rate(key: &str, r: f64) -> Result<()> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::config(key, "must lie in [0, 1)"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_state: usize,
    pub d_ffn_hidden: usize,
    pub dropout_internal: f64,
    pub dropout_attention: f64,
    pub n_properties: usize,
}

impl Default for PluginConfig {
    fn default() -> Self {
        PluginConfig {
            n_layers: 3,
            n_heads: 3,
            d_state: 30,
            d_ffn_hidden: 20,
            dropout_internal: 0.4,
            dropout_attention: 0.15,
            n_properties: NUM_PROPERTIES,
        }
    }
}

impl PluginConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("plugin.n_layers", self.n_layers),
            ("plugin.n_heads", self.n_heads),
            ("plugin.d_state", self.d_state),
            ("plugin.d_ffn_hidden", self.d_ffn_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.d_state % self.n_heads != 0 {
            return Err(Error::config(
                "plugin.n_heads",
                format!("d_state {} is not divisible by n_heads {}", self.d_state, self.n_heads),
            ));
        }
        check_rate("plugin.dropout_internal", self.dropout_internal)?;
        check_rate("plugin.dropout_attention", self.dropout_attention)?;
        if self.n_properties != NUM_PROPERTIES {
            return Err(Error::config("plugin.n_properties", format!("must be {NUM_PROPERTIES}")));
        }
        Ok(())
    }
}

/// Weights of the per-property distances in the plug-in objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceWeights {
    pub w_len_dev: f64,
    pub w_rating_dev: f64,
    pub w_pov: f64,
    pub w_coverage: f64,
}

impl Default for DistanceWeights {
    fn default() -> Self {
        DistanceWeights {
            w_len_dev: 0.1,
            w_rating_dev: 1.0,
            w_pov: 0.08,
            w_coverage: 0.5,
        }
    }
}

impl DistanceWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("distance.w_len_dev", self.w_len_dev),
            ("distance.w_rating_dev", self.w_rating_dev),
            ("distance.w_pov", self.w_pov),
            ("distance.w_coverage", self.w_coverage),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub block_n: usize,
    pub max_tokens: usize,
    pub length_normalization_alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            block_n: 3,
            max_tokens: 80,
            length_normalization_alpha: 0.8,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("decode.beam_size", "must be at least 1"));
        }
        if self.block_n < 2 {
            return Err(Error::config("decode.block_n", "must be at least 2"));
        }
        if self.max_tokens == 0 {
            return Err(Error::config("decode.max_tokens", "must be at least 1"));
        }
        if !(self.length_normalization_alpha >= 0.0) {
            return Err(Error::config("decode.length_normalization_alpha", "must be non-negative"));
        }
        Ok(())
    }
}

/// Settings of one training stage. Either `steps` or `epochs` bounds the
/// stage; a non-zero `steps` wins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
    /// Novelty weight; only read by the novelty stage.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Parameter name patterns (`*` wildcard) that receive updates.
    #[serde(default = "all_params")]
    pub trainable: Vec<String>,
    /// Patterns excluded from `trainable`.
    #[serde(default)]
    pub frozen: Vec<String>,
    /// Review batches to summary batches, for the multi-task stage.
    #[serde(default = "one_to_one")]
    pub mix_ratio: [usize; 2],
    #[serde(default = "ten")]
    pub log_every: usize,
}

fn one() -> usize {
    1
}
fn ten() -> usize {
    10
}
fn default_lambda() -> f64 {
    LAMBDA_AMAZON
}
fn all_params() -> Vec<String> {
    vec!["*".into()]
}
fn one_to_one() -> [usize; 2] {
    [1, 1]
}

impl StageConfig {
    pub fn new(lr: f64, steps: usize) -> Self {
        StageConfig {
            lr,
            steps,
            epochs: 0,
            batch_size: 1,
            lambda: LAMBDA_AMAZON,
            trainable: all_params(),
            frozen: Vec::new(),
            mix_ratio: one_to_one(),
            log_every: 10,
        }
    }

    fn epochs(lr: f64, epochs: usize) -> Self {
        StageConfig {
            epochs,
            ..StageConfig::new(lr, 0)
        }
    }

    fn with_trainable(mut self, patterns: &[&str]) -> Self {
        self.trainable = patterns.iter().map(|s| s.to_string()).collect();
        self
    }

    fn with_batch(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    /// Number of optimizer steps for a dataset of `n_items` items.
    pub fn total_steps(&self, n_items: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            let per_epoch = n_items.div_ceil(self.batch_size.max(1));
            per_epoch * self.epochs
        }
    }

    /// Whether a parameter with this name is updated by the stage.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| glob_match(p, name))
            && !self.frozen.iter().any(|p| glob_match(p, name))
    }

    pub fn validate(&self, stage: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("stages.{stage}.lr"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("stages.{stage}.batch_size"), "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("stages.{stage}.lambda"), "must be non-negative"));
        }
        if self.mix_ratio.iter().any(|&r| r == 0) {
            return Err(Error::config(format!("stages.{stage}.mix_ratio"), "both parts must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config(format!("stages.{stage}.log_every"), "must be positive"));
        }
        Ok(())
    }
}

/// Matches `name` against a pattern where `*` stands for any run of characters.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let s: Vec<char> = name.chars().collect();
    let (mut pi, mut si) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while si < s.len() {
        if pi < p.len() && p[pi] == '*' {
            star = Some((pi, si));
            pi += 1;
        } else if pi < p.len() && p[pi] == s[si] {
            pi += 1;
            si += 1;
        } else if let Some((sp, ss)) = star {
            pi = sp + 1;
            si = ss + 1;
            star = Some((sp, ss + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

pub const STAGE_NAMES: [&str; 8] = [
    "pretrain_lm",
    "train_loo",
    "novelty_phase",
    "plugin_init",
    "plugin_finetune",
    "joint_finetune",
    "usl_finetune",
    "mtl",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub pretrain_lm: StageConfig,
    pub train_loo: StageConfig,
    pub novelty_phase: StageConfig,
    pub plugin_init: StageConfig,
    pub plugin_finetune: StageConfig,
    pub joint_finetune: StageConfig,
    pub usl_finetune: StageConfig,
    pub mtl: StageConfig,
}

const JOINT_TRAINABLE: [&str; 3] = ["layer*.cross.*", "layer*.ln_cross.*", "plugin.*"];

impl Stages {
    /// Learning rates and epoch counts of the original schedule.
    pub fn paper() -> Self {
        Stages {
            pretrain_lm: StageConfig::epochs(5e-4, 1),
            train_loo: StageConfig::epochs(6e-5, 1),
            novelty_phase: StageConfig::epochs(1e-5, 1),
            plugin_init: StageConfig::epochs(1e-5, 11).with_trainable(&["plugin.*"]),
            plugin_finetune: StageConfig::epochs(7e-4, 98).with_trainable(&["plugin.*"]),
            joint_finetune: StageConfig::epochs(1e-4, 33).with_trainable(&JOINT_TRAINABLE),
            usl_finetune: StageConfig::epochs(1e-4, 33),
            mtl: StageConfig::epochs(1e-4, 33),
        }
    }

    /// Step counts sized for a single CPU core.
    pub fn desk() -> Self {
        Stages {
            pretrain_lm: StageConfig::new(3e-3, 400).with_batch(8),
            train_loo: StageConfig::new(2e-3, 600),
            novelty_phase: StageConfig::new(5e-4, 60),
            plugin_init: StageConfig::new(3e-3, 300).with_batch(4).with_trainable(&["plugin.*"]),
            plugin_finetune: StageConfig::new(3e-3, 200).with_batch(4).with_trainable(&["plugin.*"]),
            joint_finetune: StageConfig::new(1e-3, 150).with_batch(4).with_trainable(&JOINT_TRAINABLE),
            usl_finetune: StageConfig::new(1e-3, 150).with_batch(4),
            mtl: StageConfig::new(1e-3, 300).with_batch(4),
        }
    }

    pub fn get(&self, name: &str) -> Option<&StageConfig> {
        Some(match name {
            "pretrain_lm" => &self.pretrain_lm,
            "train_loo" => &self.train_loo,
            "novelty_phase" => &self.novelty_phase,
            "plugin_init" => &self.plugin_init,
            "plugin_finetune" => &self.plugin_finetune,
            "joint_finetune" => &self.joint_finetune,
            "usl_finetune" => &self.usl_finetune,
            "mtl" => &self.mtl,
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for name in STAGE_NAMES {
            self.get(name).expect("known stage").validate(name)?;
        }
        Ok(())
    }
}

/// Parameters of the bundled synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_products: usize,
    pub min_reviews: usize,
    pub max_reviews: usize,
    pub n_annotated: usize,
    /// Chance that a review flips the product's polarity on an aspect.
    pub polarity_noise: f64,
    /// Share of reviews written in the formal third-person register.
    pub third_person_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_products: 240,
            min_reviews: 10,
            max_reviews: 13,
            n_annotated: 60,
            polarity_noise: 0.15,
            third_person_share: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub filter: FilterConfig,
    /// Reviews per group: one target plus its sources.
    pub group_size: usize,
    pub synth: SynthConfig,
    /// Held-out groups used for loss curves and the novelty measurement.
    pub heldout_groups: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            filter: FilterConfig::default(),
            group_size: 9,
            synth: SynthConfig::default(),
            heldout_groups: 12,
        }
    }
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    pub plugin: PluginConfig,
    pub distance: DistanceWeights,
    pub decode: DecodeConfig,
    pub oracle: OracleConfig,
    pub data: DataConfig,
    pub stages: Stages,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => RunConfig {
                preset,
                seed: 1,
                model: ModelConfig::paper(),
                plugin: PluginConfig::default(),
                distance: DistanceWeights::default(),
                decode: DecodeConfig {
                    max_tokens: 128,
                    ..DecodeConfig::default()
                },
                oracle: OracleConfig::default(),
                data: DataConfig::default(),
                stages: Stages::paper(),
            },
            Preset::Desk => RunConfig {
                preset,
                seed: 1,
                model: ModelConfig::desk(),
                plugin: PluginConfig::default(),
                distance: DistanceWeights::default(),
                decode: DecodeConfig::default(),
                oracle: OracleConfig::default(),
                data: DataConfig::default(),
                stages: Stages::desk(),
            },
        }
    }

    /// Parses TOML overrides on top of a preset. The preset comes from the
    /// file's `preset` key, else from `fallback`.
    pub fn from_toml_str(text: &str, fallback: Preset) -> Result<Self> {
        let overrides: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        let preset = match overrides.get("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::config("preset", "must be a string")),
            None => fallback,
        };
        let base = toml::Table::try_from(RunConfig::preset(preset))
            .map_err(|e| Error::config("<preset>", e.to_string()))?;
        let merged = merge_tables(base, overrides);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, fallback: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, fallback)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plugin.validate()?;
        self.distance.validate()?;
        self.decode.validate()?;
        self.stages.validate()?;
        if self.oracle.length_norm <= 0.0 {
            return Err(Error::config("oracle.length_norm", "must be positive"));
        }
        if self.data.group_size < 2 {
            return Err(Error::config("data.group_size", "must be at least 2"));
        }
        check_rate("data.synth.polarity_noise", self.data.synth.polarity_noise)?;
        check_rate("data.synth.third_person_share", self.data.synth.third_person_share)?;
        if self.data.synth.min_reviews > self.data.synth.max_reviews {
            return Err(Error::config("data.synth.min_reviews", "must not exceed max_reviews"));
        }
        Ok(())
    }

    /// Normalised TOML rendering with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the normalised rendering.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn merge_tables(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge_tables(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::preset(Preset::Paper).validate().unwrap();
        RunConfig::preset(Preset::Desk).validate().unwrap();
        let m = ModelConfig::paper();
        assert_eq!(
            (m.n_layers, m.n_heads, m.d_subword_emb, m.d_len_emb, m.d_model, m.d_ffn, m.vocab_size),
            (6, 8, 390, 10, 400, 1000, 32000)
        );
    }

    #[test]
    fn divisibility_error_names_key() {
        let err = RunConfig::from_toml_str("[model]\nn_heads = 3\n", Preset::Desk).unwrap_err();
        match err {
            Error::Config { key, constraint } => {
                assert_eq!(key, "model.n_heads");
                assert!(constraint.contains("divisible"), "{constraint}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_lambda_defaults_to_two() {
        let text = "[stages.novelty_phase]\nlr = 0.001\nsteps = 3\n";
        let cfg = RunConfig::from_toml_str(text, Preset::Desk).unwrap();
        assert_eq!(cfg.stages.novelty_phase.lambda, 2.0);
        assert_eq!(cfg.stages.novelty_phase.steps, 3);
        // untouched keys keep the preset values
        assert_eq!(cfg.model, ModelConfig::desk());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[model]\nn_layerz = 2\n", Preset::Desk).is_err());
    }

    #[test]
    fn normalised_form_round_trips() {
        let cfg = RunConfig::preset(Preset::Paper);
        let back = RunConfig::from_toml_str(&cfg.to_toml(), Preset::Desk).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), RunConfig::preset(Preset::Desk).hash());
    }

    #[test]
    fn glob_patterns() {
        assert!(glob_match("*", "anything"));
        assert!(glob_match("plugin.*", "plugin.layer0.q"));
        assert!(!glob_match("plugin.*", "emb.sub"));
        assert!(glob_match("layer*.cross.*", "layer3.cross.wq"));
        assert!(!glob_match("layer*.cross.*", "layer3.self.wq"));
        assert!(glob_match("a*b*c", "aXXbYYc"));
        assert!(!glob_match("a*b*c", "aXXbYY"));
    }

    #[test]
    fn stage_trainable_sets() {
        let s = Stages::desk();
        assert!(s.joint_finetune.is_trainable("layer0.cross.wq"));
        assert!(s.joint_finetune.is_trainable("plugin.out.w"));
        assert!(!s.joint_finetune.is_trainable("layer0.self.wq"));
        assert!(!s.plugin_init.is_trainable("emb.sub"));
        let mut t = StageConfig::new(1e-3, 1);
        t.frozen = vec!["emb.*".into()];
        assert!(!t.is_trainable("emb.sub"));
        assert!(t.is_trainable("layer0.ffn.w1"));
        assert_eq!(StageConfig::epochs(1e-3, 3).with_batch(4).total_steps(10), 9);
    }
}
