#![allow(dead_code)]

use fewsum::config::{Preset, RunConfig, StageConfig};

/// Desk model on a small corpus with a handful of steps per stage, for
/// tests that exercise orchestration rather than learning.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.seed = seed;
    cfg.data.synth.n_products = 40;
    cfg.data.synth.n_annotated = 20;
    cfg.data.heldout_groups = 4;
    cfg.decode.max_tokens = 12;
    cfg.decode.beam_size = 2;
    let shrink = |s: &mut StageConfig| {
        s.steps = 4;
        s.epochs = 0;
        s.batch_size = s.batch_size.min(2);
    };
    let st = &mut cfg.stages;
    for s in [
        &mut st.pretrain_lm,
        &mut st.train_loo,
        &mut st.novelty_phase,
        &mut st.plugin_init,
        &mut st.plugin_finetune,
        &mut st.joint_finetune,
        &mut st.usl_finetune,
        &mut st.mtl,
    ] {
        shrink(s);
    }
    cfg
}
