mod common;

use fewsum::checkpoint::file_hash;
use fewsum::corpus::Split;
use fewsum::pipeline::{Run, Step, System};

use common::tiny_config;

#[test]
fn full_schedule_writes_every_artifact_and_reruns_as_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(dir.path(), tiny_config(3), true).unwrap();
    let res = run.pipeline(true, true).unwrap();
    for name in ["fewsum", "usl", "usl_f", "mtl", "random", "lead", "lexrank", "clustroid"] {
        let rl = res.rouge_l(name).unwrap_or_else(|| panic!("no report for {name}"));
        assert!((0.0..=1.0).contains(&rl), "{name}: {rl}");
        assert!(run.path(&Run::output_rel(name, Split::Test)).exists());
    }
    for step in Step::ALL {
        assert!(run.is_done(step.name()), "{}", step.name());
    }
    for f in ["reports/rouge.test.csv", "reports/rouge.test.txt", "reports/text.test.csv", "logs/train.log"] {
        assert!(run.path(f).exists(), "{f}");
    }

    let before = std::fs::read_to_string(run.path("manifest.json")).unwrap();
    let mut again = Run::open(dir.path(), tiny_config(3), true).unwrap();
    for step in Step::ALL {
        assert!(again.train(step).unwrap().is_none(), "{} re-trained", step.name());
    }
    again.pipeline(true, true).unwrap();
    assert_eq!(std::fs::read_to_string(again.path("manifest.json")).unwrap(), before);
}

#[test]
fn config_change_invalidates_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(dir.path(), tiny_config(4), true).unwrap();
    run.train(Step::PretrainLm).unwrap();
    assert!(run.is_done("pretrain_lm"));
    let mut cfg = tiny_config(4);
    cfg.stages.pretrain_lm.lr *= 2.0;
    let run = Run::open(dir.path(), cfg, true).unwrap();
    assert!(!run.is_done("pretrain_lm"));
}

#[test]
fn tampered_checkpoint_is_retrained() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(dir.path(), tiny_config(5), true).unwrap();
    run.train(Step::PretrainLm).unwrap();
    let ck = run.path(&Run::checkpoint_rel(Step::PretrainLm));
    let good = file_hash(&ck).unwrap();
    let mut bytes = std::fs::read(&ck).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&ck, bytes).unwrap();
    assert!(!run.is_done("pretrain_lm"));
    assert!(run.train(Step::PretrainLm).unwrap().is_some());
    assert_eq!(file_hash(&ck).unwrap(), good);
}

#[test]
fn interrupted_stage_resumes_to_the_same_checkpoint() {
    let straight = tempfile::tempdir().unwrap();
    let mut a = Run::open(straight.path(), tiny_config(6), true).unwrap();
    a.checkpoint_every = 2;
    a.train(Step::TrainLoo).unwrap();

    let broken = tempfile::tempdir().unwrap();
    let mut b = Run::open(broken.path(), tiny_config(6), true).unwrap();
    b.checkpoint_every = 2;
    b.train(Step::PretrainLm).unwrap();
    b.stop_after = Some(3);
    assert!(b.train(Step::TrainLoo).is_err());
    assert!(b.path("checkpoints/train_loo.partial").exists());
    assert!(!b.is_done("train_loo"));
    b.stop_after = None;
    let rep = b.train(Step::TrainLoo).unwrap().unwrap();
    assert_eq!(rep.steps, 4);
    assert!(!b.path("checkpoints/train_loo.partial").exists());

    let rel = Run::checkpoint_rel(Step::TrainLoo);
    assert_eq!(file_hash(&a.path(&rel)).unwrap(), file_hash(&b.path(&rel)).unwrap());
}

#[test]
fn summaries_follow_the_requested_system() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(dir.path(), tiny_config(7), true).unwrap();
    let few = run.summarize(System::FewSum, Split::Valid).unwrap();
    assert_eq!(few.len(), run.prepared().unwrap().annotated.split(Split::Valid).len());
    assert!(few.iter().all(|r| r.properties_used.len() == 9));
    let usl = run.summarize(System::Usl, Split::Valid).unwrap();
    assert!(usl.iter().all(|r| r.properties_used.iter().all(|&x| x == 0.0)));
    // markers for summaries are keyed by split
    assert!(run.is_done("summarize.fewsum.valid"));
    assert!(!run.is_done("summarize.fewsum.test"));
}
