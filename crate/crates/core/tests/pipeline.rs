use std::fs;
use std::path::Path;

use coder_core::checkpoint::load_encoder;
use coder_core::synthlab::{gen_synthetic, ExperimentConfig, SyntheticSpec};
use coder_core::trainer::{train, TrainConfig};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        corpus_size: 400,
        n_train: 48,
        n_val: 24,
        ..SyntheticSpec::ablation()
    }
}

fn exported(dir: &Path) -> TrainConfig {
    let spec = small_spec();
    let data = gen_synthetic(&spec).unwrap();
    let mut template = ExperimentConfig::desk(spec.dim).finetune;
    template.base_lr = 0.05;
    template.epochs = 4;
    template.eval_every = 3;
    template.patience = 0;
    template.dropout = 0.1;
    let mut cfg = data.export(dir, &template, 0.5, 64, 11).unwrap();
    cfg.paths.rebase(dir);
    cfg
}

#[test]
fn resumed_run_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let base = exported(dir.path());

    let mut whole = base.clone();
    whole.paths.out_dir = Some(dir.path().join("whole"));
    let full = train(&whole).unwrap();
    let total = full.outcome.state.step;
    assert!(total >= 4, "run too short to split: {total} steps");

    let mut first = base.clone();
    first.paths.out_dir = Some(dir.path().join("split"));
    first.max_steps = total / 2;
    let half = train(&first).unwrap();
    assert_eq!(half.outcome.state.step, total / 2);

    let mut second = first.clone();
    second.max_steps = 0;
    second.paths.resume = Some(half.state.clone());
    let resumed = train(&second).unwrap();

    assert_eq!(resumed.outcome.state.step, total);
    assert_eq!(
        fs::read(&full.last_checkpoint).unwrap(),
        fs::read(&resumed.last_checkpoint).unwrap()
    );
    assert_eq!(
        fs::read(&full.best_checkpoint).unwrap(),
        fs::read(&resumed.best_checkpoint).unwrap()
    );
    assert_eq!(
        fs::read_to_string(&full.log).unwrap(),
        fs::read_to_string(&resumed.log).unwrap(),
        "appended log differs from the uninterrupted one"
    );
}

#[test]
fn same_seed_same_weights_and_training_helps() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = exported(dir.path());
    cfg.paths.out_dir = Some(dir.path().join("a"));
    let a = train(&cfg).unwrap();
    cfg.paths.out_dir = Some(dir.path().join("b"));
    let b = train(&cfg).unwrap();
    assert_eq!(
        load_encoder(&a.last_checkpoint).unwrap(),
        load_encoder(&b.last_checkpoint).unwrap()
    );
    assert!(
        a.outcome.selection.best_mrr > a.outcome.initial_mrr,
        "best {} vs initial {}",
        a.outcome.selection.best_mrr,
        a.outcome.initial_mrr
    );
}

#[test]
fn config_file_paths_resolve_against_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let data = gen_synthetic(&spec).unwrap();
    let mut template = ExperimentConfig::desk(spec.dim).finetune;
    template.epochs = 1;
    let cfg = data.export(dir.path(), &template, 0.5, 32, 3).unwrap();
    let conf = dir.path().join("train.conf");
    fs::write(&conf, cfg.to_text()).unwrap();
    let loaded = TrainConfig::load(&conf).unwrap();
    assert_eq!(
        loaded.paths.collection.as_deref(),
        Some(dir.path().join("collection.tsv").as_path())
    );
    let out = train(&loaded).unwrap();
    assert!(out.last_checkpoint.starts_with(dir.path()));
}

#[test]
fn missing_input_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = exported(dir.path());
    fs::remove_file(dir.path().join("val_pool.tsv")).unwrap();
    cfg.paths.out_dir = Some(dir.path().join("x"));
    let err = train(&cfg).unwrap_err();
    assert!(err.is_validation(), "{err}");
}
