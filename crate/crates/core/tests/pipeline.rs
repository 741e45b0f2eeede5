use std::path::Path;

use mixcl::data::generate_synthetic_corpus;
use mixcl::study::median;
use mixcl::trainer::{finetune, pretrain, ExperimentConfig, TrainError};

fn config(dir: &Path, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed,
        data_dir: dir.join("data"),
        output: dir.join(format!("run{seed}")),
        ..ExperimentConfig::default()
    };
    c.model.seed = seed;
    c
}

fn corpus(dir: &Path) {
    generate_synthetic_corpus(&ExperimentConfig::default().corpus, 0, dir.join("data")).unwrap();
}

#[test]
fn pretraining_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let mut ratios = Vec::new();
    for seed in 0..3 {
        let mut c = config(dir.path(), seed);
        c.pretrain.iterations = 50;
        let log = pretrain(&c).unwrap().log;
        assert_eq!(log.steps.len(), 50);
        ratios.push(log.steps[49].total / log.steps[0].total);
    }
    assert!(median(ratios.clone()).unwrap() < 1.0, "{ratios:?}");
}

#[test]
fn zero_weights_log_identity_only() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let mut c = config(dir.path(), 1);
    c.pretrain.iterations = 3;
    c.loss.weights.alpha = 0.0;
    c.loss.weights.beta = 0.0;
    for r in pretrain(&c).unwrap().log.steps {
        assert_eq!(r.total, r.identity);
    }
}

#[test]
fn target_dataset_is_never_a_pretraining_source() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let mut c = config(dir.path(), 0);
    c.pretrain_datasets = vec!["bright".into(), "target".into()];
    let e = pretrain(&c).unwrap_err();
    assert!(matches!(e, TrainError::Config(_)), "{e}");
    assert!(e.to_string().contains("target"));
    assert!(!c.output.join("model.ckpt").exists());
}

#[test]
fn subsets_depend_on_seed_not_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let mut c = config(dir.path(), 2);
    c.pretrain.iterations = 2;
    c.finetune.iterations = 2;
    c.finetune.label_fraction = 0.5;
    c.output = dir.path().join("pre");
    pretrain(&c).unwrap();
    c.output = dir.path().join("scratch");
    let a = finetune(&c).unwrap();
    c.finetune.init = Some(dir.path().join("pre/model.ckpt"));
    c.output = dir.path().join("init");
    let b = finetune(&c).unwrap();
    assert_eq!(a.supervised, b.supervised);
    assert_eq!(a.split, b.split);
    assert_eq!(a.supervised.len(), 4);
    assert_ne!(a.params, b.params);

    c.finetune.label_fraction = 1.0;
    c.output = dir.path().join("full");
    let full = finetune(&c).unwrap();
    assert_eq!(full.supervised, full.split.train);
}

#[test]
fn finetuning_reduces_loss_over_200_steps() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let mut drops = Vec::new();
    for seed in 0..3 {
        let mut c = config(dir.path(), seed);
        c.finetune.iterations = 200;
        let log = finetune(&c).unwrap().log;
        let mean = |r: std::ops::Range<usize>| log.steps[r.clone()].iter().map(|s| s.total).sum::<f64>() / r.len() as f64;
        drops.push(mean(180..200) - mean(0..20));
    }
    assert!(median(drops.clone()).unwrap() < 0.0, "{drops:?}");
}
