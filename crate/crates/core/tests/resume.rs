use std::fs;

use cppo_core::checkpoint;
use cppo_core::env::EnvConfig;
use cppo_core::trainer::{run_training, OptimizerKind, RunPaths, TrainConfig};

fn resume_matches_uninterrupted(optimizer: OptimizerKind) {
    let env = EnvConfig::default();
    let short = TrainConfig { global_batch: 4, dataset_size: 16, epochs: 2, checkpoint_every: 2, seed: 9, optimizer, ..TrainConfig::default() };
    let long = TrainConfig { epochs: 4, ..short.clone() };

    let dir = tempfile::tempdir().unwrap();
    let full = RunPaths::new(dir.path().join("full"));
    run_training(&env, &long, Some(&full), false).unwrap();

    let split = RunPaths::new(dir.path().join("split"));
    run_training(&env, &short, Some(&split), false).unwrap();
    let resumed = run_training(&env, &long, Some(&split), true).unwrap();
    assert_eq!(resumed.metrics.len(), long.total_steps());

    assert_eq!(fs::read(full.metrics()).unwrap(), fs::read(split.metrics()).unwrap());
    let a = checkpoint::load(&full.final_checkpoint()).unwrap();
    let b = checkpoint::load(&split.final_checkpoint()).unwrap();
    assert_eq!(checkpoint::encode(&a), checkpoint::encode(&b));
}

#[test]
fn sgd_resume_is_exact() {
    resume_matches_uninterrupted(OptimizerKind::Sgd);
}

#[test]
fn adamw_resume_is_exact() {
    resume_matches_uninterrupted(OptimizerKind::AdamW);
}
