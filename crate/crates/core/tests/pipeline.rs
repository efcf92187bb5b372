//! Public-API round trips across modules: dataset files, config text and a
//! short train/checkpoint/predict cycle.

use std::path::Path;

use proptest::prelude::*;

use laneseg_core::dataset::{generate_dataset, load_dataset, save_dataset, GenParams};
use laneseg_core::evaluation::DEFAULT_THRESHOLDS;
use laneseg_core::trainer::{groundtruth_segments, predicted_segments, Checkpoint, DropState, Trainer};
use laneseg_core::ExperimentConfig;

fn tiny_config(epochs: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&[
        "embed_dim=8",
        "heads=2",
        "ffn_dim=16",
        "encoder_layers=1",
        "decoder_layers=2",
        "bev_rows=7",
        "bev_cols=5",
        "lr=1e-3",
    ])
    .unwrap();
    cfg.epochs = epochs;
    cfg
}

#[test]
fn saved_dataset_loads_back_identically() {
    let params = GenParams {
        frames: 2,
        ..GenParams::default()
    };
    let scenes = generate_dataset(90, 3, &params);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&scenes, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), scenes);
}

#[test]
fn trained_checkpoint_predicts_like_the_trainer() {
    let params = GenParams {
        frames: 1,
        ..GenParams::default()
    };
    let scenes = generate_dataset(91, 2, &params);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(1);
    let mut trainer = Trainer::new(&cfg).unwrap();
    trainer.write_to(dir.path()).unwrap();
    trainer.run(&scenes, |_| {}).unwrap();

    let ckpt = Checkpoint::load(&dir.path().join(Checkpoint::file_name(1))).unwrap();
    let restored = Trainer::from_checkpoint(&cfg, &ckpt, DropState::default()).unwrap();
    let a = predicted_segments(trainer.model(), trainer.store(), &scenes).unwrap();
    let b = predicted_segments(restored.model(), restored.store(), &scenes).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    assert!(a.iter().all(|s| s.frames.iter().all(|f| f.len() == cfg.queries)));

    let report = trainer.evaluate(&scenes, &DEFAULT_THRESHOLDS).unwrap();
    assert!((0.0..=1.0).contains(&report.map));
    assert_eq!(groundtruth_segments(&scenes)[0].scene_id, scenes[0].id);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_round_trips(
        embed in 1usize..8,
        heads in 1usize..4,
        lr in 1e-6f64..1e-1,
        seed in any::<u64>(),
        epochs in 0u64..1000,
    ) {
        let mut cfg = ExperimentConfig::preset("4:8").unwrap();
        cfg.embed_dim = embed * heads;
        cfg.heads = heads;
        cfg.lr = lr;
        cfg.seed = seed;
        cfg.epochs = epochs;
        let mut back = ExperimentConfig::default();
        back.apply_text(&cfg.to_text(), Path::new("config.txt")).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}
