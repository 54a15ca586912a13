//! Optimizer steps, memorization of one clip and checkpointed evaluation.

use attend_affect::dataset::{generate_synthetic, split_by_target, Corpus, Partition, SynthConfig};
use attend_affect::models::{build_model, Model, ModelConfig, ModelKind};
use attend_affect::trainer::{clip_loss, evaluate, fit, prepare_all, train, train_step, Adam, TrainConfig};
use attend_affect::windowing::WindowPlan;
use attend_affect::ModalitySet;

fn corpus(targets: usize, duration: f64, seed: u64) -> Corpus {
    generate_synthetic(&SynthConfig {
        targets,
        duration_mean: duration,
        duration_jitter: 0.0,
        observers: 5,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn model_for(kind: ModelKind, corpus: &Corpus, seed: u64) -> Model {
    let mut cfg = ModelConfig::desk(kind, ModalitySet::all(), corpus.meta.dims.clone());
    cfg.seed = seed;
    let mut plan = WindowPlan::default();
    plan.fit(corpus.clips.iter().map(|c| (&c.streams, c.duration)), cfg.kernel).unwrap();
    cfg.window = plan;
    build_model(cfg).unwrap()
}

#[test]
fn tiny_step_lowers_the_loss() {
    let c = corpus(5, 20.0, 3);
    for kind in ModelKind::ALL {
        let mut model = model_for(kind, &c, 1);
        let clips = prepare_all(&model, &c.clips.iter().collect::<Vec<_>>()).unwrap();
        let cfg = TrainConfig {
            lr: 1e-6,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&model.params);
        let before = clip_loss(&model, &clips[0]).unwrap();
        let reported = train_step(&mut model, &mut adam, &clips[0], &cfg, None).unwrap();
        assert_eq!(reported.to_bits(), before.to_bits(), "{kind}");
        let after = clip_loss(&model, &clips[0]).unwrap();
        assert!(after < before, "{kind}: {after} !< {before}");
    }
}

#[test]
fn memorizes_a_single_clip() {
    let c = corpus(1, 30.0, 8);
    let mut model = model_for(ModelKind::Mft, &c, 2);
    let clips = prepare_all(&model, &[&c.clips[0]]).unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        max_epochs: 400,
        patience: 400,
        ..TrainConfig::default()
    };
    let history = fit(&mut model, &clips, &clips, &cfg).unwrap();
    assert!(history.best_val_ccc >= 0.95, "{}", history.best_val_ccc);
}

#[test]
fn checkpoint_reproduces_evaluation_bit_exactly() {
    let c = corpus(6, 30.0, 4);
    let split = split_by_target(&c, [0.6, 0.2, 0.2], 4).unwrap();
    let mut model = model_for(ModelKind::Sft, &c, 5);
    let cfg = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &c, &split, &cfg).unwrap();
    let report = evaluate(&model, &c, &split, Partition::Test, Some(&history)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sft.json");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    let again = evaluate(&loaded, &c, &split, Partition::Test, Some(&history)).unwrap();
    assert_eq!(report.ccc.len(), again.ccc.len());
    for (a, b) in report.ccc.iter().zip(&again.ccc) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(report.notes, vec!["corpus: synthetic".to_string()]);
}

#[test]
fn history_starts_from_the_untrained_model_and_keeps_the_best() {
    let c = corpus(5, 20.0, 6);
    let split = split_by_target(&c, [0.6, 0.2, 0.2], 6).unwrap();
    let mut model = model_for(ModelKind::B1Lstm, &c, 0);
    let cfg = TrainConfig {
        max_epochs: 4,
        ..TrainConfig::default()
    };
    let h = train(&mut model, &c, &split, &cfg).unwrap();
    assert_eq!(h.epochs[0].epoch, 0);
    assert!(h.epochs[0].train_loss.is_none());
    let best = h.epochs.iter().map(|e| e.val_ccc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best, h.best_val_ccc);
    let val = evaluate(&model, &c, &split, Partition::Val, Some(&h)).unwrap();
    assert!((val.mean - h.best_val_ccc).abs() < 1e-12);
}
