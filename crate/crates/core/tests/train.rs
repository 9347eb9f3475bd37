mod common;

use common::tiny_config;
use hpk_core::data::{generate_dataset, generate_object, Family, MANIFEST_NAME};
use hpk_core::error::Error;
use hpk_core::inference::InferenceMode;
use hpk_core::model::{EstimatorKind, ModelState};
use hpk_core::train::{
    evaluate, load_dataset, prepare_all, read_metrics, score_predictions, train, train_from, Prepared, TrainConfig,
    BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE,
};

fn chairs(n: usize, offset: u64, m: usize) -> Vec<Prepared> {
    let objs: Vec<_> = (0..n as u64)
        .map(|i| generate_object(Family::Chairs, offset + i, m).unwrap())
        .collect();
    prepare_all(&objs, 3).unwrap()
}

fn tiny_train_config(kind: EstimatorKind) -> TrainConfig {
    TrainConfig {
        model: hpk_core::model::ModelConfig {
            estimator: kind,
            samples: 3,
            ..tiny_config(8, 4)
        },
        learning_rate: 1e-2,
        batch_size: 3,
        epochs: 2,
        seed: 11,
        eval_repeats: 2,
        eval_samples: 5,
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (tr, te) = (chairs(5, 0, 40), chairs(2, 100, 40));
    for kind in EstimatorKind::ALL {
        let config = TrainConfig {
            learning_rate: 0.0,
            ..tiny_train_config(kind)
        };
        let init = ModelState::init(config.model.clone(), config.seed).unwrap();
        let out = train(&config, &tr, &te, None).unwrap();
        for (a, b) in init.store.params().iter().zip(out.state.store.params()) {
            assert_eq!(a.value, b.value, "{kind}: {}", a.name);
        }
    }
}

#[test]
fn same_config_and_seed_reproduce_metrics_and_weights() {
    let (tr, te) = (chairs(5, 0, 40), chairs(2, 100, 40));
    for kind in EstimatorKind::ALL {
        let config = tiny_train_config(kind);
        let a = train(&config, &tr, &te, None).unwrap();
        let b = train(&config, &tr, &te, None).unwrap();
        let strip = |m: &[hpk_core::train::MetricsRecord]| m.iter().map(|r| r.without_timing()).collect::<Vec<_>>();
        assert_eq!(strip(&a.metrics), strip(&b.metrics), "{kind}");
        assert_eq!(a.state.store, b.state.store, "{kind}");
        let c = train(&TrainConfig { seed: 12, ..config }, &tr, &te, None).unwrap();
        assert_ne!(a.state.store, c.state.store, "{kind}");
    }
}

#[test]
fn checkpoints_and_metrics_are_written_per_epoch() {
    let (tr, te) = (chairs(4, 0, 40), chairs(2, 100, 40));
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_train_config(EstimatorKind::McReinforce);
    let out = train(&config, &tr, &te, Some(dir.path())).unwrap();
    let records = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(records, out.metrics);
    assert_eq!(records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
    for r in &records {
        assert!((0.0..=1.0).contains(&r.top_oa) && (0.0..=1.0).contains(&r.mid_oa));
    }

    let last = ModelState::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(last.store, out.state.store);
    let best = ModelState::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best.store, out.best.store);
    let top_mid = |r: &hpk_core::train::MetricsRecord| r.top_oa + r.mid_oa;
    let best_record = &records[out.best_epoch - 1];
    assert!(records.iter().all(|r| top_mid(r) <= top_mid(best_record)));

    // A second run appends rather than truncating.
    train(&config, &tr, &te, Some(dir.path())).unwrap();
    assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().len(), 4);
}

#[test]
fn checkpoint_round_trip_preserves_evaluation_bit_exactly() {
    let (tr, te) = (chairs(4, 0, 40), chairs(3, 100, 40));
    let out = train(&tiny_train_config(EstimatorKind::McPathwise), &tr, &te, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.state.save(&path).unwrap();
    let loaded = ModelState::load(&path).unwrap();
    for mode in [InferenceMode::Mpl, InferenceMode::MonteCarlo(7)] {
        let a = evaluate(&out.state, &te, mode, 3, 5).unwrap();
        let b = evaluate(&loaded, &te, mode, 3, 5).unwrap();
        assert_eq!(a, b);
    }
    let mpl = evaluate(&loaded, &te, InferenceMode::Mpl, 1, 0).unwrap();
    assert_eq!(mpl, evaluate(&loaded, &te, InferenceMode::Mpl, 1, 99).unwrap());
}

#[test]
fn oracle_predictions_score_perfectly() {
    let te = chairs(4, 100, 64);
    let oracle: Vec<_> = te.iter().map(|d| (d.top.clone(), d.mid.clone())).collect();
    assert_eq!(score_predictions(&te, &oracle).unwrap(), (1.0, 1.0));

    // Middle labels are matched, so a relabelled oracle is still perfect.
    let shifted: Vec<_> = te
        .iter()
        .map(|d| (d.top.clone(), d.mid.iter().map(|m| (m + 3) % 8).collect()))
        .collect();
    assert_eq!(score_predictions(&te, &shifted).unwrap(), (1.0, 1.0));
    assert!(matches!(score_predictions(&te, &oracle[..2]), Err(Error::Contract(_))));
}

#[test]
fn untrained_model_sits_well_below_perfect_middle_accuracy() {
    let te = chairs(10, 100, 128);
    let state = ModelState::init(tiny_config(8, 4), 0).unwrap();
    let r = evaluate(&state, &te, InferenceMode::Mpl, 1, 0).unwrap();
    assert!(r.mid_oa < 0.8, "{}", r.mid_oa);
}

#[test]
fn schema_mismatch_is_incompatible() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), Family::Tables, 0, 2, 1, 32).unwrap();
    let err = load_dataset(&dir.path().join(MANIFEST_NAME), &tiny_config(8, 4)).unwrap_err();
    assert!(matches!(err, Error::Incompatible(_)), "{err}");
    let (tr, te) = load_dataset(&dir.path().join(MANIFEST_NAME), &tiny_config(6, 3)).unwrap();
    assert_eq!((tr.len(), te.len()), (2, 1));
}

#[test]
fn divergence_aborts_and_keeps_last_good_checkpoint() {
    let (tr, te) = (chairs(4, 0, 40), chairs(2, 100, 40));
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        epochs: 1,
        ..tiny_train_config(EstimatorKind::MplSte)
    };
    let good = train(&config, &tr, &te, Some(dir.path())).unwrap();
    let before = std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap();

    let wild = TrainConfig {
        learning_rate: 1e300,
        epochs: 3,
        ..config
    };
    let err = train_from(&wild, good.state, &tr, &te, Some(dir.path()), |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, .. }), "{err}");
    assert_eq!(std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap(), before);
    assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().len(), 1);
}

#[test]
fn invalid_configs_are_rejected() {
    let (tr, te) = (chairs(2, 0, 20), chairs(1, 100, 20));
    let base = tiny_train_config(EstimatorKind::MplSte);
    for bad in [
        TrainConfig { batch_size: 0, ..base.clone() },
        TrainConfig { learning_rate: -1.0, ..base.clone() },
        TrainConfig { eval_samples: 0, ..base.clone() },
    ] {
        assert!(matches!(train(&bad, &tr, &te, None), Err(Error::Parameter(_))));
    }
    assert!(matches!(train(&base, &[], &te, None), Err(Error::Parameter(_))));
}

#[test]
fn reinforce_loss_falls_over_the_first_five_epochs() {
    let mut decreasing = 0;
    let mut traces = Vec::new();
    for seed in 0..10u64 {
        let objs: Vec<_> = (0..200)
            .map(|i| generate_object(Family::Chairs, hpk_core::data::object_seed(seed, i), 512).unwrap())
            .collect();
        let data = prepare_all(&objs, hpk_core::model::ModelConfig::default().k_nn).unwrap();
        let config = TrainConfig {
            model: hpk_core::model::ModelConfig {
                estimator: EstimatorKind::McReinforce,
                ..Default::default()
            },
            epochs: 5,
            seed,
            eval_samples: 5,
            ..TrainConfig::default()
        };
        let out = train(&config, &data, &data[..2], None).unwrap();
        let losses: Vec<f64> = out.metrics.iter().map(|r| r.loss).collect();
        if losses.windows(2).all(|w| w[1] < w[0]) {
            decreasing += 1;
        }
        traces.push(losses);
    }
    assert!(decreasing >= 9, "{decreasing}/10: {traces:?}");
}
