use iae_core::bidding::{run_experiment, ExperimentConfig, Market, MarketConfig};
use iae_core::dataset::Dataset;
use iae_core::evaluation::{bound_check, pehe, EvalConfig};
use iae_core::model::{load_outcome_model, save_oracle, Model, ModelConfig, Oracle, OutcomeModel};
use iae_core::synthetic::{generate, sample_context, GenConfig};
use iae_core::trainer::{train, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_world(seed: u64) -> GenConfig {
    GenConfig {
        n_samples: 1500,
        seed,
        ..GenConfig::default()
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        rep_width: 16,
        rep_depth: 2,
        hyp_width: 16,
        hyp_depth: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn generate_train_evaluate_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let world = small_world(3);
    let (data, truth) = generate(&world).unwrap();
    let csv = dir.path().join("data.csv");
    data.save(&csv).unwrap();
    let data = Dataset::load(&csv).unwrap();
    assert_eq!(data.ground_truth(), Some(&truth));

    let cfg = TrainConfig {
        max_epochs: 3,
        batch_size: 128,
        ..TrainConfig::default()
    };
    let (model, report) = train(&data, &small_model(), &cfg).unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert!(report
        .epochs
        .iter()
        .all(|e| e.ipm_sum.is_some() && e.objective.is_finite()));

    let ckpt = dir.path().join("model.json");
    model.save(&ckpt).unwrap();
    let loaded = load_outcome_model(&ckpt).unwrap();
    let x = data.context(0);
    assert_eq!(loaded.predict_all(x).unwrap(), model.predict_all(x).unwrap());
    assert_eq!(Model::load(&ckpt).unwrap(), model);

    let r = bound_check(&model, &data, cfg.beta, &EvalConfig::default()).unwrap();
    assert!(r.is_consistent());
    assert!(r.weighted_adjacent_bound_holds);
    assert!(r.ipm_sum.unwrap() > 0.0);
    assert_eq!(r.pehe, pehe(&model, &truth, data.contexts()).unwrap());

    let market = Market::new(&world, truth, MarketConfig::default()).unwrap();
    let exp = run_experiment(&market, &model, None, &ExperimentConfig::default()).unwrap();
    assert_eq!(exp.days.len(), 10);
    for cal in exp.days.iter().filter_map(|d| d.calibration.as_ref()) {
        assert_eq!(cal.within_tolerance, cal.relative_gap <= 0.01);
        assert!(cal.steps <= 40);
    }
    let cost = exp.summary.paired_cost.unwrap();
    assert!((cost - 1.0).abs() <= 0.02, "{cost}");
}

#[test]
fn oracle_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (data, truth) = generate(&small_world(4)).unwrap();
    let ckpt = dir.path().join("oracle.json");
    save_oracle(&truth, &ckpt).unwrap();
    let model = load_outcome_model(&ckpt).unwrap();
    let r = bound_check(model.as_ref(), &data, 1.0, &EvalConfig::default()).unwrap();
    assert_eq!(r.pehe, 0.0);
    assert_eq!(r.adjacent_bound, 0.0);
    assert_eq!(r.monotone_fraction, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn oracle_effects_are_transitive(seed in 0u64..1000, world_seed in 0u64..20) {
        let world = small_world(world_seed);
        let truth = iae_core::synthetic::ground_truth(&world).unwrap();
        let oracle = Oracle { truth };
        let x = sample_context(&world, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = oracle.iae_matrix(&x).unwrap();
        let n = a.len();
        for i in 0..n {
            prop_assert_eq!(a[i][i], 0.0);
            for j in 0..n {
                prop_assert!((a[i][j] + a[j][i]).abs() <= 1e-12);
                for k in 0..n {
                    prop_assert!((a[i][j] + a[j][k] - a[i][k]).abs() <= 1e-9);
                }
            }
        }
    }
}
