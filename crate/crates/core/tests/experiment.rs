use plugperf::evaluation::{run_experiment, setting_rows, ExperimentPlan, ExperimentReport};
use plugperf::services::{MarketplaceConfig, MockMarketplace};
use plugperf::{Error, FeatureKind, ModelSpec, RecordStore, SettingKey};

fn market(n_services: usize, n_tasks: usize, contexts: usize, samples: usize, seed: u64) -> MockMarketplace {
    MockMarketplace::new(MarketplaceConfig {
        n_services,
        n_tasks,
        contexts_per_task: contexts,
        samples_per_task: samples,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn small_plan(m: &MockMarketplace, contexts: usize) -> ExperimentPlan {
    let mut plan = ExperimentPlan::new(m.service_ids(), m.task_ids(), contexts);
    plan.unlabeled_n = 40;
    plan.d = 10;
    plan.folds = 2;
    plan.sample_n = vec![8];
    plan.model_specs = vec![ModelSpec::knn(1)];
    plan
}

#[test]
fn minimal_plan_has_every_estimator_row() {
    let m = market(1, 1, 2, 50, 0);
    let report = run_experiment(&small_plan(&m, 2), &m).unwrap();
    assert_eq!(report.estimators, ["KNN", "AvgTrain", "ATC", "Sample^8"]);
    assert_eq!(report.rows.len(), 2 * 4);
    for r in &report.rows {
        assert!((0.0..=1.0).contains(&r.estimate));
        assert!((0.0..=1.0).contains(&r.absolute_error));
        assert_eq!(r.absolute_error, (r.estimate - r.true_performance).abs());
    }
    for e in &report.estimators {
        assert_eq!(report.aggregates[e].n, 2);
    }
}

#[test]
fn rf_beats_avgtrain_with_clean_features() {
    let mut cfg = MarketplaceConfig {
        n_services: 3,
        n_tasks: 10,
        contexts_per_task: 4,
        samples_per_task: 200,
        feature_fidelity: 1.0,
        seed: 5,
        ..Default::default()
    };
    cfg.sharpness_noise = 0.0;
    let m = MockMarketplace::new(cfg).unwrap();
    let mut plan = ExperimentPlan::new(m.service_ids(), m.task_ids(), 4);
    plan.unlabeled_n = 150;
    plan.d = 20;
    plan.folds = 5;
    plan.sample_n = vec![];
    plan.model_specs = vec![ModelSpec::random_forest(8, 40, 0.8)];
    let report = run_experiment(&plan, &m).unwrap();
    let (rf, avg) = (report.mae_of("RANDOM_FOREST").unwrap(), report.mae_of("AvgTrain").unwrap());
    assert!(rf < avg, "RF {rf} AvgTrain {avg}");
}

#[test]
fn reports_are_deterministic_and_round_trip() {
    let m = market(2, 3, 2, 60, 9);
    let mut plan = small_plan(&m, 2);
    plan.model_specs = vec![ModelSpec::random_forest(4, 10, 0.8), ModelSpec::knn(3)];
    let a = run_experiment(&plan, &m).unwrap();
    let b = run_experiment(&plan, &m).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(ExperimentReport::from_json(&a.to_json()).unwrap(), a);
    // Lazily generated and materialized records give the same report.
    assert_eq!(run_experiment(&plan, &m.record_store()).unwrap().to_json(), a.to_json());
    // Rows come out in setting order, estimators in report order.
    let keys: Vec<_> = a.rows.iter().map(|r| (&r.service_id, &r.task_id, &r.context_id)).collect();
    assert!(keys.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn different_seeds_change_the_sample() {
    let m = market(2, 3, 2, 60, 9);
    let mut plan = small_plan(&m, 2);
    let a = run_experiment(&plan, &m).unwrap();
    plan.seed = 1;
    assert_ne!(run_experiment(&plan, &m).unwrap().to_json(), a.to_json());
}

#[test]
fn missing_settings_are_a_coverage_error() {
    let m = market(2, 2, 2, 50, 1);
    let missing = SettingKey::new("svc01", "task01", "ctx00");
    let store = RecordStore::from_records(m.record_store().records().filter(|r| r.setting() != missing).cloned());
    match run_experiment(&small_plan(&m, 2), &store) {
        Err(Error::Coverage(keys)) => assert_eq!(keys, [missing.to_string()]),
        other => panic!("expected coverage error, got {other:?}"),
    }
    let mut plan = small_plan(&m, 2);
    plan.services.push("svc09".into());
    assert!(matches!(run_experiment(&plan, &m), Err(Error::Coverage(k)) if k.len() == 4));
}

#[test]
fn oversized_unlabeled_sample_is_rejected() {
    let m = market(1, 1, 2, 50, 0);
    let mut plan = small_plan(&m, 2);
    plan.unlabeled_n = 51;
    assert!(matches!(run_experiment(&plan, &m), Err(Error::InsufficientData(_))));
}

#[test]
fn invalid_plans_are_config_errors() {
    let m = market(1, 1, 2, 50, 0);
    let mut plan = small_plan(&m, 2);
    plan.folds = 1;
    assert!(matches!(run_experiment(&plan, &m), Err(Error::Config(_))));
    let mut plan = small_plan(&m, 2);
    plan.folds = 3;
    assert!(matches!(run_experiment(&plan, &m), Err(Error::Config(_))));
}

#[test]
fn per_service_models_and_table() {
    let m = market(2, 4, 2, 60, 3);
    let mut plan = small_plan(&m, 2);
    plan.per_service = true;
    plan.feature_kinds = vec![FeatureKind::Nll, FeatureKind::Gap];
    let report = run_experiment(&plan, &m).unwrap();
    assert_eq!(report.per_service["KNN"].len(), 2);
    let table = report.render_table();
    let total = report.aggregates["KNN"];
    assert!(table.contains(&format!("{:.2} ± {:.2}", total.mae * 100.0, total.sd * 100.0)), "{table}");
    assert!(table.lines().next().unwrap().contains("svc01"));
}

#[test]
fn setting_rows_match_truth_and_shape() {
    let m = market(2, 2, 2, 60, 4);
    let plan = small_plan(&m, 2);
    let rows = setting_rows(&plan, &m).unwrap();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert_eq!(r.profile.vector.len(), 2 * plan.d);
        assert_eq!(r.target, m.true_performance(&r.profile.setting()).unwrap());
    }
}
