use neural_cache::config::{ExperimentConfig, RunConfig};
use neural_cache::metrics::{
    aggregate_seeds, auc_over_budgets, oracle_delta, teacher_wrong_subset_accuracy, RunMetrics,
};
use neural_cache::simulator::run_sweep;
use neural_cache::synth::{generate, SynthSpec};
use neural_cache::{
    ClassLabel, Classifier, Instance, PolicyConfig, PolicyKind, SoftmaxLearner, StudentModel,
    SweepReport, TeacherDistribution,
};
use proptest::prelude::*;

#[test]
fn auc_of_a_linear_curve_is_its_midpoint() {
    let auc = auc_over_budgets(&[(3000.0, 0.8), (1000.0, 0.6), (2000.0, 0.7)]).unwrap();
    assert!((auc - 0.7).abs() < 1e-12);
}

#[test]
fn seed_aggregate_example() {
    let mv = aggregate_seeds(&[0.6, 0.8]).unwrap();
    assert!((mv.mean - 0.7).abs() < 1e-12);
    assert!((mv.variance - 0.01).abs() < 1e-12);
}

#[test]
fn teacher_wrong_subset() {
    let inst = |id: &str, x: f64, gold: usize, teacher: usize| {
        let mut lp = vec![-4.0, -4.0];
        lp[teacher] = -0.1;
        Instance {
            id: id.into(),
            text: None,
            features: vec![x],
            embedding: vec![1.0],
            gold: ClassLabel(gold),
            teacher: TeacherDistribution::new(lp).unwrap(),
        }
    };
    // Predicts class 1 for positive x, class 0 otherwise.
    let model = StudentModel::from_weights(2, 1, vec![-1.0, 0.0, 1.0, 0.0]).unwrap();
    assert_eq!(model.predict_label(&[2.0]).unwrap(), ClassLabel(1));
    let test = vec![
        inst("a", 1.0, 1, 0),
        inst("b", -1.0, 1, 0),
        inst("c", 1.0, 1, 1),
    ];
    assert_eq!(
        teacher_wrong_subset_accuracy(&model, &test).unwrap(),
        Some(0.5)
    );
    assert_eq!(
        teacher_wrong_subset_accuracy(&model, &test[2..]).unwrap(),
        None
    );
}

fn metrics(online: f64) -> RunMetrics {
    RunMetrics {
        online_accuracy: online,
        final_accuracy: None,
        teacher_calls: 0,
        spend: 0.0,
        teacher_label_accuracy_on_called: None,
        retrain_count: 0,
        teacher_wrong_subset_accuracy: None,
        oracle_dropped: 0,
        empty_committee_decisions: 0,
    }
}

#[test]
fn identical_runs_have_zero_oracle_delta() {
    let base = RunConfig::new(PolicyConfig::new(PolicyKind::Margin), 10.0, 0);
    let mut filtered = base.clone();
    filtered.oracle_filter = true;
    let d = oracle_delta(&[(filtered, metrics(0.71))], &[(base, metrics(0.71))]).unwrap();
    assert_eq!(d.online, 0.0);
    assert_eq!(d.final_, None);
}

#[test]
fn sweep_report_and_oracle_deltas() {
    let ds = generate(&SynthSpec {
        online: 300,
        test: 100,
        teacher_accuracy: 0.7,
        seed: 9,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut cfg = ExperimentConfig::new(vec![PolicyConfig::new(PolicyKind::FrontLoading)]);
    cfg.budgets = vec![100.0, 50.0];
    cfg.seeds = vec![0, 1];
    cfg.warmup_size = 20;
    cfg.retrain_frequency = 50;
    let learner = SoftmaxLearner::default();
    let base = run_sweep(&ds, &cfg, &learner).unwrap();
    let base_report = SweepReport::from_cells(ds.name(), &cfg, &base).unwrap();
    let p = base_report.policy("fr").unwrap();
    assert_eq!(
        p.points.iter().map(|x| x.budget).collect::<Vec<_>>(),
        vec![50.0, 100.0]
    );
    assert!(p.auc_final.is_some());

    let mut filtered_cfg = cfg.clone();
    filtered_cfg.oracle_filter = true;
    let filtered = run_sweep(&ds, &filtered_cfg, &learner).unwrap();
    let report = SweepReport::from_cells(ds.name(), &filtered_cfg, &filtered).unwrap();
    let rows = report.oracle_deltas_against(&base_report).unwrap();
    assert_eq!(rows.len(), 1);
    let diffs: Vec<f64> = filtered
        .iter()
        .zip(&base)
        .map(|(f, b)| f.metrics.online_accuracy - b.metrics.online_accuracy)
        .collect();
    assert!((rows[0].delta.online - aggregate_seeds(&diffs).unwrap().mean).abs() < 1e-12);
    assert!(base_report.oracle_deltas_against(&report).is_err());
    assert!(filtered.iter().all(|c| c.metrics.oracle_dropped > 0));
}

proptest! {
    #[test]
    fn aggregate_is_permutation_invariant(values in prop::collection::vec(0.0f64..1.0, 1..20), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = values.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(aggregate_seeds(&values).unwrap(), aggregate_seeds(&shuffled).unwrap());
    }

    #[test]
    fn auc_of_a_constant_curve_is_the_constant(budgets in prop::collection::btree_set(0u32..10_000, 1..10), acc in 0.0f64..1.0) {
        let pts: Vec<(f64, f64)> = budgets.iter().map(|&b| (f64::from(b), acc)).collect();
        prop_assert!((auc_over_budgets(&pts).unwrap() - acc).abs() < 1e-12);
    }
}
