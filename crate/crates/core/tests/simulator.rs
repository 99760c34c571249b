use neural_cache::config::{ExperimentConfig, LabelMode, Regime, RunConfig};
use neural_cache::metrics::online_accuracy;
use neural_cache::simulator::{run, run_sweep, BudgetLedger};
use neural_cache::synth::{generate, SynthSpec};
use neural_cache::{Dataset, PolicyConfig, PolicyKind, SoftmaxLearner, ThresholdMode};
use proptest::prelude::*;

fn dataset(online: usize, seed: u64) -> Dataset {
    generate(&SynthSpec {
        online,
        test: 200,
        teacher_accuracy: 0.85,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn rc(kind: PolicyKind, budget: f64, seed: u64) -> RunConfig {
    let mut rc = RunConfig::new(PolicyConfig::new(kind), budget, seed);
    rc.warmup_size = 40;
    rc.retrain_frequency = 80;
    rc
}

#[test]
fn warmup_is_free_and_unscored_by_default() {
    let ds = dataset(300, 1);
    let rec = run(
        &ds,
        &rc(PolicyKind::FrontLoading, 10.0, 0),
        &SoftmaxLearner::default(),
    )
    .unwrap();
    assert_eq!(rec.warmup.len(), 40);
    assert_eq!(rec.trace.len(), 260);
    assert_eq!(rec.ledger.total_spent(), 10.0);
    // Front-loading spends on the first post-warmup instances.
    assert!(rec.trace[..10].iter().all(|t| t.teacher_called));
    assert!(rec.trace[10..].iter().all(|t| !t.teacher_called));
    let with = online_accuracy(&rec, true).unwrap();
    let warm = rec.warmup.iter().filter(|t| t.correct).count();
    let post = rec.trace.iter().filter(|t| t.correct).count();
    assert_eq!(with, (warm + post) as f64 / 300.0);
}

#[test]
fn retrains_see_the_whole_pool() {
    let ds = dataset(400, 2);
    let rec = run(
        &ds,
        &rc(PolicyKind::Random, 120.0, 4),
        &SoftmaxLearner::default(),
    )
    .unwrap();
    let positions: Vec<usize> = rec.retrains.iter().map(|r| r.position).collect();
    assert_eq!(positions, vec![40, 120, 200, 280, 360]);
    for r in &rec.retrains {
        let bought = rec
            .trace
            .iter()
            .filter(|t| t.position < r.position && t.trained_on)
            .count();
        assert_eq!(r.training_size, 40 + bought);
    }
}

#[test]
fn hard_labels_change_the_student() {
    let ds = dataset(300, 3);
    let learner = SoftmaxLearner::default();
    let soft = run(&ds, &rc(PolicyKind::FrontLoading, 50.0, 0), &learner).unwrap();
    let mut hard_cfg = rc(PolicyKind::FrontLoading, 50.0, 0);
    hard_cfg.label_mode = LabelMode::Hard;
    let hard = run(&ds, &hard_cfg, &learner).unwrap();
    assert_ne!(soft.final_model, hard.final_model);
}

#[test]
fn committee_starts_prefilled() {
    let ds = dataset(300, 4);
    let rec = run(
        &ds,
        &rc(PolicyKind::Committee, 30.0, 0),
        &SoftmaxLearner::default(),
    )
    .unwrap();
    assert_eq!(rec.committee_size, 4);
    assert_eq!(rec.empty_committee_decisions, 0);
    assert!(rec.trace.iter().all(|t| t.score.is_some()));
}

#[test]
fn tiny_warmup_leaves_the_committee_empty() {
    let ds = dataset(200, 5);
    let mut cfg = rc(PolicyKind::Committee, 30.0, 0);
    cfg.warmup_size = 1;
    cfg.regime = Regime::NoRetrain;
    let rec = run(&ds, &cfg, &SoftmaxLearner::default()).unwrap();
    assert_eq!(rec.teacher_calls(), 0);
    assert_eq!(rec.empty_committee_decisions, 199);
}

#[test]
fn invalid_run_configs_are_rejected() {
    let ds = dataset(100, 6);
    let learner = SoftmaxLearner::default();
    let mut cfg = rc(PolicyKind::Margin, 10.0, 0);
    cfg.retrain_frequency = 0;
    assert!(run(&ds, &cfg, &learner)
        .unwrap_err()
        .to_string()
        .contains("retrain_frequency"));
    let mut cfg = rc(PolicyKind::Margin, 10.0, 0);
    cfg.warmup_size = 101;
    assert!(run(&ds, &cfg, &learner)
        .unwrap_err()
        .to_string()
        .contains("warmup_size"));
    let mut cfg = rc(PolicyKind::Margin, -1.0, 0);
    cfg.regime = Regime::NoRetrain;
    assert!(run(&ds, &cfg, &learner).is_err());
}

#[test]
fn sweep_cells_come_out_in_key_order() {
    let ds = dataset(200, 7);
    let mut cfg = ExperimentConfig::new(vec![
        PolicyConfig::new(PolicyKind::Entropy),
        PolicyConfig::new(PolicyKind::FrontLoading),
    ]);
    cfg.budgets = vec![40.0, 10.0];
    cfg.seeds = vec![2, 1];
    cfg.warmup_size = 20;
    cfg.retrain_frequency = 50;
    let cells = run_sweep(&ds, &cfg, &SoftmaxLearner::default()).unwrap();
    let keys: Vec<(String, f64, u64)> = cells
        .iter()
        .map(|c| (c.policy.clone(), c.budget, c.seed))
        .collect();
    assert_eq!(
        keys,
        vec![
            ("pe".into(), 10.0, 2),
            ("pe".into(), 10.0, 1),
            ("pe".into(), 40.0, 2),
            ("pe".into(), 40.0, 1),
            ("fr".into(), 10.0, 2),
            ("fr".into(), 10.0, 1),
            ("fr".into(), 40.0, 2),
            ("fr".into(), 40.0, 1),
        ]
    );
    assert_eq!(cells[0].record.cell_key(), "pe-10-2");
}

#[test]
fn ledger_arithmetic() {
    let mut ledger = BudgetLedger::new(3.0);
    assert!(ledger.charge(0, 1.0));
    assert!(ledger.charge(5, 2.0));
    assert!(!ledger.charge(6, 0.5));
    assert_eq!(ledger.spent(), 3.0);
    assert_eq!(ledger.spend_log().len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runs_respect_budget_and_provenance(
        kind_idx in 0usize..6,
        budget in 0.0f64..150.0,
        cost in prop::sample::select(vec![0.5, 1.0, 2.0]),
        seed in 0u64..100,
        no_retrain in any::<bool>(),
        adaptive in any::<bool>(),
    ) {
        let ds = dataset(160, 8);
        let kind = PolicyKind::ALL[kind_idx];
        let mode = if adaptive || no_retrain { ThresholdMode::Adaptive } else { ThresholdMode::Fixed };
        let mut cfg = RunConfig::new(PolicyConfig::new(kind).with_mode(mode), budget, seed);
        cfg.warmup_size = 20;
        cfg.retrain_frequency = 40;
        cfg.cost = cost;
        cfg.regime = if no_retrain { Regime::NoRetrain } else { Regime::Retrain };
        let rec = run(&ds, &cfg, &SoftmaxLearner::default()).unwrap();
        prop_assert!(rec.ledger.total_spent() <= budget);
        prop_assert!(rec.ledger.remaining >= 0.0);
        let called: Vec<usize> = rec.trace.iter().filter(|t| t.teacher_called).map(|t| t.position).collect();
        let charged: Vec<usize> = rec.ledger.spend_log.iter().map(|s| s.position).collect();
        prop_assert_eq!(called, charged);
        for t in &rec.trace {
            prop_assert_eq!(t.correct, t.emitted == t.gold);
            if !t.teacher_called {
                prop_assert_eq!(Some(t.emitted), t.student_label);
            }
        }
        prop_assert_eq!(rec.llm_data_size, 20 + rec.trace.iter().filter(|t| t.trained_on).count());
        if no_retrain {
            prop_assert_eq!(&rec.final_model, &rec.initial_model);
        }
    }
}
