use neural_cache::config::{ExperimentConfig, LabelMode, Regime, CONFIG_KEYS};
use neural_cache::{PolicyKind, ThresholdMode};

#[test]
fn dataset_and_policy_alone_give_defaults() {
    let cfg =
        ExperimentConfig::from_toml("dataset = \"isear\"\n\n[policy]\nkind = \"qbc\"\n").unwrap();
    assert_eq!(cfg.retrain_frequency, 1000);
    assert_eq!(cfg.cost, 1.0);
    assert_eq!(cfg.label_mode, LabelMode::Soft);
    assert_eq!(cfg.seeds.len(), 3);
    assert_eq!(cfg.regime, Regime::Retrain);
    assert_eq!(cfg.policy[0].kind, PolicyKind::Committee);
    assert_eq!(cfg.policy[0].committee_size, 4);
}

#[test]
fn policy_arrays_and_aliases() {
    let text = "regime = \"no_retrain\"\n[[policy]]\nkind = \"margin\"\n[[policy]]\nkind = \"pe\"\nname = \"entropy_b\"\n";
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    assert_eq!(cfg.policy.len(), 2);
    assert_eq!(cfg.policy[1].label(), "entropy_b");
    let rc = cfg.run_config(&cfg.policy[0], 10.0, 1);
    assert_eq!(rc.threshold_mode(), ThresholdMode::Adaptive);
}

#[test]
fn toml_round_trip() {
    let text = "budgets = [5, 10]\noracle_filter = true\n[[policy]]\nkind = \"cs\"\ncoreset_threshold = 0.8\n[train]\nmax_epochs = 4\n";
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn invalid_values_name_their_key() {
    let cases = [
        ("cost = 0\n[policy]\nkind = \"fr\"\n", "cost"),
        ("budgets = [1, 1]\n[policy]\nkind = \"fr\"\n", "budgets"),
        ("seeds = []\n[policy]\nkind = \"fr\"\n", "seeds"),
        (
            "regime = \"sometimes\"\n[policy]\nkind = \"fr\"\n",
            "regime",
        ),
        (
            "regime = \"no_retrain\"\n[policy]\nkind = \"ms\"\nmode = \"fixed\"\n",
            "policy[0].mode",
        ),
        (
            "[policy]\nkind = \"ms\"\n[train]\nlearning_rate = -1\n",
            "train.learning_rate",
        ),
        (
            "[[policy]]\nkind = \"ms\"\n[[policy]]\nkind = \"ms\"\n",
            "policy[1].name",
        ),
        ("[policy]\nkind = \"xx\"\n", "policy.kind"),
    ];
    for (text, key) in cases {
        let err = ExperimentConfig::from_toml(text).unwrap_err().to_string();
        assert!(
            err.contains(&format!("`{key}`")),
            "expected `{key}` in: {err}"
        );
    }
}

#[test]
fn overrides_apply_dotted_keys() {
    let base = "budgets = [100]\n[[policy]]\nkind = \"ms\"\n";
    let cfg = ExperimentConfig::from_toml_with_overrides(
        base,
        &[
            "label_mode=hard".into(),
            "policy.fixed_threshold=2.5".into(),
            "train.batch_size=8".into(),
        ],
    )
    .unwrap();
    assert_eq!(cfg.label_mode, LabelMode::Hard);
    assert_eq!(cfg.policy[0].fixed_threshold, Some(2.5));
    assert_eq!(cfg.train.batch_size, 8);
    let err =
        ExperimentConfig::from_toml_with_overrides(base, &["warmup_size=-3".into()]).unwrap_err();
    assert!(err.to_string().contains("warmup_size"), "{err}");
    assert!(ExperimentConfig::from_toml_with_overrides(base, &["no_equals_sign".into()]).is_err());
}

#[test]
fn key_table_covers_the_schema() {
    let cfg = ExperimentConfig::from_toml("dataset = \"x\"\ncommittee_prefill_step = 3\n[policy]\nkind = \"ms\"\nname = \"m\"\nmode = \"fixed\"\nfixed_threshold = 1.0\n").unwrap();
    let rendered = cfg.to_toml();
    let table: toml::Table = toml::from_str(&rendered).unwrap();
    let mut keys = Vec::new();
    for (k, v) in &table {
        match v {
            toml::Value::Table(t) => keys.extend(t.keys().map(|s| format!("{k}.{s}"))),
            toml::Value::Array(a) if k == "policy" => {
                keys.extend(a[0].as_table().unwrap().keys().map(|s| format!("{k}.{s}")))
            }
            _ => keys.push(k.clone()),
        }
    }
    for key in keys {
        assert!(
            CONFIG_KEYS.iter().any(|(k, _)| *k == key),
            "undocumented key {key}"
        );
    }
}
