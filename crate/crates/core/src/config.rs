//! Experiment configuration.
//!
//! Configs are TOML documents. Only `dataset` and `policy` are required; every
//! other key has a default:
//!
//! ```toml
//! dataset = "isear"            # directory, relative paths resolve against $NEURAL_CACHE_DATA
//! budgets = [1000, 2000, 3000] # post-warmup teacher-call budgets
//! seeds = [0, 1, 2]
//! retrain_frequency = 1000     # f
//! warmup_size = 100            # N
//! cost = 1.0                   # constant cost per teacher call
//! regime = "retrain"           # or "no_retrain"
//! oracle_filter = false        # train only on correct teacher labels
//! label_mode = "soft"          # or "hard"
//! include_warmup_in_online = false
//! # committee_prefill_step = 10   # initial qbc committee sizes N - k*step; default N/10
//!
//! [[policy]]                   # one table or an array of tables
//! kind = "ms"                  # fr | random | ms | pe | qbc | cs
//! # name, mode ("fixed" | "adaptive"), fixed_threshold, committee_size,
//! # coreset_threshold, invert_margin
//!
//! [train]
//! max_epochs = 30
//! patience = 5
//! validation_fraction = 0.1
//! learning_rate = 0.1
//! batch_size = 32
//! l2_penalty = 0.0001
//! ```

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{de, Deserialize, Deserializer, Serialize};

use crate::policy::{PolicyConfig, ThresholdMode};
use crate::student::TrainConfig;
use crate::{Error, Result};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "NEURAL_CACHE_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Retrain,
    NoRetrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Soft,
    Hard,
}

fn default_budgets() -> Vec<f64> {
    vec![1000.0, 2000.0, 3000.0]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_retrain_frequency() -> usize {
    1000
}
fn default_warmup_size() -> usize {
    100
}
fn default_cost() -> f64 {
    1.0
}
fn default_regime() -> Regime {
    Regime::Retrain
}

/// Accepts a single `[policy]` table or a `[[policy]]` array. A visitor
/// rather than an untagged enum keeps the inner error (e.g. an unknown key).
fn one_or_many<'de, D>(d: D) -> Result<Vec<PolicyConfig>, D::Error>
where
    D: Deserializer<'de>,
{
    struct Visitor;

    impl<'de> de::Visitor<'de> for Visitor {
        type Value = Vec<PolicyConfig>;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a policy table or an array of policy tables")
        }

        fn visit_map<A: de::MapAccess<'de>>(self, map: A) -> Result<Self::Value, A::Error> {
            PolicyConfig::deserialize(de::value::MapAccessDeserializer::new(map)).map(|p| vec![p])
        }

        fn visit_seq<A: de::SeqAccess<'de>>(self, seq: A) -> Result<Self::Value, A::Error> {
            Vec::deserialize(de::value::SeqAccessDeserializer::new(seq))
        }
    }

    d.deserialize_any(Visitor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_retrain_frequency")]
    pub retrain_frequency: usize,
    #[serde(default = "default_warmup_size")]
    pub warmup_size: usize,
    #[serde(default = "default_cost")]
    pub cost: f64,
    #[serde(default = "default_regime")]
    pub regime: Regime,
    #[serde(default)]
    pub oracle_filter: bool,
    #[serde(default)]
    pub label_mode: LabelMode,
    #[serde(default)]
    pub include_warmup_in_online: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub committee_prefill_step: Option<usize>,
    #[serde(deserialize_with = "one_or_many")]
    pub policy: Vec<PolicyConfig>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn new(policies: Vec<PolicyConfig>) -> Self {
        Self {
            dataset: None,
            budgets: default_budgets(),
            seeds: default_seeds(),
            retrain_frequency: default_retrain_frequency(),
            warmup_size: default_warmup_size(),
            cost: default_cost(),
            regime: default_regime(),
            oracle_filter: false,
            label_mode: LabelMode::Soft,
            include_warmup_in_online: false,
            committee_prefill_step: None,
            policy: policies,
            train: TrainConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::parse(text, true)
    }

    fn parse(text: &str, with_lines: bool) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| toml_error(text, e, with_lines))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text` then applies `key=value` overrides (dotted keys, values
    /// in TOML syntax; bare words are taken as strings).
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Self::from_toml(text);
        }
        let mut table: toml::Table = toml::from_str(text).map_err(|e| toml_error(text, e, true))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        // Re-render so that type errors carry a source span naming the key.
        let merged = toml::to_string(&table).expect("table serializes");
        Self::parse(&merged, false)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrain_frequency < 1 {
            return Err(Error::config("retrain_frequency", "must be >= 1"));
        }
        if !(self.cost.is_finite() && self.cost > 0.0) {
            return Err(Error::config("cost", "must be > 0"));
        }
        if self.budgets.is_empty() {
            return Err(Error::config("budgets", "must list at least one budget"));
        }
        if self.budgets.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::config("budgets", "budgets must be finite and >= 0"));
        }
        let mut sorted = self.budgets.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("budgets", "duplicate budget"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.committee_prefill_step == Some(0) {
            return Err(Error::config("committee_prefill_step", "must be >= 1"));
        }
        if self.policy.is_empty() {
            return Err(Error::config("policy", "at least one policy is required"));
        }
        let mut labels = HashSet::new();
        for (i, p) in self.policy.iter().enumerate() {
            let key = format!("policy[{i}]");
            p.validate(&key)?;
            if !labels.insert(p.label()) {
                return Err(Error::config(
                    format!("{key}.name"),
                    format!("duplicate policy label `{}`", p.label()),
                ));
            }
            if self.regime == Regime::NoRetrain
                && p.kind.is_score_based()
                && p.mode == Some(ThresholdMode::Fixed)
            {
                return Err(Error::config(
                    format!("{key}.mode"),
                    "the no_retrain regime uses adaptive thresholds",
                ));
            }
        }
        self.train.validate()
    }

    /// Resolves the dataset path, falling back to the data directory
    /// environment variable for relative paths.
    pub fn dataset_path(&self) -> Option<PathBuf> {
        let p = self.dataset.as_ref()?;
        if p.is_absolute() || p.exists() {
            return Some(p.clone());
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(root) => Some(PathBuf::from(root).join(p)),
            None => Some(p.clone()),
        }
    }

    /// One cell of the sweep grid.
    pub fn run_config(&self, policy: &PolicyConfig, budget: f64, seed: u64) -> RunConfig {
        RunConfig {
            budget,
            seed,
            retrain_frequency: self.retrain_frequency,
            warmup_size: self.warmup_size,
            cost: self.cost,
            regime: self.regime,
            oracle_filter: self.oracle_filter,
            label_mode: self.label_mode,
            committee_prefill_step: self.committee_prefill_step,
            policy: policy.clone(),
            train: self.train.clone(),
        }
    }
}

/// Fully resolved settings for a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub budget: f64,
    pub seed: u64,
    pub retrain_frequency: usize,
    pub warmup_size: usize,
    pub cost: f64,
    pub regime: Regime,
    pub oracle_filter: bool,
    pub label_mode: LabelMode,
    pub committee_prefill_step: Option<usize>,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(policy: PolicyConfig, budget: f64, seed: u64) -> Self {
        ExperimentConfig::new(vec![policy.clone()]).run_config(&policy, budget, seed)
    }

    pub fn threshold_mode(&self) -> ThresholdMode {
        self.policy.mode.unwrap_or(match self.regime {
            Regime::Retrain => ThresholdMode::Fixed,
            Regime::NoRetrain => ThresholdMode::Adaptive,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrain_frequency < 1 {
            return Err(Error::config("retrain_frequency", "must be >= 1"));
        }
        if !(self.budget.is_finite() && self.budget >= 0.0) {
            return Err(Error::config("budgets", "must be finite and >= 0"));
        }
        if !(self.cost.is_finite() && self.cost > 0.0) {
            return Err(Error::config("cost", "must be > 0"));
        }
        if self.committee_prefill_step == Some(0) {
            return Err(Error::config("committee_prefill_step", "must be >= 1"));
        }
        self.policy.validate("policy")?;
        self.train.validate()
    }
}

/// Maps a TOML error to the dotted key it concerns: the key on the line the
/// error span points at, else a backticked field name in the message, prefixed
/// by the enclosing table. Line numbers are only meaningful for user text.
fn toml_error(text: &str, e: toml::de::Error, with_line: bool) -> Error {
    let named = e.message().split('`').nth(1).map(str::to_string);
    let key = match e.span() {
        Some(span) => key_at(text, span.start, named.as_deref()),
        None => named,
    }
    .unwrap_or_else(|| "<document>".to_string());
    let mut message = e.message().trim().to_string();
    if let (Some(span), true) = (e.span(), with_line) {
        let line = text
            .get(..span.start)
            .map_or(1, |t| t.matches('\n').count() + 1);
        message.push_str(&format!(" (line {line})"));
    }
    Error::config(key, message)
}

fn key_at(text: &str, offset: usize, named: Option<&str>) -> Option<String> {
    let before = text.get(..offset)?;
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next()?.trim();
    let (key, header) = match line.split_once('=') {
        Some((k, _)) => (k.trim(), None),
        None if line.starts_with('[') => (named?, Some(line)),
        None => (named?, None),
    };
    let section = header
        .or_else(|| {
            before[..line_start]
                .lines()
                .rev()
                .map(str::trim)
                .find(|l| l.starts_with('['))
        })
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    Some(match section {
        Some(s) => format!("{s}.{key}"),
        None => key.to_string(),
    })
}

fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::config(ov, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            // `policy.kind=...` on a single-policy array edits that policy
            toml::Value::Array(a) if a.len() == 1 => match &mut a[0] {
                toml::Value::Table(t) => t,
                _ => return Err(Error::config(key, "cannot descend into non-table")),
            },
            _ => return Err(Error::config(key, "cannot descend into non-table")),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Every config key with a short description, for `--help`.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    (
        "dataset",
        "dataset directory (relative paths resolve against $NEURAL_CACHE_DATA)",
    ),
    (
        "budgets",
        "post-warmup teacher-call budgets [default: 1000, 2000, 3000]",
    ),
    (
        "seeds",
        "run seeds; each fixes stream order and training [default: 0, 1, 2]",
    ),
    (
        "retrain_frequency",
        "retrain the student every f streamed instances [default: 1000]",
    ),
    (
        "warmup_size",
        "teacher-labelled instances used to train the first student [default: 100]",
    ),
    ("cost", "constant cost of one teacher call [default: 1.0]"),
    ("regime", "retrain | no_retrain [default: retrain]"),
    (
        "oracle_filter",
        "retrain only on correct teacher labels [default: false]",
    ),
    ("label_mode", "soft | hard teacher targets [default: soft]"),
    (
        "include_warmup_in_online",
        "score warmup instances in online accuracy [default: false]",
    ),
    (
        "committee_prefill_step",
        "initial qbc committee trained on N - k*step warmup examples [default: N/10]",
    ),
    ("policy.kind", "fr | random | ms | pe | qbc | cs"),
    ("policy.name", "report label [default: the kind]"),
    (
        "policy.mode",
        "fixed | adaptive [default: fixed with retraining, adaptive without]",
    ),
    (
        "policy.fixed_threshold",
        "fixed threshold for ms/pe/qbc [default: 5 / 0.5 / 0.25]",
    ),
    (
        "policy.committee_size",
        "previous students kept for qbc [default: 4]",
    ),
    (
        "policy.coreset_threshold",
        "coreset similarity threshold s [default: 0.9]",
    ),
    (
        "policy.invert_margin",
        "select high-margin instances instead [default: false]",
    ),
    ("train.max_epochs", "maximum training epochs [default: 30]"),
    (
        "train.patience",
        "early-stopping patience in epochs [default: 5]",
    ),
    (
        "train.validation_fraction",
        "held-out validation fraction [default: 0.1]",
    ),
    ("train.learning_rate", "gradient step size [default: 0.1]"),
    ("train.batch_size", "mini-batch size [default: 32]"),
    (
        "train.l2_penalty",
        "L2 penalty on non-bias weights [default: 0.0001]",
    ),
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyKind;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg =
            ExperimentConfig::from_toml("dataset = \"isear\"\n[policy]\nkind = \"ms\"\n").unwrap();
        assert_eq!(cfg.retrain_frequency, 1000);
        assert_eq!(cfg.cost, 1.0);
        assert_eq!(cfg.label_mode, LabelMode::Soft);
        assert_eq!(cfg.seeds.len(), 3);
        assert_eq!(cfg.policy, vec![PolicyConfig::new(PolicyKind::Margin)]);
        let rc = cfg.run_config(&cfg.policy[0], 1000.0, 0);
        assert_eq!(rc.threshold_mode(), ThresholdMode::Fixed);
    }

    #[test]
    fn zero_frequency_is_rejected_by_key() {
        let err = ExperimentConfig::from_toml("retrain_frequency = 0\n[policy]\nkind = \"fr\"\n")
            .unwrap_err();
        assert!(err.to_string().contains("retrain_frequency"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err =
            ExperimentConfig::from_toml("budgetz = [1]\n[policy]\nkind = \"fr\"\n").unwrap_err();
        assert!(err.to_string().contains("budgetz"), "{err}");
        let err = ExperimentConfig::from_toml("[policy]\nkind = \"fr\"\nfoo = 1\n").unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
    }

    #[test]
    fn overrides_are_type_checked() {
        let base = "[[policy]]\nkind = \"ms\"\n";
        let cfg = ExperimentConfig::from_toml_with_overrides(
            base,
            &[
                "retrain_frequency=50".into(),
                "policy.mode=adaptive".into(),
                "train.max_epochs=3".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.retrain_frequency, 50);
        assert_eq!(cfg.policy[0].mode, Some(ThresholdMode::Adaptive));
        assert_eq!(cfg.train.max_epochs, 3);
        let err =
            ExperimentConfig::from_toml_with_overrides(base, &["retrain_frequency=often".into()])
                .unwrap_err();
        assert!(err.to_string().contains("retrain_frequency"), "{err}");
    }

    #[test]
    fn no_retrain_rejects_fixed_thresholds() {
        let err = ExperimentConfig::from_toml(
            "regime = \"no_retrain\"\n[policy]\nkind = \"ms\"\nmode = \"fixed\"\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("policy[0].mode"), "{err}");
    }

    #[test]
    fn duplicate_policy_labels_rejected() {
        let err = ExperimentConfig::from_toml(
            "[[policy]]\nkind = \"ms\"\n[[policy]]\nkind = \"ms\"\nmode = \"adaptive\"\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate policy label"), "{err}");
    }

    #[test]
    fn serialized_config_parses_back() {
        let mut cfg = ExperimentConfig::new(vec![
            PolicyConfig::new(PolicyKind::Margin),
            PolicyConfig::new(PolicyKind::Coreset)
                .with_name("cs_adaptive")
                .with_mode(ThresholdMode::Adaptive),
        ]);
        cfg.dataset = Some("data/x".into());
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn key_table_covers_every_serialized_key() {
        let mut cfg = ExperimentConfig::new(vec![PolicyConfig {
            name: Some("n".into()),
            mode: Some(ThresholdMode::Fixed),
            fixed_threshold: Some(1.0),
            ..PolicyConfig::new(PolicyKind::Margin)
        }]);
        cfg.dataset = Some("d".into());
        cfg.committee_prefill_step = Some(100);
        let value = toml::Value::try_from(&cfg).unwrap();
        let documented: HashSet<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
        for (k, v) in value.as_table().unwrap() {
            let nested = match v {
                toml::Value::Table(t) => Some(t.clone()),
                toml::Value::Array(a) => a.first().and_then(|x| x.as_table().cloned()),
                _ => None,
            };
            match nested {
                Some(t) => {
                    for sub in t.keys() {
                        let full = format!("{k}.{sub}");
                        assert!(
                            documented.contains(full.as_str()),
                            "undocumented key {full}"
                        );
                    }
                }
                None => assert!(documented.contains(k.as_str()), "undocumented key {k}"),
            }
        }
    }
}
