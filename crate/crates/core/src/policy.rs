//! Selection criteria and the per-instance teacher-call decision.
//!
//! Every score-based criterion produces a [`CriterionScore`] whose orientation
//! says whether larger values mean "more uncertain". Thresholds and
//! percentiles are all computed on the uncertainty scale, so "selected" always
//! means "at least as uncertain as the threshold".
//!
//! Two thresholding regimes exist:
//!
//! - fixed: a constant per-criterion threshold, tuned to spend early;
//! - adaptive: the threshold is the percentile of the score history given by
//!   the remaining budget over the remaining instances, so the spend tracks
//!   the budget.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, Instance};
use crate::numeric::{argmax, dot, log_sum_exp, norm};
use crate::simulator::BudgetLedger;
use crate::student::Classifier;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Spend the whole budget on the first instances.
    #[serde(rename = "fr", alias = "front_loading")]
    FrontLoading,
    /// Bernoulli selection at the remaining budget rate.
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "ms", alias = "margin")]
    Margin,
    #[serde(rename = "pe", alias = "entropy")]
    Entropy,
    #[serde(rename = "qbc", alias = "committee")]
    Committee,
    #[serde(rename = "cs", alias = "coreset")]
    Coreset,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::FrontLoading,
        PolicyKind::Random,
        PolicyKind::Margin,
        PolicyKind::Entropy,
        PolicyKind::Committee,
        PolicyKind::Coreset,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            PolicyKind::FrontLoading => "fr",
            PolicyKind::Random => "random",
            PolicyKind::Margin => "ms",
            PolicyKind::Entropy => "pe",
            PolicyKind::Committee => "qbc",
            PolicyKind::Coreset => "cs",
        }
    }

    pub fn is_score_based(self) -> bool {
        !matches!(self, PolicyKind::FrontLoading | PolicyKind::Random)
    }

    /// Fixed thresholds used with student retraining. Margin, entropy and
    /// coreset use the published values (MS=5, PE=0.5, CS=0.9). The published
    /// committee value "QBC=4" is not a disagreement fraction; 0.25 (at least
    /// one of four members disagrees) is used instead.
    pub fn default_fixed_threshold(self) -> Option<f64> {
        match self {
            PolicyKind::Margin => Some(5.0),
            PolicyKind::Entropy => Some(0.5),
            PolicyKind::Committee => Some(0.25),
            PolicyKind::Coreset => Some(0.9),
            _ => None,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Fixed,
    Adaptive,
}

fn default_committee_size() -> usize {
    4
}
fn default_coreset_threshold() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Label used in reports and trace file names; defaults to the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Unset: fixed with retraining, adaptive without.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ThresholdMode>,
    /// Fixed threshold for ms/pe/qbc in the criterion's own units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_threshold: Option<f64>,
    /// Number of previous students kept for query by committee.
    #[serde(default = "default_committee_size")]
    pub committee_size: usize,
    /// Coreset similarity threshold s: call the teacher iff max similarity < s.
    #[serde(default = "default_coreset_threshold")]
    pub coreset_threshold: f64,
    /// Select high-margin instances instead of low-margin ones.
    #[serde(default)]
    pub invert_margin: bool,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            name: None,
            mode: None,
            fixed_threshold: None,
            committee_size: default_committee_size(),
            coreset_threshold: default_coreset_threshold(),
            invert_margin: false,
        }
    }

    pub fn with_mode(mut self, mode: ThresholdMode) -> Self {
        self.mode = Some(mode);
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.kind.short_name().to_string())
    }

    /// Threshold in native units for fixed mode.
    pub fn fixed_threshold_value(&self) -> Option<f64> {
        match self.kind {
            PolicyKind::Coreset => Some(self.coreset_threshold),
            k => self.fixed_threshold.or_else(|| k.default_fixed_threshold()),
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        if self.committee_size < 1 {
            return Err(Error::config(
                format!("{key}.committee_size"),
                "must be >= 1",
            ));
        }
        if !(-1.0..=1.0).contains(&self.coreset_threshold) {
            return Err(Error::config(
                format!("{key}.coreset_threshold"),
                "must lie in [-1, 1]",
            ));
        }
        if let Some(t) = self.fixed_threshold {
            if !t.is_finite() {
                return Err(Error::config(
                    format!("{key}.fixed_threshold"),
                    "must be finite",
                ));
            }
        }
        let label = self.label();
        if label.is_empty()
            || !label
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        {
            return Err(Error::config(
                format!("{key}.name"),
                "must be non-empty and use only [A-Za-z0-9_.]",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsUncertain,
    LowerIsUncertain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionScore {
    pub value: f64,
    pub orientation: Orientation,
}

impl CriterionScore {
    pub fn new(value: f64, orientation: Orientation) -> Self {
        Self { value, orientation }
    }

    /// Score on the common scale where larger means more uncertain.
    pub fn uncertainty(&self) -> f64 {
        match self.orientation {
            Orientation::HigherIsUncertain => self.value,
            Orientation::LowerIsUncertain => -self.value,
        }
    }

    /// Converts an uncertainty-scale value back to this score's native units.
    pub fn native(orientation: Orientation, uncertainty: f64) -> f64 {
        match orientation {
            Orientation::HigherIsUncertain => uncertainty,
            Orientation::LowerIsUncertain => -uncertainty,
        }
    }
}

/// Difference between the two largest log-probabilities.
pub fn margin(logprobs: &[f64]) -> Result<f64> {
    if logprobs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "margin needs at least 2 classes, got {}",
            logprobs.len()
        )));
    }
    if logprobs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite log-probability".into()));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in logprobs {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    Ok(first - second)
}

/// Shannon entropy (nats) of the softmax of `logprobs`.
pub fn entropy(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() || logprobs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "entropy needs finite log-probabilities".into(),
        ));
    }
    let lse = log_sum_exp(logprobs);
    let h = -logprobs
        .iter()
        .map(|v| {
            let lp = v - lse;
            lp.exp() * lp
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Fraction of committee labels that differ from the current student's label.
pub fn qbc_disagreement(current: ClassLabel, committee: &[ClassLabel]) -> f64 {
    if committee.is_empty() {
        return 0.0;
    }
    committee.iter().filter(|l| **l != current).count() as f64 / committee.len() as f64
}

/// Unit-normalized embeddings of teacher-annotated instances.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoresetStore {
    unit_vectors: Vec<Vec<f64>>,
}

impl CoresetStore {
    pub fn len(&self) -> usize {
        self.unit_vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_vectors.is_empty()
    }

    pub fn insert(&mut self, embedding: &[f64]) -> Result<()> {
        let n = norm(embedding);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidArgument("embedding has zero norm".into()));
        }
        self.unit_vectors
            .push(embedding.iter().map(|v| v / n).collect());
        Ok(())
    }
}

/// Largest cosine similarity between `embedding` and the store, or
/// `-inf` for an empty store.
pub fn coreset_max_similarity(embedding: &[f64], store: &CoresetStore) -> Result<f64> {
    let n = norm(embedding);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::InvalidArgument("embedding has zero norm".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for v in &store.unit_vectors {
        if v.len() != embedding.len() {
            return Err(Error::Dimension {
                expected: v.len(),
                actual: embedding.len(),
            });
        }
        best = best.max(dot(v, embedding) / n);
    }
    Ok(best.min(1.0))
}

/// Uncertainty-scale threshold selecting the most uncertain fraction
/// `q = min(1, remaining_budget / remaining_instances)` of the history.
///
/// Uses nearest rank: with `m` scores sorted from most to least uncertain the
/// threshold is the `ceil(q * m)`-th one. Returns `-inf` (select everything)
/// for an empty history or `q >= 1`, and `+inf` (select nothing) for `q = 0`.
pub fn adaptive_threshold(
    history: &[CriterionScore],
    remaining_budget: f64,
    remaining_instances: usize,
) -> f64 {
    if history.is_empty() || remaining_instances == 0 {
        return f64::NEG_INFINITY;
    }
    let q = (remaining_budget / remaining_instances as f64).clamp(0.0, 1.0);
    if q >= 1.0 {
        return f64::NEG_INFINITY;
    }
    let m = history.len();
    let rank = (q * m as f64).ceil() as usize;
    if rank == 0 {
        return f64::INFINITY;
    }
    let mut u: Vec<f64> = history.iter().map(CriterionScore::uncertainty).collect();
    let (_, nth, _) = u.select_nth_unstable_by(rank - 1, |a, b| b.total_cmp(a));
    *nth
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub call_teacher: bool,
    pub score: Option<CriterionScore>,
    /// Threshold in the criterion's native units.
    pub threshold_used: Option<f64>,
}

/// Mutable per-run policy memory.
#[derive(Debug, Clone)]
pub struct PolicyState<M> {
    pub config: PolicyConfig,
    pub mode: ThresholdMode,
    history: Vec<CriterionScore>,
    committee: VecDeque<M>,
    coreset: CoresetStore,
    rng: ChaCha8Rng,
    pub rng_seed: u64,
    /// Committee decisions made with no committee at all.
    pub empty_committee_decisions: usize,
}

impl<M: Classifier> PolicyState<M> {
    pub fn new(config: PolicyConfig, mode: ThresholdMode, rng_seed: u64) -> Self {
        Self {
            config,
            mode,
            history: Vec::new(),
            committee: VecDeque::new(),
            coreset: CoresetStore::default(),
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            rng_seed,
            empty_committee_decisions: 0,
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.config.kind
    }

    pub fn history(&self) -> &[CriterionScore] {
        &self.history
    }

    pub fn committee(&self) -> impl Iterator<Item = &M> {
        self.committee.iter()
    }

    pub fn committee_len(&self) -> usize {
        self.committee.len()
    }

    pub fn coreset(&self) -> &CoresetStore {
        &self.coreset
    }

    /// Adds a previous student to the committee, evicting the oldest beyond
    /// the configured size.
    pub fn snapshot_committee(&mut self, model: M) {
        self.committee.push_back(model);
        while self.committee.len() > self.config.committee_size {
            self.committee.pop_front();
        }
    }

    /// Records that `instance` was annotated by the teacher.
    pub fn record_annotation(&mut self, instance: &Instance) -> Result<()> {
        self.coreset.insert(&instance.embedding)
    }

    fn orientation(&self) -> Orientation {
        match self.config.kind {
            PolicyKind::Margin if self.config.invert_margin => Orientation::HigherIsUncertain,
            PolicyKind::Margin | PolicyKind::Coreset => Orientation::LowerIsUncertain,
            _ => Orientation::HigherIsUncertain,
        }
    }

    /// Criterion score for score-based kinds; `None` for front-loading and
    /// random, and for a committee vote without any committee.
    fn score(
        &self,
        instance: &Instance,
        student_logprobs: &[f64],
    ) -> Result<Option<CriterionScore>> {
        let value = match self.config.kind {
            PolicyKind::FrontLoading | PolicyKind::Random => return Ok(None),
            PolicyKind::Margin => margin(student_logprobs)?,
            PolicyKind::Entropy => entropy(student_logprobs)?,
            PolicyKind::Committee => {
                if self.committee.is_empty() {
                    return Ok(None);
                }
                let current = ClassLabel(argmax(student_logprobs));
                let votes = self
                    .committee
                    .iter()
                    .map(|m| m.predict_label(&instance.features))
                    .collect::<Result<Vec<_>>>()?;
                qbc_disagreement(current, &votes)
            }
            PolicyKind::Coreset => coreset_max_similarity(&instance.embedding, &self.coreset)?,
        };
        Ok(Some(CriterionScore::new(value, self.orientation())))
    }

    /// Decides whether `instance` goes to the teacher. The ledger is only
    /// read; charging is the caller's job.
    pub fn decide(
        &mut self,
        instance: &Instance,
        student_logprobs: &[f64],
        ledger: &BudgetLedger,
        remaining_instances: usize,
    ) -> Result<Decision> {
        let cost = ledger.cost_of(instance);
        let affordable = ledger.can_afford(cost);
        let calls_left = ledger.remaining() / cost;

        let mut decision = match self.config.kind {
            PolicyKind::FrontLoading => Decision {
                call_teacher: true,
                score: None,
                threshold_used: None,
            },
            PolicyKind::Random => {
                let rate = (calls_left / remaining_instances.max(1) as f64).clamp(0.0, 1.0);
                let draw: f64 = self.rng.random();
                Decision {
                    call_teacher: draw < rate,
                    score: None,
                    threshold_used: Some(rate),
                }
            }
            _ => match self.score(instance, student_logprobs)? {
                None => {
                    self.empty_committee_decisions += 1;
                    Decision {
                        call_teacher: false,
                        score: Some(CriterionScore::new(0.0, Orientation::HigherIsUncertain)),
                        threshold_used: None,
                    }
                }
                Some(score) => self.threshold_decision(score, calls_left, remaining_instances),
            },
        };
        decision.call_teacher &= affordable;
        Ok(decision)
    }

    fn threshold_decision(
        &mut self,
        score: CriterionScore,
        calls_left: f64,
        remaining_instances: usize,
    ) -> Decision {
        let u = score.uncertainty();
        let (call, threshold_u) = match self.mode {
            ThresholdMode::Fixed => {
                let native = self
                    .config
                    .fixed_threshold_value()
                    .expect("score-based kinds have a fixed threshold");
                let t = CriterionScore::new(native, score.orientation).uncertainty();
                // Coreset calls strictly below the similarity threshold.
                let call = if self.config.kind == PolicyKind::Coreset {
                    u > t
                } else {
                    u >= t
                };
                (call, t)
            }
            ThresholdMode::Adaptive => {
                let t = adaptive_threshold(&self.history, calls_left, remaining_instances);
                (u >= t, t)
            }
        };
        self.history.push(score);
        Decision {
            call_teacher: call,
            score: Some(score),
            threshold_used: Some(CriterionScore::native(score.orientation, threshold_u)),
        }
    }
}
