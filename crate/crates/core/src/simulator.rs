//! Replay of the neural caching loop over a recorded dataset.
//!
//! A run streams the online instances in a seeded order:
//!
//! 1. warmup: the first `N` instances are labelled by the teacher for free and
//!    the initial student is trained on them;
//! 2. for each later instance, at post-warmup positions `0, f, 2f, ...` the
//!    student is reset and retrained on every teacher label collected so far
//!    (retrain regime only);
//! 3. the student predicts, the policy decides, and if the teacher is called
//!    and the budget covers the cost, the teacher's label is emitted, charged
//!    and added to the training pool; otherwise the student's label is emitted.
//!
//! The budget covers only post-warmup calls and online accuracy is scored on
//! the post-warmup window unless asked otherwise.
//!
//! Seed derivation from the run seed `s`:
//!
//! - stream order: `s` itself;
//! - policy RNG: `mix_seed(s, 1, 0)`;
//! - training: `mix_seed(s, 2, |training set|)`, so retraining on an unchanged
//!   pool reproduces the same student.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, LabelMode, Regime, RunConfig};
use crate::dataset::{make_stream, ClassLabel, Dataset, Instance, StreamOrder};
use crate::metrics::RunMetrics;
use crate::numeric::{argmax, mix_seed};
use crate::policy::{PolicyKind, PolicyState, ThresholdMode};
use crate::student::{Classifier, Learner, TrainingExample};
use crate::{Error, Result};

const POLICY_SEED_TAG: u64 = 1;
const TRAIN_SEED_TAG: u64 = 2;

pub fn policy_seed(run_seed: u64) -> u64 {
    mix_seed(run_seed, POLICY_SEED_TAG, 0)
}

pub fn train_seed(run_seed: u64, training_size: usize) -> u64 {
    mix_seed(run_seed, TRAIN_SEED_TAG, training_size as u64)
}

/// Price of one teacher call for a given instance.
pub trait CostFunction: Send + Sync + fmt::Debug {
    fn cost(&self, instance: &Instance) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantCost(pub f64);

impl CostFunction for ConstantCost {
    fn cost(&self, _instance: &Instance) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spend {
    pub position: usize,
    pub cost: f64,
}

/// Remaining teacher budget. `remaining` never drops below zero.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    initial: f64,
    remaining: f64,
    cost_fn: Arc<dyn CostFunction>,
    spend_log: Vec<Spend>,
}

impl BudgetLedger {
    /// Ledger with the constant unit cost.
    pub fn new(budget: f64) -> Self {
        Self::with_cost(budget, Arc::new(ConstantCost(1.0)))
    }

    pub fn with_cost(budget: f64, cost_fn: Arc<dyn CostFunction>) -> Self {
        Self {
            initial: budget,
            remaining: budget,
            cost_fn,
            spend_log: Vec::new(),
        }
    }

    pub fn initial(&self) -> f64 {
        self.initial
    }

    pub fn remaining(&self) -> f64 {
        self.remaining
    }

    pub fn spent(&self) -> f64 {
        self.initial - self.remaining
    }

    pub fn spend_log(&self) -> &[Spend] {
        &self.spend_log
    }

    pub fn cost_of(&self, instance: &Instance) -> f64 {
        self.cost_fn.cost(instance)
    }

    pub fn can_afford(&self, cost: f64) -> bool {
        self.remaining >= cost
    }

    /// Charges `cost` if affordable; returns whether it was charged.
    pub fn charge(&mut self, position: usize, cost: f64) -> bool {
        if !self.can_afford(cost) {
            return false;
        }
        self.remaining -= cost;
        self.spend_log.push(Spend { position, cost });
        true
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            initial: self.initial,
            remaining: self.remaining,
            spend_log: self.spend_log.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub initial: f64,
    pub remaining: f64,
    pub spend_log: Vec<Spend>,
}

impl LedgerSummary {
    pub fn total_spent(&self) -> f64 {
        self.spend_log.iter().map(|s| s.cost).sum()
    }
}

/// One processed stream instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Position in the full stream, warmup included.
    pub position: usize,
    pub id: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub warmup: bool,
    pub gold: ClassLabel,
    /// Absent during warmup, where no student exists yet.
    pub student_label: Option<ClassLabel>,
    pub teacher_called: bool,
    pub emitted: ClassLabel,
    pub correct: bool,
    /// Whether the teacher label joined the training pool.
    pub trained_on: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainEvent {
    pub position: usize,
    pub training_size: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord<M> {
    pub policy: String,
    pub kind: PolicyKind,
    pub mode: ThresholdMode,
    pub regime: Regime,
    pub budget: f64,
    pub seed: u64,
    pub config: RunConfig,
    pub warmup: Vec<TraceEntry>,
    pub trace: Vec<TraceEntry>,
    pub retrains: Vec<RetrainEvent>,
    pub ledger: LedgerSummary,
    /// Final size of the teacher-label training pool.
    pub llm_data_size: usize,
    /// Teacher calls whose wrong label the oracle filter kept out of training.
    pub oracle_dropped: usize,
    pub committee_size: usize,
    pub empty_committee_decisions: usize,
    pub initial_model: M,
    pub final_model: M,
}

impl<M> RunRecord<M> {
    pub fn teacher_calls(&self) -> usize {
        self.trace.iter().filter(|t| t.teacher_called).count()
    }

    /// The trace as JSONL, warmup entries first.
    pub fn trace_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for entry in self.warmup.iter().chain(&self.trace) {
            serde_json::to_writer(&mut out, entry)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    /// File stem `<policy>-<budget>-<seed>` used for trace exports.
    pub fn cell_key(&self) -> String {
        cell_key(&self.policy, self.budget, self.seed)
    }
}

pub fn cell_key(policy: &str, budget: f64, seed: u64) -> String {
    format!("{policy}-{budget}-{seed}")
}

/// Output of the warmup phase.
#[derive(Debug, Clone)]
pub struct Warmup<M> {
    pub student: M,
    pub llm_data: Vec<TrainingExample>,
    pub trace: Vec<TraceEntry>,
    /// Stream position where budgeted streaming starts.
    pub cursor: usize,
}

fn training_example(instance: &Instance, mode: LabelMode) -> TrainingExample {
    match mode {
        LabelMode::Soft => TrainingExample::soft(instance),
        LabelMode::Hard => TrainingExample::hard(instance),
    }
}

/// Trains from scratch, or returns the untrained model when fewer than two
/// examples are available.
fn fit<L: Learner>(
    learner: &L,
    data: &[TrainingExample],
    dataset: &Dataset,
    run_seed: u64,
) -> Result<L::Model> {
    if data.len() < 2 {
        return Ok(learner.untrained(dataset.num_classes(), dataset.feature_dim()));
    }
    learner.train(
        data,
        dataset.num_classes(),
        dataset.feature_dim(),
        train_seed(run_seed, data.len()),
    )
}

/// Labels the first `n` stream instances with the teacher and trains the
/// initial student on them. Warmup labels are not charged to the budget.
pub fn run_warmup<L: Learner>(
    dataset: &Dataset,
    stream: &StreamOrder,
    n: usize,
    label_mode: LabelMode,
    learner: &L,
) -> Result<Warmup<L::Model>> {
    if n > stream.len() {
        return Err(Error::config(
            "warmup_size",
            format!("{n} exceeds the stream length {}", stream.len()),
        ));
    }
    let mut llm_data = Vec::with_capacity(n);
    let mut trace = Vec::with_capacity(n);
    for (position, &idx) in stream.order[..n].iter().enumerate() {
        let inst = &dataset.online[idx];
        let label = inst.teacher_label();
        llm_data.push(training_example(inst, label_mode));
        trace.push(TraceEntry {
            position,
            id: inst.id.clone(),
            warmup: true,
            gold: inst.gold,
            student_label: None,
            teacher_called: true,
            emitted: label,
            correct: label == inst.gold,
            trained_on: true,
            score: None,
        });
    }
    let student = fit(learner, &llm_data, dataset, stream.seed)?;
    Ok(Warmup {
        student,
        llm_data,
        trace,
        cursor: n,
    })
}

/// Training-set sizes for the simulated committee of earlier students:
/// `N - k * step` for `k = 1..=members`, never below two examples. Returned
/// oldest first.
pub fn committee_prefill_sizes(
    warmup_size: usize,
    step: Option<usize>,
    members: usize,
) -> Vec<usize> {
    if warmup_size < 2 {
        return Vec::new();
    }
    let step = step.unwrap_or_else(|| (warmup_size / 10).max(1));
    (1..=members)
        .rev()
        .map(|k| warmup_size.saturating_sub(k * step).max(2))
        .collect()
}

fn prefill_committee<L: Learner>(
    policy: &mut PolicyState<L::Model>,
    warmup: &Warmup<L::Model>,
    dataset: &Dataset,
    config: &RunConfig,
    learner: &L,
) -> Result<()> {
    let sizes = committee_prefill_sizes(
        warmup.llm_data.len(),
        config.committee_prefill_step,
        config.policy.committee_size,
    );
    for size in sizes {
        let model = fit(learner, &warmup.llm_data[..size], dataset, config.seed)?;
        policy.snapshot_committee(model);
    }
    Ok(())
}

/// Runs one configuration end to end: stream order, warmup, then the regime's
/// streaming loop.
pub fn run<L: Learner>(
    dataset: &Dataset,
    config: &RunConfig,
    learner: &L,
) -> Result<RunRecord<L::Model>> {
    config.validate()?;
    let stream = make_stream(dataset, config.seed)?;
    let warmup = run_warmup(
        dataset,
        &stream,
        config.warmup_size,
        config.label_mode,
        learner,
    )?;
    run_stream(dataset, &stream, warmup, config, learner)
}

/// Budgeted streaming after warmup. Dispatches to [`run_no_retrain`] for the
/// frozen-student regime.
pub fn run_stream<L: Learner>(
    dataset: &Dataset,
    stream: &StreamOrder,
    warmup: Warmup<L::Model>,
    config: &RunConfig,
    learner: &L,
) -> Result<RunRecord<L::Model>> {
    match config.regime {
        Regime::Retrain => stream_loop(dataset, stream, warmup, config, learner),
        Regime::NoRetrain => run_no_retrain(dataset, stream, warmup, config, learner),
    }
}

/// Streaming with the student frozen at the warmup model.
pub fn run_no_retrain<L: Learner>(
    dataset: &Dataset,
    stream: &StreamOrder,
    warmup: Warmup<L::Model>,
    config: &RunConfig,
    learner: &L,
) -> Result<RunRecord<L::Model>> {
    if config.regime != Regime::NoRetrain {
        return Err(Error::config(
            "regime",
            "run_no_retrain requires regime = no_retrain",
        ));
    }
    if config.policy.kind.is_score_based() && config.threshold_mode() != ThresholdMode::Adaptive {
        return Err(Error::config(
            "policy.mode",
            "the no_retrain regime uses adaptive thresholds",
        ));
    }
    stream_loop(dataset, stream, warmup, config, learner)
}

fn stream_loop<L: Learner>(
    dataset: &Dataset,
    stream: &StreamOrder,
    warmup: Warmup<L::Model>,
    config: &RunConfig,
    learner: &L,
) -> Result<RunRecord<L::Model>> {
    let retrain = config.regime == Regime::Retrain;
    let start = warmup.cursor;
    let n_stream = stream.len() - start;
    let mut ledger = BudgetLedger::with_cost(config.budget, Arc::new(ConstantCost(config.cost)));
    let mut policy = PolicyState::new(
        config.policy.clone(),
        config.threshold_mode(),
        policy_seed(config.seed),
    );
    for &idx in &stream.order[..start] {
        policy.record_annotation(&dataset.online[idx])?;
    }
    if config.policy.kind == PolicyKind::Committee {
        prefill_committee(&mut policy, &warmup, dataset, config, learner)?;
    }

    let initial_model = warmup.student.clone();
    let mut student = warmup.student;
    let mut student_pool_size = warmup.llm_data.len();
    let mut llm_data = warmup.llm_data;
    let mut trace = Vec::with_capacity(n_stream);
    let mut retrains = Vec::new();
    let mut oracle_dropped = 0;

    for j in 0..n_stream {
        let position = start + j;
        let inst = &dataset.online[stream.order[position]];

        if retrain && j % config.retrain_frequency == 0 {
            let fresh = fit(learner, &llm_data, dataset, config.seed)?;
            let previous = std::mem::replace(&mut student, fresh);
            // An unchanged pool reproduces the same student; it is not a new
            // committee member.
            if llm_data.len() != student_pool_size {
                policy.snapshot_committee(previous);
            }
            student_pool_size = llm_data.len();
            retrains.push(RetrainEvent {
                position,
                training_size: llm_data.len(),
            });
        }

        let logprobs = student.predict(&inst.features)?;
        let student_label = ClassLabel(argmax(&logprobs));
        let decision = policy.decide(inst, &logprobs, &ledger, n_stream - j)?;
        let cost = ledger.cost_of(inst);

        let mut trained_on = false;
        let (emitted, called) = if decision.call_teacher && ledger.charge(position, cost) {
            policy.record_annotation(inst)?;
            if !config.oracle_filter || inst.teacher_correct() {
                llm_data.push(training_example(inst, config.label_mode));
                trained_on = true;
            } else {
                oracle_dropped += 1;
            }
            (inst.teacher_label(), true)
        } else {
            (student_label, false)
        };

        trace.push(TraceEntry {
            position,
            id: inst.id.clone(),
            warmup: false,
            gold: inst.gold,
            student_label: Some(student_label),
            teacher_called: called,
            emitted,
            correct: emitted == inst.gold,
            trained_on,
            score: decision.score.map(|s| s.value),
        });
    }

    Ok(RunRecord {
        policy: config.policy.label(),
        kind: config.policy.kind,
        mode: config.threshold_mode(),
        regime: config.regime,
        budget: config.budget,
        seed: config.seed,
        config: config.clone(),
        warmup: warmup.trace,
        trace,
        retrains,
        ledger: ledger.summary(),
        llm_data_size: llm_data.len(),
        oracle_dropped,
        committee_size: policy.committee_len(),
        empty_committee_decisions: policy.empty_committee_decisions,
        initial_model,
        final_model: student,
    })
}

/// One cell of a sweep.
#[derive(Debug, Clone)]
pub struct SweepCell<M> {
    pub policy: String,
    pub budget: f64,
    pub seed: u64,
    pub record: RunRecord<M>,
    pub metrics: RunMetrics,
}

/// Runs every (policy, budget, seed) combination. Cells run in parallel on the
/// current rayon pool; the output order is policy-major, then budget, then
/// seed, regardless of scheduling.
pub fn run_sweep<L: Learner>(
    dataset: &Dataset,
    config: &ExperimentConfig,
    learner: &L,
) -> Result<Vec<SweepCell<L::Model>>> {
    config.validate()?;
    let mut budgets = config.budgets.clone();
    budgets.sort_by(f64::total_cmp);
    let mut cells = Vec::new();
    for policy in &config.policy {
        for &budget in &budgets {
            for &seed in &config.seeds {
                cells.push(config.run_config(policy, budget, seed));
            }
        }
    }
    cells
        .into_par_iter()
        .map(|rc| {
            let record = run(dataset, &rc, learner)?;
            let metrics = RunMetrics::compute(&record, dataset, config.include_warmup_in_online)?;
            Ok(SweepCell {
                policy: record.policy.clone(),
                budget: rc.budget,
                seed: rc.seed,
                record,
                metrics,
            })
        })
        .collect()
}
