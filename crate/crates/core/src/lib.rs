//! Replay simulator and selection-policy library for neural caching.
//!
//! A stream of classification requests is served either by a small student
//! model or by an expensive teacher whose answers were recorded ahead of time.
//! Every teacher answer is paid for from a fixed budget and added to the
//! student's training pool; the student is periodically retrained from scratch
//! on that pool. The crate replays recorded teacher annotations so that
//! selection policies (front-loading, random, margin, entropy, query by
//! committee, coreset) can be compared on online and final accuracy.
//!
//! Module map:
//!
//! - [`dataset`]: instance/teacher data model, JSONL loading and validation,
//!   seeded stream orders and splits, teacher statistics.
//! - [`student`]: the reference multinomial softmax learner.
//! - [`policy`]: selection criteria, thresholds and the per-instance decision.
//! - [`simulator`]: warmup, the streaming loop, budget ledger, sweeps.
//! - [`metrics`]: accuracies, budget AUC, seed aggregation, reports.
//! - [`config`]: the experiment configuration file.
//! - [`synth`]: synthetic datasets with a simulated teacher, plus calibration checks.

pub mod config;
pub mod dataset;
mod error;
pub mod io;
pub mod metrics;
pub mod numeric;
pub mod policy;
pub mod simulator;
pub mod student;
pub mod synth;

pub use config::{ExperimentConfig, LabelMode, Regime, RunConfig};
pub use dataset::{ClassLabel, Dataset, Instance, StreamOrder, TeacherDistribution};
pub use error::{Error, Result};
pub use metrics::{RunMetrics, SweepReport};
pub use policy::{PolicyConfig, PolicyKind, PolicyState, ThresholdMode};
pub use simulator::{BudgetLedger, RunRecord};
pub use student::{Classifier, Learner, SoftmaxLearner, StudentModel, TrainConfig};
