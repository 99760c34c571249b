//! Run metrics, budget-curve AUC, seed aggregation and sweep reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RunConfig};
use crate::dataset::{Dataset, Instance};
use crate::io::{read_to_string, write_atomic};
use crate::simulator::{RunRecord, SweepCell};
use crate::student::{evaluate, Classifier};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub online_accuracy: f64,
    /// Absent when the dataset has no test portion.
    pub final_accuracy: Option<f64>,
    pub teacher_calls: usize,
    pub spend: f64,
    /// Gold accuracy of the teacher labels bought during streaming.
    pub teacher_label_accuracy_on_called: Option<f64>,
    pub retrain_count: usize,
    /// Final-student accuracy on test instances the teacher gets wrong.
    pub teacher_wrong_subset_accuracy: Option<f64>,
    pub oracle_dropped: usize,
    pub empty_committee_decisions: usize,
}

impl RunMetrics {
    pub fn compute<M: Classifier>(
        record: &RunRecord<M>,
        dataset: &Dataset,
        include_warmup: bool,
    ) -> Result<Self> {
        let called: Vec<_> = record.trace.iter().filter(|t| t.teacher_called).collect();
        let final_accuracy = if dataset.test.is_empty() {
            None
        } else {
            Some(evaluate(&record.final_model, &dataset.test)?)
        };
        Ok(Self {
            online_accuracy: online_accuracy(record, include_warmup)?,
            final_accuracy,
            teacher_calls: called.len(),
            spend: record.ledger.total_spent(),
            teacher_label_accuracy_on_called: (!called.is_empty())
                .then(|| called.iter().filter(|t| t.correct).count() as f64 / called.len() as f64),
            retrain_count: record.retrains.len(),
            teacher_wrong_subset_accuracy: teacher_wrong_subset_accuracy(
                &record.final_model,
                &dataset.test,
            )?,
            oracle_dropped: record.oracle_dropped,
            empty_committee_decisions: record.empty_committee_decisions,
        })
    }
}

/// Fraction of scored trace entries whose emitted label equals gold. The
/// scored window is the post-warmup stream, optionally with the warmup.
pub fn online_accuracy<M>(record: &RunRecord<M>, include_warmup: bool) -> Result<f64> {
    let warmup: &[_] = if include_warmup { &record.warmup } else { &[] };
    let total = warmup.len() + record.trace.len();
    if total == 0 {
        return Err(Error::InvalidArgument("empty trace".into()));
    }
    let correct = warmup
        .iter()
        .chain(&record.trace)
        .filter(|t| t.correct)
        .count();
    Ok(correct as f64 / total as f64)
}

/// Trapezoid area under the accuracy-vs-budget curve divided by the budget
/// range. A single point returns its accuracy.
pub fn auc_over_budgets(points: &[(f64, f64)]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument(
            "AUC needs at least one point".into(),
        ));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidArgument(
            "duplicate budget in AUC grid".into(),
        ));
    }
    if pts.len() == 1 {
        return Ok(pts[0].1);
    }
    let area: f64 = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(area / (pts[pts.len() - 1].0 - pts[0].0))
}

/// Accuracy of `model` on the test instances whose teacher label is wrong;
/// `None` when the teacher is right on all of them.
pub fn teacher_wrong_subset_accuracy<C: Classifier + ?Sized>(
    model: &C,
    test: &[Instance],
) -> Result<Option<f64>> {
    let subset: Vec<Instance> = test
        .iter()
        .filter(|i| !i.teacher_correct())
        .cloned()
        .collect();
    if subset.is_empty() {
        return Ok(None);
    }
    evaluate(model, &subset).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanVar {
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
}

/// Mean and population variance. The result does not depend on input order.
pub fn aggregate_seeds(values: &[f64]) -> Result<MeanVar> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    sq.sort_by(f64::total_cmp);
    Ok(MeanVar {
        mean,
        variance: sq.iter().sum::<f64>() / n,
    })
}

fn aggregate_optional(values: impl Iterator<Item = Option<f64>>) -> Result<Option<MeanVar>> {
    let v: Option<Vec<f64>> = values.collect();
    match v {
        Some(v) if !v.is_empty() => aggregate_seeds(&v).map(Some),
        _ => Ok(None),
    }
}

/// Mean/variance of each metric across seed cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub online_accuracy: MeanVar,
    pub final_accuracy: Option<MeanVar>,
    pub teacher_calls: MeanVar,
    pub teacher_wrong_subset_accuracy: Option<MeanVar>,
}

pub fn aggregate_metrics(cells: &[RunMetrics]) -> Result<AggregateMetrics> {
    if cells.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let online: Vec<f64> = cells.iter().map(|c| c.online_accuracy).collect();
    let calls: Vec<f64> = cells.iter().map(|c| c.teacher_calls as f64).collect();
    Ok(AggregateMetrics {
        online_accuracy: aggregate_seeds(&online)?,
        final_accuracy: aggregate_optional(cells.iter().map(|c| c.final_accuracy))?,
        teacher_calls: aggregate_seeds(&calls)?,
        teacher_wrong_subset_accuracy: aggregate_optional(
            cells.iter().map(|c| c.teacher_wrong_subset_accuracy),
        )?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleDelta {
    pub online: f64,
    /// Absent when either side lacks a test portion.
    #[serde(rename = "final")]
    pub final_: Option<f64>,
}

/// Mean accuracy gain from oracle filtering. Pairs must share every setting
/// except `oracle_filter`, which must be on for `filtered` and off for
/// `baseline`.
pub fn oracle_delta(
    filtered: &[(RunConfig, RunMetrics)],
    baseline: &[(RunConfig, RunMetrics)],
) -> Result<OracleDelta> {
    if filtered.is_empty() || filtered.len() != baseline.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty run lists, got {} filtered and {} baseline",
            filtered.len(),
            baseline.len()
        )));
    }
    let mut online = Vec::new();
    let mut finals = Vec::new();
    for ((fc, fm), (bc, bm)) in filtered.iter().zip(baseline) {
        if !fc.oracle_filter || bc.oracle_filter {
            return Err(Error::InvalidArgument(
                "filtered runs need oracle_filter = true, baseline runs false".into(),
            ));
        }
        let mut fc = fc.clone();
        fc.oracle_filter = false;
        if &fc != bc {
            return Err(Error::InvalidArgument(
                "paired runs differ in more than oracle_filter".into(),
            ));
        }
        online.push(fm.online_accuracy - bm.online_accuracy);
        finals.push(fm.final_accuracy.zip(bm.final_accuracy).map(|(a, b)| a - b));
    }
    Ok(OracleDelta {
        online: aggregate_seeds(&online)?.mean,
        final_: aggregate_optional(finals.into_iter())?.map(|m| m.mean),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: f64,
    pub seeds: usize,
    pub metrics: AggregateMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub points: Vec<CurvePoint>,
    pub auc_online: f64,
    pub auc_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub policy: String,
    pub budget: f64,
    pub seed: u64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDeltaRow {
    pub policy: String,
    pub delta: OracleDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub dataset: String,
    pub config: ExperimentConfig,
    pub policies: Vec<PolicySummary>,
    pub cells: Vec<CellSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub oracle_deltas: Vec<OracleDeltaRow>,
}

impl SweepReport {
    pub fn from_cells<M>(
        dataset: &str,
        config: &ExperimentConfig,
        cells: &[SweepCell<M>],
    ) -> Result<Self> {
        let summaries: Vec<CellSummary> = cells
            .iter()
            .map(|c| CellSummary {
                policy: c.policy.clone(),
                budget: c.budget,
                seed: c.seed,
                metrics: c.metrics.clone(),
            })
            .collect();
        Self::from_summaries(dataset, config, summaries)
    }

    pub fn from_summaries(
        dataset: &str,
        config: &ExperimentConfig,
        cells: Vec<CellSummary>,
    ) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut grouped: BTreeMap<(String, u64), (f64, Vec<RunMetrics>)> = BTreeMap::new();
        for c in &cells {
            if !order.contains(&c.policy) {
                order.push(c.policy.clone());
            }
            grouped
                .entry((c.policy.clone(), c.budget.to_bits()))
                .or_insert_with(|| (c.budget, Vec::new()))
                .1
                .push(c.metrics.clone());
        }
        let mut policies = Vec::new();
        for policy in order {
            let mut points = Vec::new();
            for ((p, _), (budget, ms)) in &grouped {
                if *p == policy {
                    points.push(CurvePoint {
                        budget: *budget,
                        seeds: ms.len(),
                        metrics: aggregate_metrics(ms)?,
                    });
                }
            }
            points.sort_by(|a, b| a.budget.total_cmp(&b.budget));
            let online: Vec<(f64, f64)> = points
                .iter()
                .map(|p| (p.budget, p.metrics.online_accuracy.mean))
                .collect();
            let finals: Option<Vec<(f64, f64)>> = points
                .iter()
                .map(|p| p.metrics.final_accuracy.map(|f| (p.budget, f.mean)))
                .collect();
            policies.push(PolicySummary {
                policy,
                auc_online: auc_over_budgets(&online)?,
                auc_final: finals.map(|f| auc_over_budgets(&f)).transpose()?,
                points,
            });
        }
        Ok(Self {
            dataset: dataset.to_string(),
            config: config.clone(),
            policies,
            cells,
            oracle_deltas: Vec::new(),
        })
    }

    pub fn policy(&self, name: &str) -> Option<&PolicySummary> {
        self.policies.iter().find(|p| p.policy == name)
    }

    /// Per-policy oracle deltas of `self` (oracle-filtered) against `baseline`.
    pub fn oracle_deltas_against(&self, baseline: &SweepReport) -> Result<Vec<OracleDeltaRow>> {
        let mut with_flag = baseline.config.clone();
        with_flag.oracle_filter = true;
        if !self.config.oracle_filter || baseline.config.oracle_filter || with_flag != self.config {
            return Err(Error::InvalidArgument(
                "reports must differ only in oracle_filter (true vs false)".into(),
            ));
        }
        let mut rows = Vec::new();
        for p in &self.config.policy {
            let label = p.label();
            let mut filtered = Vec::new();
            let mut base = Vec::new();
            for c in self.cells.iter().filter(|c| c.policy == label) {
                let b = baseline
                    .cells
                    .iter()
                    .find(|b| b.policy == label && b.budget == c.budget && b.seed == c.seed)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "baseline lacks cell {label}/{}/{}",
                            c.budget, c.seed
                        ))
                    })?;
                filtered.push((
                    self.config.run_config(p, c.budget, c.seed),
                    c.metrics.clone(),
                ));
                base.push((
                    baseline.config.run_config(p, b.budget, b.seed),
                    b.metrics.clone(),
                ));
            }
            rows.push(OracleDeltaRow {
                policy: label,
                delta: oracle_delta(&filtered, &base)?,
            });
        }
        Ok(rows)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Plot-ready curve table: one row per (policy, budget).
    pub fn curves_csv(&self) -> String {
        let mut out = String::from(
            "policy,budget,seeds,online_mean,online_var,final_mean,final_var,calls_mean\n",
        );
        for p in &self.policies {
            for pt in &p.points {
                let m = &pt.metrics;
                let (fm, fv) = m
                    .final_accuracy
                    .map_or((String::new(), String::new()), |f| {
                        (f.mean.to_string(), f.variance.to_string())
                    });
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    p.policy,
                    pt.budget,
                    pt.seeds,
                    m.online_accuracy.mean,
                    m.online_accuracy.variance,
                    fm,
                    fv,
                    m.teacher_calls.mean
                );
            }
        }
        out
    }

    /// Per-cell table keyed by (policy, budget, seed).
    pub fn cells_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut out = String::from(
            "policy,budget,seed,online_accuracy,final_accuracy,teacher_calls,spend,teacher_label_accuracy_on_called,retrain_count,teacher_wrong_subset_accuracy,oracle_dropped\n",
        );
        for c in &self.cells {
            let m = &c.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.policy,
                c.budget,
                c.seed,
                m.online_accuracy,
                opt(m.final_accuracy),
                m.teacher_calls,
                m.spend,
                opt(m.teacher_label_accuracy_on_called),
                m.retrain_count,
                opt(m.teacher_wrong_subset_accuracy),
                m.oracle_dropped
            );
        }
        out
    }

    /// Human-readable AUC table.
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<16} {:>10} {:>10}\n", "policy", "online", "final");
        for p in &self.policies {
            let fin = p
                .auc_final
                .map_or_else(|| "-".to_string(), |f| format!("{f:.4}"));
            let _ = writeln!(out, "{:<16} {:>10.4} {:>10}", p.policy, p.auc_online, fin);
        }
        for row in &self.oracle_deltas {
            let fin = row
                .delta
                .final_
                .map_or_else(|| "-".to_string(), |f| format!("{f:+.4}"));
            let _ = writeln!(
                out,
                "oracle delta {:<8} online {:+.4} final {}",
                row.policy, row.delta.online, fin
            );
        }
        out
    }
}
