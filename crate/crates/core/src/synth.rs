//! Synthetic datasets with a simulated teacher.
//!
//! Features and embeddings are Gaussian clusters around per-class means. The
//! teacher scores class `k` with `z_k = s·[k = gold] + ρ·s·[k = gold + 1] + g_k`
//! where `g_k ~ N(0, 1)`; the sharpness `s` is searched so that the realized
//! argmax accuracy hits the target. Log-probabilities are
//! `log_softmax(logit_scale · z)`, so wrong answers come with low margins.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    split_online_test, ClassLabel, Dataset, Instance, SplitSize, TeacherDistribution,
    FILLER_LOGPROB,
};
use crate::numeric::{argmax, log_softmax, mix_seed, norm};
use crate::policy::margin;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub name: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    /// Distance of each class mean from the origin, in noise standard deviations.
    pub separation: f64,
    pub teacher_accuracy: f64,
    /// Share of the teacher's signal leaked to the next class, in [0, 1).
    /// Nonzero values make teacher mistakes systematic.
    pub confusion: f64,
    pub logit_scale: f64,
    /// Classes outside the teacher's top-k get the filler log-probability.
    pub top_k: Option<usize>,
    pub online: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            num_classes: 4,
            feature_dim: 16,
            embedding_dim: 8,
            separation: 2.0,
            teacher_accuracy: 0.9,
            confusion: 0.0,
            logit_scale: 3.0,
            top_k: Some(5),
            online: 5000,
            test: 1000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("synth.{key}"), msg));
        if self.num_classes < 2 {
            return bad("num_classes", "need at least 2 classes".into());
        }
        if self.feature_dim == 0 || self.embedding_dim == 0 {
            return bad("feature_dim", "dimensions must be positive".into());
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad(
                "separation",
                format!("must be finite and >= 0, got {}", self.separation),
            );
        }
        if !(self.teacher_accuracy > 0.0 && self.teacher_accuracy < 1.0) {
            return bad(
                "teacher_accuracy",
                format!(
                    "must lie in (0, 1) under Gaussian teacher noise, got {}",
                    self.teacher_accuracy
                ),
            );
        }
        if !(0.0..1.0).contains(&self.confusion) {
            return bad(
                "confusion",
                format!("must lie in [0, 1), got {}", self.confusion),
            );
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return bad(
                "logit_scale",
                format!("must be positive, got {}", self.logit_scale),
            );
        }
        if self.top_k.is_some_and(|k| k < 2) {
            return bad("top_k", "must keep at least 2 classes".into());
        }
        if self.online == 0 {
            return bad("online", "need at least one online instance".into());
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn class_means(rng: &mut ChaCha8Rng, k: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| {
            let v = gaussian_vec(rng, dim);
            let n = norm(&v).max(f64::MIN_POSITIVE);
            v.iter().map(|x| x / n * separation).collect()
        })
        .collect()
}

fn teacher_scores(
    gold: usize,
    k: usize,
    sharpness: f64,
    confusion: f64,
    noise: &[f64],
) -> Vec<f64> {
    let mut z = noise.to_vec();
    z[gold] += sharpness;
    z[(gold + 1) % k] += confusion * sharpness;
    z
}

fn realized_accuracy(
    golds: &[usize],
    noise: &[Vec<f64>],
    k: usize,
    sharpness: f64,
    confusion: f64,
) -> f64 {
    let hits = golds
        .iter()
        .zip(noise)
        .filter(|(&g, n)| argmax(&teacher_scores(g, k, sharpness, confusion, n)) == g)
        .count();
    hits as f64 / golds.len() as f64
}

/// Sharpness whose realized accuracy on the drawn noise is closest to the
/// target from above.
fn search_sharpness(golds: &[usize], noise: &[Vec<f64>], spec: &SynthSpec) -> Result<f64> {
    let acc = |s| realized_accuracy(golds, noise, spec.num_classes, s, spec.confusion);
    let (mut lo, mut hi) = (0.0, 64.0);
    if acc(lo) > spec.teacher_accuracy || acc(hi) < spec.teacher_accuracy {
        return Err(Error::config(
            "synth.teacher_accuracy",
            format!(
                "target {} is not reachable for this spec",
                spec.teacher_accuracy
            ),
        ));
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if acc(mid) < spec.teacher_accuracy {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Generates a dataset; identical specs give identical datasets.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.num_classes;
    let total = spec.online + spec.test;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 10, 0));
    let feature_means = class_means(&mut rng, k, spec.feature_dim, spec.separation);
    let embedding_means = class_means(&mut rng, k, spec.embedding_dim, spec.separation);

    let mut golds: Vec<usize> = (0..total).map(|i| i % k).collect();
    golds.shuffle(&mut rng);
    let noise: Vec<Vec<f64>> = (0..total).map(|_| gaussian_vec(&mut rng, k)).collect();
    let sharpness = search_sharpness(&golds, &noise, spec)?;

    let mut instances = Vec::with_capacity(total);
    for (i, (&gold, g)) in golds.iter().zip(&noise).enumerate() {
        let features = feature_means[gold]
            .iter()
            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let embedding = embedding_means[gold]
            .iter()
            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let z: Vec<f64> = teacher_scores(gold, k, sharpness, spec.confusion, g)
            .iter()
            .map(|v| v * spec.logit_scale)
            .collect();
        let mut logprobs = log_softmax(&z);
        if let Some(top) = spec.top_k.filter(|&t| t < k) {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]).then(a.cmp(&b)));
            for &c in &order[top..] {
                logprobs[c] = FILLER_LOGPROB;
            }
        }
        // Deep tails can underflow below the filler; clamp to keep them valid.
        for lp in &mut logprobs {
            *lp = lp.clamp(FILLER_LOGPROB, 0.0);
        }
        instances.push(Instance {
            id: format!("syn-{i:06}"),
            text: None,
            features,
            embedding,
            gold: ClassLabel(gold),
            teacher: TeacherDistribution::new(logprobs)?,
        });
    }
    let (online, test) = split_online_test(
        instances,
        SplitSize::OnlineCount(spec.online),
        mix_seed(spec.seed, 11, 0),
    )?;
    let class_names = (0..k).map(|c| format!("c{c}")).collect();
    Dataset::new(spec.name.clone(), class_names, online, test)
}

/// Teacher calibration of a dataset against a target accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub instances: usize,
    pub realized_accuracy: f64,
    pub target_accuracy: f64,
    pub tolerance: f64,
    pub accuracy_ok: bool,
    pub mean_margin_correct: Option<f64>,
    pub mean_margin_wrong: Option<f64>,
    /// Wrong teacher labels carry a strictly lower mean margin than correct
    /// ones. Vacuously true when either group is empty.
    pub margins_ok: bool,
}

impl CalibrationReport {
    pub fn passed(&self) -> bool {
        self.accuracy_ok && self.margins_ok
    }
}

/// Checks realized teacher accuracy over online ∪ test and the margin
/// ordering of wrong versus correct teacher labels.
pub fn check_calibration(
    dataset: &Dataset,
    target_accuracy: f64,
    tolerance: f64,
) -> Result<CalibrationReport> {
    let (mut correct, mut wrong) = (Vec::new(), Vec::new());
    for inst in dataset.all_instances() {
        let m = margin(inst.teacher.logprobs())?;
        if inst.teacher_correct() {
            correct.push(m);
        } else {
            wrong.push(m);
        }
    }
    let n = correct.len() + wrong.len();
    if n == 0 {
        return Err(Error::Dataset("dataset has no instances".into()));
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let realized = correct.len() as f64 / n as f64;
    let (mc, mw) = (mean(&correct), mean(&wrong));
    Ok(CalibrationReport {
        instances: n,
        realized_accuracy: realized,
        target_accuracy,
        tolerance,
        accuracy_ok: (realized - target_accuracy).abs() <= tolerance,
        mean_margin_correct: mc,
        mean_margin_wrong: mw,
        margins_ok: match (mc, mw) {
            (Some(c), Some(w)) => w < c,
            _ => true,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            online: 800,
            test: 200,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(generate(&small(4)).unwrap(), generate(&small(4)).unwrap());
        assert_ne!(generate(&small(4)).unwrap(), generate(&small(5)).unwrap());
    }

    #[test]
    fn sizes_and_dimensions() {
        let ds = generate(&small(1)).unwrap();
        assert_eq!((ds.online.len(), ds.test.len()), (800, 200));
        assert_eq!(ds.num_classes(), 4);
        assert_eq!(ds.feature_dim(), 16);
    }

    #[test]
    fn hits_the_target_accuracy() {
        let ds = generate(&small(2)).unwrap();
        let report = check_calibration(&ds, 0.9, 0.01).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn top_k_fills_the_tail() {
        let spec = SynthSpec {
            num_classes: 7,
            top_k: Some(5),
            ..small(3)
        };
        let ds = generate(&spec).unwrap();
        for inst in ds.all_instances() {
            let fillers = inst
                .teacher
                .logprobs()
                .iter()
                .filter(|&&v| v == FILLER_LOGPROB)
                .count();
            assert!(fillers >= 2);
        }
    }

    #[test]
    fn rejects_infeasible_specs() {
        for spec in [
            SynthSpec {
                teacher_accuracy: 1.0,
                ..small(0)
            },
            SynthSpec {
                teacher_accuracy: 0.0,
                ..small(0)
            },
            SynthSpec {
                num_classes: 1,
                ..small(0)
            },
            SynthSpec {
                confusion: 1.0,
                ..small(0)
            },
        ] {
            assert!(generate(&spec).is_err());
        }
    }
}
