//! The reference student: a multinomial softmax classifier over the
//! precomputed instance features.
//!
//! Every training call starts from zero weights and runs mini-batch gradient
//! descent on the weighted cross-entropy between the model's softmax and the
//! targets (softmax-renormalized teacher log-probabilities, or one-hot labels),
//! plus an L2 penalty on the non-bias weights. A seeded random split holds out
//! a validation set; training stops after `patience` epochs without
//! improvement and returns the best-validation checkpoint.
//!
//! Other learners can be plugged into the simulator through [`Learner`].

use std::fmt::Debug;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, Instance, TeacherDistribution};
use crate::io::{read_to_string, write_atomic};
use crate::numeric::{argmax, log_softmax};
use crate::{Error, Result};

/// Anything that maps a feature vector to per-class log-probabilities.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    fn predict(&self, features: &[f64]) -> Result<Vec<f64>>;

    /// Argmax of [`Classifier::predict`], ties to the lowest index.
    fn predict_label(&self, features: &[f64]) -> Result<ClassLabel> {
        Ok(ClassLabel(argmax(&self.predict(features)?)))
    }
}

/// Produces fresh models from accumulated teacher labels.
pub trait Learner: Send + Sync {
    type Model: Classifier + Clone + Debug + Send + Sync + Serialize;

    /// The model used before any training data exists.
    fn untrained(&self, num_classes: usize, feature_dim: usize) -> Self::Model;

    /// Trains a model from scratch. Must be a pure function of its inputs.
    fn train(
        &self,
        data: &[TrainingExample],
        num_classes: usize,
        feature_dim: usize,
        seed: u64,
    ) -> Result<Self::Model>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Renormalized with a softmax at training time.
    Soft(TeacherDistribution),
    Hard(ClassLabel),
}

impl Target {
    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Target::Soft(t) => Some(t.num_classes()),
            Target::Hard(_) => None,
        }
    }

    fn write_dense(&self, out: &mut [f64]) {
        match self {
            Target::Soft(t) => out.copy_from_slice(&t.probabilities()),
            Target::Hard(label) => {
                out.fill(0.0);
                out[label.0] = 1.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub features: Vec<f64>,
    pub target: Target,
    pub weight: f64,
}

impl TrainingExample {
    pub fn new(features: Vec<f64>, target: Target) -> Self {
        Self {
            features,
            target,
            weight: 1.0,
        }
    }

    pub fn soft(instance: &Instance) -> Self {
        Self::new(
            instance.features.clone(),
            Target::Soft(instance.teacher.clone()),
        )
    }

    pub fn hard(instance: &Instance) -> Self {
        Self::new(
            instance.features.clone(),
            Target::Hard(instance.teacher.argmax()),
        )
    }
}

fn default_max_epochs() -> usize {
    30
}
fn default_patience() -> usize {
    5
}
fn default_validation_fraction() -> f64 {
    0.1
}
fn default_learning_rate() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    32
}
fn default_l2_penalty() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_l2_penalty")]
    pub l2_penalty: f64,
    /// Governs the validation split and batch shuffling. The simulator derives
    /// it per retraining event, so it is not a config-file key.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            validation_fraction: default_validation_fraction(),
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            l2_penalty: default_l2_penalty(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 {
            return Err(Error::config("train.max_epochs", "must be >= 1"));
        }
        if self.patience < 1 {
            return Err(Error::config("train.patience", "must be >= 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return Err(Error::config(
                "train.validation_fraction",
                "must lie in (0, 0.5)",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.l2_penalty.is_finite() && self.l2_penalty >= 0.0) {
            return Err(Error::config("train.l2_penalty", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Validation loss after the first epoch.
    pub first_validation_loss: Option<f64>,
    pub best_validation_loss: Option<f64>,
    pub seed: u64,
    pub training_size: usize,
    pub validation_size: usize,
    /// Set when the validation split floored to zero and early stopping fell
    /// back to the training loss.
    pub validation_fallback: bool,
}

const MODEL_FORMAT: &str = "neural-cache-student";
const MODEL_VERSION: u32 = 1;

/// Linear softmax model. `weights` is row-major K x (feature_dim + 1); the last
/// column of each row is the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    num_classes: usize,
    feature_dim: usize,
    weights: Vec<f64>,
    pub meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: StudentModel,
}

impl StudentModel {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            feature_dim,
            weights: vec![0.0; num_classes * (feature_dim + 1)],
            meta: TrainMeta::default(),
        }
    }

    pub fn from_weights(num_classes: usize, feature_dim: usize, weights: Vec<f64>) -> Result<Self> {
        let expected = num_classes * (feature_dim + 1);
        if weights.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: weights.len(),
            });
        }
        Ok(Self {
            num_classes,
            feature_dim,
            weights,
            meta: TrainMeta::default(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn logits(&self, features: &[f64]) -> Vec<f64> {
        logits(&self.weights, self.num_classes, features)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        };
        let mut json = serde_json::to_string(&file)?;
        json.push('\n');
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&read_to_string(path)?)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::InvalidArgument(format!(
                "{}: unsupported model format {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        let m = file.model;
        Self::from_weights(m.num_classes, m.feature_dim, m.weights).map(|mut model| {
            model.meta = m.meta;
            model
        })
    }
}

fn logits(weights: &[f64], num_classes: usize, features: &[f64]) -> Vec<f64> {
    let row = features.len() + 1;
    (0..num_classes)
        .map(|k| {
            let w = &weights[k * row..(k + 1) * row];
            w[..row - 1]
                .iter()
                .zip(features)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + w[row - 1]
        })
        .collect()
}

impl Classifier for StudentModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim {
            return Err(Error::Dimension {
                expected: self.feature_dim,
                actual: features.len(),
            });
        }
        Ok(log_softmax(&self.logits(features)))
    }
}

/// Dense copy of a training set: features, target probabilities and weights.
struct Prepared {
    dim: usize,
    k: usize,
    x: Vec<f64>,
    t: Vec<f64>,
    w: Vec<f64>,
}

impl Prepared {
    fn new(data: &[TrainingExample], k: usize, dim: usize) -> Result<Self> {
        let mut x = Vec::with_capacity(data.len() * dim);
        let mut t = vec![0.0; data.len() * k];
        let mut w = Vec::with_capacity(data.len());
        for (i, ex) in data.iter().enumerate() {
            if ex.features.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: ex.features.len(),
                });
            }
            if let Some(tk) = ex.target.num_classes() {
                if tk != k {
                    return Err(Error::Dimension {
                        expected: k,
                        actual: tk,
                    });
                }
            }
            if let Target::Hard(label) = ex.target {
                if label.0 >= k {
                    return Err(Error::InvalidArgument(format!(
                        "hard target {} out of range for {k} classes",
                        label.0
                    )));
                }
            }
            if !(ex.weight.is_finite() && ex.weight > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "example weight must be > 0, got {}",
                    ex.weight
                )));
            }
            x.extend_from_slice(&ex.features);
            ex.target.write_dense(&mut t[i * k..(i + 1) * k]);
            w.push(ex.weight);
        }
        Ok(Self { dim, k, x, t, w })
    }

    fn features(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    fn target(&self, i: usize) -> &[f64] {
        &self.t[i * self.k..(i + 1) * self.k]
    }

    /// Weighted mean cross-entropy over `rows` (no penalty).
    fn cross_entropy(&self, weights: &[f64], rows: &[usize]) -> f64 {
        let mut total = 0.0;
        let mut wsum = 0.0;
        for &i in rows {
            let lp = log_softmax(&logits(weights, self.k, self.features(i)));
            let ce: f64 = self
                .target(i)
                .iter()
                .zip(&lp)
                .filter(|(t, _)| **t > 0.0)
                .map(|(t, l)| -t * l)
                .sum();
            total += self.w[i] * ce;
            wsum += self.w[i];
        }
        total / wsum
    }

    /// Objective and gradient over `rows`: weighted mean cross-entropy plus
    /// `l2 / 2 * ||W||^2` on the non-bias weights.
    fn objective(&self, weights: &[f64], rows: &[usize], l2: f64, grad: &mut [f64]) -> f64 {
        let row = self.dim + 1;
        grad.fill(0.0);
        let mut total = 0.0;
        let mut wsum = 0.0;
        for &i in rows {
            let x = self.features(i);
            let lp = log_softmax(&logits(weights, self.k, x));
            let wi = self.w[i];
            wsum += wi;
            for (k, (&t, &l)) in self.target(i).iter().zip(&lp).enumerate() {
                if t > 0.0 {
                    total -= wi * t * l;
                }
                let delta = wi * (l.exp() - t);
                let g = &mut grad[k * row..(k + 1) * row];
                for (gj, xj) in g[..self.dim].iter_mut().zip(x) {
                    *gj += delta * xj;
                }
                g[self.dim] += delta;
            }
        }
        for g in grad.iter_mut() {
            *g /= wsum;
        }
        let mut penalty = 0.0;
        for k in 0..self.k {
            for j in 0..self.dim {
                let idx = k * row + j;
                penalty += weights[idx] * weights[idx];
                grad[idx] += l2 * weights[idx];
            }
        }
        total / wsum + 0.5 * l2 * penalty
    }
}

/// Training objective and its analytic gradient at `model`'s weights, over the
/// whole of `data`. Exposed for gradient checking.
pub fn loss_and_gradient(
    model: &StudentModel,
    data: &[TrainingExample],
    l2_penalty: f64,
) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training data".into()));
    }
    let prepared = Prepared::new(data, model.num_classes, model.feature_dim)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; model.weights.len()];
    let loss = prepared.objective(&model.weights, &rows, l2_penalty, &mut grad);
    Ok((loss, grad))
}

/// Trains a student from zero weights. Deterministic given `config.seed`.
pub fn train_student(
    data: &[TrainingExample],
    num_classes: usize,
    feature_dim: usize,
    config: &TrainConfig,
) -> Result<StudentModel> {
    config.validate()?;
    if data.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 examples, got {}",
            data.len()
        )));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    let prepared = Prepared::new(data, num_classes, feature_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (data.len() as f64 * config.validation_fraction).floor() as usize;
    let fallback = n_val == 0;
    let (val_rows, mut train_rows) = if fallback {
        (order.clone(), order)
    } else {
        let train = order.split_off(n_val);
        (order, train)
    };

    let mut model = StudentModel::zeros(num_classes, feature_dim);
    let mut grad = vec![0.0; model.weights.len()];
    let mut best_weights = model.weights.clone();
    let mut best_loss = f64::INFINITY;
    let mut first_loss = None;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        train_rows.shuffle(&mut rng);
        for batch in train_rows.chunks(config.batch_size) {
            prepared.objective(&model.weights, batch, config.l2_penalty, &mut grad);
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= config.learning_rate * g;
            }
        }
        epochs_run = epoch;
        let loss = prepared.cross_entropy(&model.weights, &val_rows);
        first_loss.get_or_insert(loss);
        if loss < best_loss {
            best_loss = loss;
            best_weights.copy_from_slice(&model.weights);
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    model.weights = best_weights;
    model.meta = TrainMeta {
        epochs_run,
        best_epoch,
        first_validation_loss: first_loss,
        best_validation_loss: Some(best_loss),
        seed: config.seed,
        training_size: train_rows.len(),
        validation_size: if fallback { 0 } else { val_rows.len() },
        validation_fallback: fallback,
    };
    Ok(model)
}

/// Fraction of `instances` whose predicted label equals gold.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, instances: &[Instance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on an empty instance list".into(),
        ));
    }
    let mut correct = 0usize;
    for inst in instances {
        if model.predict_label(&inst.features)? == inst.gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}

/// [`Learner`] backed by [`train_student`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SoftmaxLearner {
    pub config: TrainConfig,
}

impl SoftmaxLearner {
    pub fn new(config: TrainConfig) -> Self {
        Self { config }
    }
}

impl Learner for SoftmaxLearner {
    type Model = StudentModel;

    fn untrained(&self, num_classes: usize, feature_dim: usize) -> StudentModel {
        StudentModel::zeros(num_classes, feature_dim)
    }

    fn train(
        &self,
        data: &[TrainingExample],
        num_classes: usize,
        feature_dim: usize,
        seed: u64,
    ) -> Result<StudentModel> {
        let config = TrainConfig {
            seed,
            ..self.config.clone()
        };
        train_student(data, num_classes, feature_dim, &config)
    }
}
