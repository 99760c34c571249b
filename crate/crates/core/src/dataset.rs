//! Dataset model: annotated instances, on-disk layout, stream orders and
//! teacher statistics.
//!
//! A dataset directory holds three files:
//!
//! ```text
//! manifest.json   name, class_names, feature_dim, embedding_dim, counts, [split], [encoder]
//! online.jsonl    one instance per line
//! test.jsonl      one instance per line
//! ```
//!
//! Each JSONL line is
//! `{"id": str, "text": str|null, "features": [f64], "embedding": [f64], "gold": int, "teacher_logprobs": [f64]}`.
//! Teacher log-probabilities are stored verbatim; classes the provider did not
//! return carry the filler value [`FILLER_LOGPROB`].

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{read_to_string, write_atomic};
use crate::numeric::{argmax, norm, softmax};
use crate::policy::margin;
use crate::{Error, Result};

/// Log-probability assigned to classes missing from the provider's top-5.
pub const FILLER_LOGPROB: f64 = -100.0;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ONLINE_FILE: &str = "online.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

/// Index into the dataset's ordered class-name list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(pub usize);

impl ClassLabel {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Recorded teacher output: one natural-log probability per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TeacherDistribution {
    logprobs: Vec<f64>,
}

impl TeacherDistribution {
    pub fn new(logprobs: Vec<f64>) -> Result<Self> {
        if logprobs.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "teacher distribution needs at least 2 classes, got {}",
                logprobs.len()
            )));
        }
        if let Some(v) = logprobs.iter().find(|v| !v.is_finite() || **v > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "teacher log-probability {v} is not a finite value <= 0"
            )));
        }
        Ok(Self { logprobs })
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn num_classes(&self) -> usize {
        self.logprobs.len()
    }

    /// Teacher label; ties resolve to the lowest class index.
    pub fn argmax(&self) -> ClassLabel {
        ClassLabel(argmax(&self.logprobs))
    }

    /// Softmax-renormalized probabilities. The stored values are never
    /// modified; fillers simply become (near) zero mass here.
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logprobs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub text: Option<String>,
    pub features: Vec<f64>,
    pub embedding: Vec<f64>,
    pub gold: ClassLabel,
    pub teacher: TeacherDistribution,
}

impl Instance {
    pub fn teacher_label(&self) -> ClassLabel {
        self.teacher.argmax()
    }

    pub fn teacher_correct(&self) -> bool {
        self.teacher_label() == self.gold
    }
}

/// Wire form of one JSONL line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    id: String,
    text: Option<String>,
    features: Vec<f64>,
    embedding: Vec<f64>,
    gold: usize,
    teacher_logprobs: Vec<f64>,
}

impl From<&Instance> for InstanceRecord {
    fn from(inst: &Instance) -> Self {
        Self {
            id: inst.id.clone(),
            text: inst.text.clone(),
            features: inst.features.clone(),
            embedding: inst.embedding.clone(),
            gold: inst.gold.0,
            teacher_logprobs: inst.teacher.logprobs.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub online: usize,
    pub test: usize,
}

/// Explicit online/test membership, used when a benchmark ships a fixed split
/// instead of a ratio.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedSplit {
    pub online_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub counts: SplitCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<FixedSplit>,
    /// Identifier of the encoder that produced the embeddings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<String>,
}

/// A validated, immutable dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub online: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Dataset {
    /// Builds a dataset from parts, filling in the manifest counts and checking
    /// every invariant.
    pub fn new(
        name: impl Into<String>,
        class_names: Vec<String>,
        online: Vec<Instance>,
        test: Vec<Instance>,
    ) -> Result<Self> {
        let first = online
            .first()
            .or_else(|| test.first())
            .ok_or_else(|| Error::Dataset("dataset has no instances".into()))?;
        let manifest = Manifest {
            name: name.into(),
            class_names,
            feature_dim: first.features.len(),
            embedding_dim: first.embedding.len(),
            counts: SplitCounts {
                online: online.len(),
                test: test.len(),
            },
            split: None,
            encoder: None,
        };
        let ds = Dataset {
            manifest,
            online,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.manifest.class_names
    }

    pub fn feature_dim(&self) -> usize {
        self.manifest.feature_dim
    }

    pub fn all_instances(&self) -> impl Iterator<Item = &Instance> {
        self.online.iter().chain(self.test.iter())
    }

    /// Checks every dataset invariant.
    pub fn validate(&self) -> Result<()> {
        validate_manifest(&self.manifest)?;
        let mut seen = HashSet::new();
        for inst in self.all_instances() {
            validate_instance(&self.manifest, inst).map_err(|message| Error::Instance {
                id: inst.id.clone(),
                message,
            })?;
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::Instance {
                    id: inst.id.clone(),
                    message: "duplicate id".into(),
                });
            }
        }
        self.check_counts()
    }

    fn check_counts(&self) -> Result<()> {
        let counts = self.manifest.counts;
        if counts.online != self.online.len() || counts.test != self.test.len() {
            return Err(Error::Dataset(format!(
                "manifest counts online={} test={} but files hold online={} test={}",
                counts.online,
                counts.test,
                self.online.len(),
                self.test.len()
            )));
        }
        if let Some(split) = &self.manifest.split {
            check_split_ids("online", &split.online_ids, &self.online)?;
            check_split_ids("test", &split.test_ids, &self.test)?;
        }
        Ok(())
    }

    /// Writes the canonical directory form.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = serde_json::to_string_pretty(&self.manifest)?;
        manifest.push('\n');
        write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
        write_atomic(&dir.join(ONLINE_FILE), &encode_jsonl(&self.online)?)?;
        write_atomic(&dir.join(TEST_FILE), &encode_jsonl(&self.test)?)?;
        Ok(())
    }
}

fn check_split_ids(part: &str, ids: &[String], instances: &[Instance]) -> Result<()> {
    let expected: HashSet<&str> = ids.iter().map(String::as_str).collect();
    let actual: HashSet<&str> = instances.iter().map(|i| i.id.as_str()).collect();
    if expected != actual || ids.len() != instances.len() {
        return Err(Error::Dataset(format!(
            "{part} file does not match the manifest's fixed split ids"
        )));
    }
    Ok(())
}

fn validate_manifest(m: &Manifest) -> Result<()> {
    if m.class_names.len() < 2 {
        return Err(Error::Dataset(format!(
            "need at least 2 classes, manifest lists {}",
            m.class_names.len()
        )));
    }
    let unique: HashSet<&str> = m.class_names.iter().map(String::as_str).collect();
    if unique.len() != m.class_names.len() {
        return Err(Error::Dataset("class_names contains duplicates".into()));
    }
    if m.feature_dim == 0 || m.embedding_dim == 0 {
        return Err(Error::Dataset(
            "feature_dim and embedding_dim must be positive".into(),
        ));
    }
    Ok(())
}

fn validate_instance(m: &Manifest, inst: &Instance) -> Result<(), String> {
    let k = m.class_names.len();
    if inst.teacher.num_classes() != k {
        return Err(format!(
            "teacher_logprobs has {} entries but the dataset has {k} classes",
            inst.teacher.num_classes()
        ));
    }
    if inst.gold.0 >= k {
        return Err(format!(
            "unknown class {} (dataset has {k} classes)",
            inst.gold.0
        ));
    }
    if inst.features.len() != m.feature_dim {
        return Err(format!(
            "features has length {} but feature_dim is {}",
            inst.features.len(),
            m.feature_dim
        ));
    }
    if inst.embedding.len() != m.embedding_dim {
        return Err(format!(
            "embedding has length {} but embedding_dim is {}",
            inst.embedding.len(),
            m.embedding_dim
        ));
    }
    if inst
        .features
        .iter()
        .chain(&inst.embedding)
        .any(|v| !v.is_finite())
    {
        return Err("non-finite value in features or embedding".into());
    }
    if norm(&inst.embedding) == 0.0 {
        return Err("embedding has zero norm".into());
    }
    Ok(())
}

fn encode_jsonl(instances: &[Instance]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut out, &InstanceRecord::from(inst))?;
        out.push(b'\n');
    }
    Ok(out)
}

fn parse_jsonl(path: &Path, manifest: &Manifest) -> Result<Vec<Instance>> {
    let content = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_err = |message: String| Error::Line {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: InstanceRecord =
            serde_json::from_str(line).map_err(|e| line_err(format!("malformed line: {e}")))?;
        let teacher = TeacherDistribution::new(rec.teacher_logprobs)
            .map_err(|e| line_err(format!("instance `{}`: {e}", rec.id)))?;
        let inst = Instance {
            id: rec.id,
            text: rec.text,
            features: rec.features,
            embedding: rec.embedding,
            gold: ClassLabel(rec.gold),
            teacher,
        };
        validate_instance(manifest, &inst)
            .map_err(|m| line_err(format!("instance `{}`: {m}", inst.id)))?;
        out.push(inst);
    }
    Ok(out)
}

/// Loads and fully validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest =
        serde_json::from_str(&read_to_string(&manifest_path)?).map_err(|e| Error::Line {
            path: manifest_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
    validate_manifest(&manifest)?;
    let online = parse_jsonl(&dir.join(ONLINE_FILE), &manifest)?;
    let test = parse_jsonl(&dir.join(TEST_FILE), &manifest)?;
    let ds = Dataset {
        manifest,
        online,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

/// How to size the online part of a split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSize {
    /// Fraction of instances that go online, in (0, 1).
    Ratio(f64),
    /// Exact online count, for benchmarks with a prescribed split.
    OnlineCount(usize),
}

/// Seeded online/test split. Both parts keep the input's relative order.
pub fn split_online_test(
    instances: Vec<Instance>,
    size: SplitSize,
    seed: u64,
) -> Result<(Vec<Instance>, Vec<Instance>)> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty list".into()));
    }
    let total = instances.len();
    let n_online = match size {
        SplitSize::Ratio(r) => {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "split ratio must lie in (0, 1), got {r}"
                )));
            }
            (r * total as f64).round() as usize
        }
        SplitSize::OnlineCount(c) => {
            if c > total {
                return Err(Error::InvalidArgument(format!(
                    "online count {c} exceeds {total} instances"
                )));
            }
            c
        }
    };
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_online = vec![false; total];
    for &i in &idx[..n_online] {
        is_online[i] = true;
    }
    let (mut online, mut test) = (Vec::with_capacity(n_online), Vec::new());
    for (inst, on) in instances.into_iter().zip(is_online) {
        if on {
            online.push(inst);
        } else {
            test.push(inst);
        }
    }
    Ok((online, test))
}

/// Seeded order in which the online instances are streamed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamOrder {
    pub seed: u64,
    pub order: Vec<usize>,
}

impl StreamOrder {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

pub fn make_stream(dataset: &Dataset, seed: u64) -> Result<StreamOrder> {
    if dataset.online.is_empty() {
        return Err(Error::Dataset("online portion is empty".into()));
    }
    let mut order: Vec<usize> = (0..dataset.online.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(StreamOrder { seed, order })
}

/// Teacher statistics over online ∪ test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub num_classes: usize,
    pub online: usize,
    pub test: usize,
    pub teacher_accuracy: f64,
    pub avg_margin: f64,
    /// Absent when the teacher is never wrong.
    pub avg_margin_when_wrong: Option<f64>,
    pub class_counts: Vec<(String, usize)>,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dataset                    {}", self.name)?;
        writeln!(
            f,
            "instances                  {} ({} online, {} test), {} classes",
            self.online + self.test,
            self.online,
            self.test,
            self.num_classes
        )?;
        writeln!(f, "teacher accuracy           {:.3}", self.teacher_accuracy)?;
        writeln!(f, "average margin             {:.2}", self.avg_margin)?;
        match self.avg_margin_when_wrong {
            Some(m) => writeln!(f, "average margin when wrong  {m:.2}")?,
            None => writeln!(f, "average margin when wrong  n/a (teacher never wrong)")?,
        }
        write!(f, "gold class counts         ")?;
        for (name, n) in &self.class_counts {
            write!(f, " {name}={n}")?;
        }
        writeln!(f)
    }
}

pub fn dataset_stats(dataset: &Dataset) -> DatasetStats {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut margin_sum = 0.0;
    let mut wrong_margin_sum = 0.0;
    let mut counts = vec![0usize; dataset.num_classes()];
    for inst in dataset.all_instances() {
        // Load-time validation guarantees K >= 2, so margin cannot fail.
        let m = margin(inst.teacher.logprobs()).expect("validated distribution");
        total += 1;
        margin_sum += m;
        counts[inst.gold.0] += 1;
        if inst.teacher_correct() {
            correct += 1;
        } else {
            wrong_margin_sum += m;
        }
    }
    let wrong = total - correct;
    let denom = total.max(1) as f64;
    DatasetStats {
        name: dataset.name().to_string(),
        num_classes: dataset.num_classes(),
        online: dataset.online.len(),
        test: dataset.test.len(),
        teacher_accuracy: correct as f64 / denom,
        avg_margin: margin_sum / denom,
        avg_margin_when_wrong: (wrong > 0).then(|| wrong_margin_sum / wrong as f64),
        class_counts: dataset.class_names().iter().cloned().zip(counts).collect(),
    }
}
