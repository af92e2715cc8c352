//! Pipeline data model and flat-file persistence.
//!
//! Everything the pipeline passes between stages lives here: benchmark
//! samples, knowledge components, KC-tagged samples, synthetic items, and
//! erroneous cases, together with JSONL load/save, target/eval splitting,
//! and question-level deduplication.
//!
//! All types are immutable after construction and cheap to clone; files are
//! read and written whole (no streaming).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors raised by corpus I/O and corpus-level operations.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation in {path} at line {line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("eval fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("split is degenerate: {eval} eval of {total} samples leaves one side empty")]
    DegenerateSplit { eval: usize, total: usize },
    #[error("invalid {type_name}: {message}")]
    Invalid { type_name: String, message: String },
}

/// Task family of a benchmark sample; selects prompt templates and grader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Math,
    Code,
    Exam,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Math => "math",
            TaskKind::Code => "code",
            TaskKind::Exam => "exam",
        }
    }
}

/// A benchmark item: question plus reference answer.
///
/// For `code` samples the reference answer holds the test program the
/// grader runs against a candidate solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub reference_answer: String,
    pub task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<BTreeMap<String, String>>,
}

/// An atomic skill or concept a question assesses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeComponent {
    pub kc_id: String,
    pub label: String,
}

/// Derive a stable KC id from a label (trim + case-fold, then hash).
pub fn kc_id_for_label(label: &str) -> String {
    let folded = label.trim().to_lowercase();
    let digest = Sha256::digest(folded.as_bytes());
    format!("kc-{}", hex::encode(&digest[..6]))
}

/// Ordered set of knowledge components; order defines Q-KC matrix columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCSet {
    kcs: Vec<KnowledgeComponent>,
}

impl KCSet {
    /// Build a KC set, enforcing unique ids and unique case-folded labels.
    pub fn new(kcs: Vec<KnowledgeComponent>) -> Result<Self, CorpusError> {
        let mut ids = HashSet::new();
        let mut folded = HashSet::new();
        for kc in &kcs {
            if kc.label.trim().is_empty() {
                return Err(invalid("KCSet", "empty KC label"));
            }
            if !ids.insert(kc.kc_id.clone()) {
                return Err(invalid("KCSet", format!("duplicate kc_id {}", kc.kc_id)));
            }
            if !folded.insert(kc.label.trim().to_lowercase()) {
                return Err(invalid(
                    "KCSet",
                    format!("duplicate label after folding: {}", kc.label),
                ));
            }
        }
        Ok(Self { kcs })
    }

    /// Build from labels in first-seen order, deriving ids; duplicate
    /// (case-folded) labels collapse to the first occurrence.
    pub fn from_labels<I, S>(labels: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut kcs = Vec::new();
        for label in labels {
            let label = label.as_ref().trim().to_string();
            if label.is_empty() {
                continue;
            }
            if seen.insert(label.to_lowercase()) {
                kcs.push(KnowledgeComponent {
                    kc_id: kc_id_for_label(&label),
                    label,
                });
            }
        }
        if kcs.is_empty() {
            return Err(CorpusError::EmptyInput("no KC labels".into()));
        }
        Self::new(kcs)
    }

    pub fn len(&self) -> usize {
        self.kcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kcs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &KnowledgeComponent> {
        self.kcs.iter()
    }

    pub fn contains_id(&self, kc_id: &str) -> bool {
        self.kcs.iter().any(|kc| kc.kc_id == kc_id)
    }

    pub fn by_id(&self, kc_id: &str) -> Option<&KnowledgeComponent> {
        self.kcs.iter().find(|kc| kc.kc_id == kc_id)
    }

    /// Case-fold label lookup; annotation matches tags against this.
    pub fn by_label(&self, label: &str) -> Option<&KnowledgeComponent> {
        let folded = label.trim().to_lowercase();
        self.kcs
            .iter()
            .find(|kc| kc.label.trim().to_lowercase() == folded)
    }

    pub fn label_for(&self, kc_id: &str) -> Option<&str> {
        self.by_id(kc_id).map(|kc| kc.label.as_str())
    }

    /// Resolve ids to labels, erroring on ids outside the set.
    pub fn labels_for(&self, kc_ids: &BTreeSet<String>) -> Result<Vec<String>, CorpusError> {
        kc_ids
            .iter()
            .map(|id| {
                self.label_for(id)
                    .map(str::to_string)
                    .ok_or_else(|| invalid("KCSet", format!("unknown kc_id {id}")))
            })
            .collect()
    }

    /// Load from a JSON document `{"kcs": [{"kc_id", "label"}]}`.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let raw: KCSet = serde_json::from_str(&text).map_err(|e| CorpusError::Schema {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::new(raw.kcs)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let text = serde_json::to_string_pretty(self).expect("KCSet serializes");
        fs::write(path, text + "\n").map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// A sample annotated with the KC subset it assesses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedSample {
    #[serde(flatten)]
    pub sample: Sample,
    #[serde(rename = "kcs")]
    pub kc_ids: BTreeSet<String>,
}

/// Synthesis strategy recorded in provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Global,
    FineGrained,
    Rewrite,
    Fusion,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Global => "global",
            Strategy::FineGrained => "fine_grained",
            Strategy::Rewrite => "rewrite",
            Strategy::Fusion => "fusion",
        }
    }
}

/// How a synthetic item came to be: strategy, parents, and call parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: Strategy,
    pub parent_ids: Vec<String>,
    #[serde(default)]
    pub generation_params: BTreeMap<String, String>,
}

/// A generated question/answer pair with KC tags and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticItem {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(rename = "kcs")]
    pub kc_ids: BTreeSet<String>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_score: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cds_score: Option<f64>,
}

impl SyntheticItem {
    /// Validate the strategy/parent invariants.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.kc_ids.is_empty() {
            return Err(invalid("SyntheticItem", format!("{}: empty kc set", self.id)));
        }
        let parents = self.provenance.parent_ids.len();
        match self.provenance.strategy {
            Strategy::Rewrite if parents != 1 => Err(invalid(
                "SyntheticItem",
                format!("{}: rewrite requires exactly one parent, got {parents}", self.id),
            )),
            Strategy::Fusion if parents != 2 => Err(invalid(
                "SyntheticItem",
                format!("{}: fusion requires exactly two parents, got {parents}", self.id),
            )),
            _ => Ok(()),
        }
    }
}

/// Content-hash id for pipeline-generated items; reruns with identical
/// generations reproduce identical ids.
pub fn synthetic_id(question: &str, strategy: Strategy, parent_ids: &[String]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(question.as_bytes());
    hasher.update([0x1f]);
    hasher.update(strategy.as_str().as_bytes());
    hasher.update([0x1f]);
    for parent in parent_ids {
        hasher.update(parent.as_bytes());
        hasher.update([0x1e]);
    }
    format!("syn-{}", hex::encode(&hasher.finalize()[..8]))
}

/// An erroneous case: question, wrong response, and the question's KC set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCase {
    pub sample_id: String,
    pub question: String,
    pub erroneous_response: String,
    #[serde(rename = "kcs")]
    pub kc_ids: BTreeSet<String>,
}

/// Record type that can live in a JSONL corpus file.
///
/// `validate` enforces per-record invariants beyond what serde checks;
/// `dup_key` is the field that must be unique across the file, if any.
pub trait JsonlRecord: Serialize + for<'de> Deserialize<'de> {
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
    fn dup_key(&self) -> Option<&str> {
        None
    }
}

impl JsonlRecord for Sample {
    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.question.is_empty() {
            return Err("empty question".into());
        }
        Ok(())
    }
    fn dup_key(&self) -> Option<&str> {
        Some(&self.id)
    }
}

impl JsonlRecord for TaggedSample {
    fn validate(&self) -> Result<(), String> {
        self.sample.validate()?;
        if self.kc_ids.is_empty() {
            return Err("empty kcs".into());
        }
        Ok(())
    }
    fn dup_key(&self) -> Option<&str> {
        Some(&self.sample.id)
    }
}

impl JsonlRecord for SyntheticItem {
    fn validate(&self) -> Result<(), String> {
        SyntheticItem::validate(self).map_err(|e| e.to_string())
    }
    fn dup_key(&self) -> Option<&str> {
        Some(&self.id)
    }
}

impl JsonlRecord for ErrorCase {
    fn validate(&self) -> Result<(), String> {
        if self.erroneous_response.is_empty() {
            return Err("empty erroneous_response".into());
        }
        if self.kc_ids.is_empty() {
            return Err("empty kcs".into());
        }
        Ok(())
    }
}

/// Load a JSONL file of records, rejecting schema violations with their
/// line number. Whitespace-only lines are skipped.
pub fn load_jsonl<T: JsonlRecord>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen_keys: HashSet<String> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate().map_err(|message| CorpusError::Schema {
            path: path.to_path_buf(),
            line: line_no,
            message,
        })?;
        if let Some(key) = record.dup_key() {
            if !seen_keys.insert(key.to_string()) {
                return Err(CorpusError::Schema {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("duplicate id {key}"),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Save records as JSONL, one record per line, in order.
pub fn save_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut writer = std::io::BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(writer, "{line}").map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    writer.flush().map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Split samples into (target, eval) by seeded shuffle then cut.
///
/// `|eval| = round(eval_fraction * n)`; both sides must stay nonempty.
/// Relative input order is preserved within each side.
pub fn split_target_eval<T>(
    samples: Vec<T>,
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), CorpusError> {
    if samples.is_empty() {
        return Err(CorpusError::EmptyInput("split_target_eval".into()));
    }
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(CorpusError::InvalidFraction(eval_fraction));
    }
    let n = samples.len();
    let eval_count = (eval_fraction * n as f64).round() as usize;
    if eval_count == 0 || eval_count >= n {
        return Err(CorpusError::DegenerateSplit {
            eval: eval_count,
            total: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let eval_set: HashSet<usize> = indices[..eval_count].iter().copied().collect();
    let mut target = Vec::with_capacity(n - eval_count);
    let mut eval = Vec::with_capacity(eval_count);
    for (i, sample) in samples.into_iter().enumerate() {
        if eval_set.contains(&i) {
            eval.push(sample);
        } else {
            target.push(sample);
        }
    }
    Ok((target, eval))
}

/// Derive a named sub-seed from the run seed; distinct salts give
/// statistically independent streams.
pub fn derive_seed(seed: u64, salt: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(salt.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// RNG for a named stage, seeded from the run seed and the stage name so
/// stages never share a stream.
pub fn salted_rng(seed: u64, salt: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(salt.as_bytes());
    let digest = hasher.finalize();
    ChaCha8Rng::from_seed(digest.into())
}

/// Canonical question text for identity: trim, collapse whitespace runs
/// to single spaces, case-fold.
pub fn normalize_question(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Anything keyed by question text for deduplication.
pub trait HasQuestion {
    fn question_text(&self) -> &str;
}

impl HasQuestion for Sample {
    fn question_text(&self) -> &str {
        &self.question
    }
}

impl HasQuestion for TaggedSample {
    fn question_text(&self) -> &str {
        &self.sample.question
    }
}

impl HasQuestion for SyntheticItem {
    fn question_text(&self) -> &str {
        &self.question
    }
}

/// Keep the first occurrence of each normalized question; order stable.
pub fn dedupe_by_question<T: HasQuestion>(items: Vec<T>) -> Vec<T> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|item| seen.insert(normalize_question(item.question_text())))
        .collect()
}

fn invalid(type_name: &str, message: impl Into<String>) -> CorpusError {
    CorpusError::Invalid {
        type_name: type_name.to_string(),
        message: message.into(),
    }
}
