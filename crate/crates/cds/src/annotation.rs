//! Two-stage KC annotation and the question-KC matrix.
//!
//! Stage one tags every question freely and consolidates the raw tags
//! into a canonical [`KCSet`]; stage two re-tags each question against
//! that closed set. Questions that still can't be tagged are excluded and
//! reported, never silently dropped. The tagged corpus then becomes a
//! binary question-by-KC matrix whose columns follow KC-set order.
//!
//! Per-question model or parse failures land in the outcome's failure
//! list; only systemic problems (bad template, consolidation failure)
//! abort an operation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, KCSet, KnowledgeComponent, Sample, TaggedSample};
use crate::gateway::templates::{template_id, TemplateError, TemplateStore};
use crate::gateway::{
    parallel_map, ChatRequest, Gateway, GatewayError, Message, SamplingParams,
};

const WORKERS: usize = 8;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("consolidation call failed: {0}")]
    Llm(#[from] GatewayError),
    #[error("consolidation reply had no usable KCs line")]
    ConsolidationParse,
    #[error("no raw annotations to consolidate")]
    EmptyInput,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("sample {sample_id} is tagged with unknown kc {kc_id}")]
    UnknownKc { sample_id: String, kc_id: String },
}

/// Parse a `<prefix> a; b; c` line out of a completion: first matching
/// line wins, items are trimmed, empties dropped. `None` when no line
/// matches or the list is empty.
pub fn parse_labeled_list(text: &str, prefix: &str) -> Option<Vec<String>> {
    for line in text.lines() {
        let line = line.trim_start();
        if let Some(rest) = line.strip_prefix(prefix) {
            let items: Vec<String> = rest
                .split(';')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            return if items.is_empty() { None } else { Some(items) };
        }
    }
    None
}

/// Free-form tags proposed for one sample in stage one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub sample_id: String,
    pub tags: Vec<String>,
}

/// Why a sample produced no annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFailure {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct CoarseOutcome {
    pub annotations: Vec<RawAnnotation>,
    pub failures: Vec<AnnotationFailure>,
}

/// Stage one: ask the model for free-form KC tags on every sample.
pub fn coarse_annotate(
    samples: &[Sample],
    exemplar_kcs: &[String],
    gateway: &Gateway,
    templates: &TemplateStore,
) -> Result<CoarseOutcome, AnnotationError> {
    let exemplars = if exemplar_kcs.is_empty() {
        "(none provided)".to_string()
    } else {
        exemplar_kcs.join("; ")
    };
    // render everything up front so template problems abort before any call
    let prompts: Vec<String> = samples
        .iter()
        .map(|sample| {
            templates.render(
                &template_id("annotate_stage1", sample.task_kind),
                &BTreeMap::from([
                    ("question", sample.question.clone()),
                    ("exemplar_kcs", exemplars.clone()),
                ]),
            )
        })
        .collect::<Result<_, _>>()?;

    let results = parallel_map(&prompts, WORKERS, |i, prompt| {
        annotate_one(&samples[i].id, prompt, gateway)
    });

    let mut outcome = CoarseOutcome::default();
    for result in results {
        match result {
            Ok(annotation) => outcome.annotations.push(annotation),
            Err(failure) => outcome.failures.push(failure),
        }
    }
    Ok(outcome)
}

fn annotate_one(
    sample_id: &str,
    prompt: &str,
    gateway: &Gateway,
) -> Result<RawAnnotation, AnnotationFailure> {
    let request = ChatRequest::new(
        vec![Message::user(prompt)],
        SamplingParams::annotation(),
        1,
    )
    .map_err(|e| AnnotationFailure {
        sample_id: sample_id.to_string(),
        reason: format!("llm-failure: {e}"),
    })?;
    let response = gateway.complete(&request).map_err(|e| AnnotationFailure {
        sample_id: sample_id.to_string(),
        reason: format!("llm-failure: {e}"),
    })?;
    match parse_labeled_list(&response.completions[0], "KCs:") {
        Some(tags) => Ok(RawAnnotation { sample_id: sample_id.to_string(), tags }),
        None => Err(AnnotationFailure {
            sample_id: sample_id.to_string(),
            reason: "parse-failure: no KCs line".into(),
        }),
    }
}

/// Hand correction applied to the consolidated KC set, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ManualEdit {
    Add { label: String },
    Remove { label: String },
    /// Fold one label into another: `from` disappears, `into` is kept
    /// (added if absent).
    Merge { from: String, into: String },
}

/// Merge raw stage-one tags into a canonical KC set via one
/// consolidation call, then apply manual edits.
pub fn consolidate_kc_set(
    annotations: &[RawAnnotation],
    edits: &[ManualEdit],
    gateway: &Gateway,
    templates: &TemplateStore,
) -> Result<KCSet, AnnotationError> {
    // unique raw tags, first-seen order, case-fold identity
    let mut seen = BTreeSet::new();
    let mut unique = Vec::new();
    for annotation in annotations {
        for tag in &annotation.tags {
            let tag = tag.trim();
            if tag.is_empty() {
                continue;
            }
            if seen.insert(tag.to_lowercase()) {
                unique.push(tag.to_string());
            }
        }
    }
    if unique.is_empty() {
        return Err(AnnotationError::EmptyInput);
    }

    let prompt = templates.render(
        "consolidate_kcs",
        &BTreeMap::from([("tags", unique.join("; "))]),
    )?;
    let request = ChatRequest::new(vec![Message::user(prompt)], SamplingParams::annotation(), 1)
        .map_err(AnnotationError::Llm)?;
    let response = gateway.complete(&request)?;
    let labels = parse_labeled_list(&response.completions[0], "KCs:")
        .ok_or(AnnotationError::ConsolidationParse)?;

    let mut final_labels: Vec<String> = Vec::new();
    let mut folded: BTreeSet<String> = BTreeSet::new();
    for label in labels {
        if folded.insert(label.to_lowercase()) {
            final_labels.push(label);
        }
    }
    for edit in edits {
        match edit {
            ManualEdit::Add { label } => {
                if folded.insert(label.trim().to_lowercase()) {
                    final_labels.push(label.trim().to_string());
                }
            }
            ManualEdit::Remove { label } => {
                let key = label.trim().to_lowercase();
                if folded.remove(&key) {
                    final_labels.retain(|l| l.to_lowercase() != key);
                }
            }
            ManualEdit::Merge { from, into } => {
                let from_key = from.trim().to_lowercase();
                if folded.remove(&from_key) {
                    final_labels.retain(|l| l.to_lowercase() != from_key);
                }
                if folded.insert(into.trim().to_lowercase()) {
                    final_labels.push(into.trim().to_string());
                }
            }
        }
    }
    Ok(KCSet::from_labels(final_labels)?)
}

/// A sample excluded from the tagged corpus, with the reason; mirrors
/// one line of the exclusion report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct ConstrainedOutcome {
    pub tagged: Vec<TaggedSample>,
    pub exclusions: Vec<Exclusion>,
    /// Samples that needed the corrective follow-up.
    pub reprompted: usize,
    /// Tags discarded for being outside the KC set.
    pub dropped_tags: usize,
}

/// Stage two: tag each sample against the closed KC set. Invalid tags get
/// one corrective re-prompt and are dropped afterwards; samples with no
/// valid tag at all are excluded.
pub fn constrained_annotate(
    samples: &[Sample],
    kc_set: &KCSet,
    gateway: &Gateway,
    templates: &TemplateStore,
) -> Result<ConstrainedOutcome, AnnotationError> {
    if kc_set.is_empty() {
        return Err(AnnotationError::EmptyInput);
    }
    let allowed = kc_set
        .iter()
        .map(|kc| kc.label.clone())
        .collect::<Vec<_>>()
        .join("; ");
    let prompts: Vec<String> = samples
        .iter()
        .map(|sample| {
            templates.render(
                &template_id("annotate_stage2", sample.task_kind),
                &BTreeMap::from([
                    ("question", sample.question.clone()),
                    ("allowed_kcs", allowed.clone()),
                ]),
            )
        })
        .collect::<Result<_, _>>()?;

    let results = parallel_map(&prompts, WORKERS, |i, prompt| {
        constrain_one(&samples[i], prompt, kc_set, &allowed, gateway)
    });

    let mut outcome = ConstrainedOutcome::default();
    for result in results {
        match result {
            Ok(one) => {
                outcome.reprompted += one.reprompted as usize;
                outcome.dropped_tags += one.dropped_tags;
                outcome.tagged.push(TaggedSample {
                    sample: one.sample,
                    kc_ids: one.kc_ids,
                });
            }
            Err(exclusion) => outcome.exclusions.push(exclusion),
        }
    }
    Ok(outcome)
}

struct ConstrainedOne {
    sample: Sample,
    kc_ids: BTreeSet<String>,
    reprompted: bool,
    dropped_tags: usize,
}

fn constrain_one(
    sample: &Sample,
    prompt: &str,
    kc_set: &KCSet,
    allowed: &str,
    gateway: &Gateway,
) -> Result<ConstrainedOne, Exclusion> {
    let excluded = |reason: String| Exclusion { sample_id: sample.id.clone(), reason };
    let ask = |messages: Vec<Message>| -> Result<String, Exclusion> {
        let request = ChatRequest::new(messages, SamplingParams::annotation(), 1)
            .map_err(|e| excluded(format!("llm-failure: {e}")))?;
        let response = gateway
            .complete(&request)
            .map_err(|e| excluded(format!("llm-failure: {e}")))?;
        Ok(response.completions[0].clone())
    };

    let first = ask(vec![Message::user(prompt)])?;
    let (mut valid, mut invalid) = split_tags(&first, kc_set);

    let mut reprompted = false;
    let mut dropped_tags = 0;
    let needs_retry = valid.is_empty() || !invalid.is_empty();
    if needs_retry {
        reprompted = true;
        let corrective = if invalid.is_empty() {
            format!(
                "Your reply did not contain a usable KCs line. Reply with exactly one line \
                 in the format `KCs: <component>; <component>` using only these labels: {allowed}"
            )
        } else {
            format!(
                "These tags are not in the allowed list: {}. Reply again with one `KCs:` line \
                 using only these labels verbatim: {allowed}",
                invalid.join("; ")
            )
        };
        let second = ask(vec![
            Message::user(prompt),
            Message::assistant(first),
            Message::user(corrective),
        ])?;
        let (retry_valid, retry_invalid) = split_tags(&second, kc_set);
        if !retry_valid.is_empty() {
            dropped_tags = retry_invalid.len();
            valid = retry_valid;
            invalid = retry_invalid;
        } else {
            // keep the first attempt's valid subset, if any
            dropped_tags = invalid.len();
        }
    }

    if valid.is_empty() {
        let reason = if invalid.is_empty() {
            "parse-failure: no KCs line after re-prompt".to_string()
        } else {
            format!(
                "no-valid-kcs: all tags outside the KC set after re-prompt ({})",
                invalid.join("; ")
            )
        };
        return Err(excluded(reason));
    }
    Ok(ConstrainedOne { sample: sample.clone(), kc_ids: valid, reprompted, dropped_tags })
}

/// Resolve a completion's tags against the KC set: (valid ids, invalid labels).
fn split_tags(completion: &str, kc_set: &KCSet) -> (BTreeSet<String>, Vec<String>) {
    let mut valid = BTreeSet::new();
    let mut invalid = Vec::new();
    let Some(tags) = parse_labeled_list(completion, "KCs:") else {
        return (valid, invalid);
    };
    for tag in tags {
        match kc_set.by_label(&tag) {
            Some(kc) => {
                valid.insert(kc.kc_id.clone());
            }
            None => invalid.push(tag),
        }
    }
    (valid, invalid)
}

/// Binary question-by-KC incidence matrix. Rows follow the tagged-corpus
/// order, columns follow KC-set order.
#[derive(Debug, Clone, PartialEq)]
pub struct QKCMatrix {
    row_ids: Vec<String>,
    cols: Vec<KnowledgeComponent>,
    data: Vec<u8>,
}

impl QKCMatrix {
    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.cols.len()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols.len() + col] == 1
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_kcs(&self) -> &[KnowledgeComponent] {
        &self.cols
    }

    pub fn col_index(&self, kc_id: &str) -> Option<usize> {
        self.cols.iter().position(|kc| kc.kc_id == kc_id)
    }

    /// Number of questions tagged with column `col`.
    pub fn col_sum(&self, col: usize) -> usize {
        (0..self.rows()).filter(|&r| self.get(r, col)).count()
    }

    /// Number of KCs on question `row`.
    pub fn row_sum(&self, row: usize) -> usize {
        (0..self.cols()).filter(|&c| self.get(row, c)).count()
    }
}

/// Build the incidence matrix for a tagged corpus over a KC set.
pub fn build_qkc_matrix(
    tagged: &[TaggedSample],
    kc_set: &KCSet,
) -> Result<QKCMatrix, AnnotationError> {
    let cols: Vec<KnowledgeComponent> = kc_set.iter().cloned().collect();
    let index: BTreeMap<&str, usize> = cols
        .iter()
        .enumerate()
        .map(|(i, kc)| (kc.kc_id.as_str(), i))
        .collect();
    let mut data = vec![0u8; tagged.len() * cols.len()];
    let mut row_ids = Vec::with_capacity(tagged.len());
    for (r, sample) in tagged.iter().enumerate() {
        for kc_id in &sample.kc_ids {
            let Some(&c) = index.get(kc_id.as_str()) else {
                return Err(AnnotationError::UnknownKc {
                    sample_id: sample.sample.id.clone(),
                    kc_id: kc_id.clone(),
                });
            };
            data[r * cols.len() + c] = 1;
        }
        row_ids.push(sample.sample.id.clone());
    }
    Ok(QKCMatrix { row_ids, cols, data })
}
