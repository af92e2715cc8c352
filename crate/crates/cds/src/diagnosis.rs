//! KC-level diagnosis of a student model.
//!
//! From the question-KC matrix and per-question correctness we compute,
//! for every KC, the accuracy over questions tagged with it and the
//! fraction of the corpus that touches it. A KC is weak when either
//! statistic is at or below its threshold — low accuracy means the model
//! gets it wrong, low frequency means the corpus barely exercises it, and
//! both deserve targeted synthesis. Individual wrong answers additionally
//! get a free-text diagnosis naming the weak KCs behind the mistake.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{parse_labeled_list, QKCMatrix};
use crate::corpus::{ErrorCase, JsonlRecord, KCSet, TaskKind};
use crate::gateway::templates::{template_id, TemplateError, TemplateStore};
use crate::gateway::{parallel_map, ChatRequest, Gateway, GatewayError, Message, SamplingParams};

const WORKERS: usize = 8;

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("matrix has {rows} rows but correctness has {correctness} entries")]
    DimensionMismatch { rows: usize, correctness: usize },
    #[error("matrix has no rows")]
    EmptyMatrix,
    #[error("threshold {name} = {value} is outside [0, 1]")]
    InvalidThreshold { name: &'static str, value: f64 },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("diagnosis call failed: {0}")]
    Llm(#[from] GatewayError),
    #[error("diagnosis for {sample_id} unusable: {what}")]
    ParseFailure { sample_id: String, what: String },
}

/// Per-KC accuracy: correct tagged questions over all tagged questions.
/// `None` for KCs no question is tagged with.
pub fn kc_accuracy(
    matrix: &QKCMatrix,
    correctness: &[bool],
) -> Result<Vec<Option<f64>>, DiagnosisError> {
    if matrix.rows() != correctness.len() {
        return Err(DiagnosisError::DimensionMismatch {
            rows: matrix.rows(),
            correctness: correctness.len(),
        });
    }
    Ok((0..matrix.cols())
        .map(|c| {
            let tagged = matrix.col_sum(c);
            if tagged == 0 {
                return None;
            }
            let correct = (0..matrix.rows())
                .filter(|&r| matrix.get(r, c) && correctness[r])
                .count();
            Some(correct as f64 / tagged as f64)
        })
        .collect())
}

/// Per-KC frequency: fraction of corpus questions tagged with the KC.
pub fn kc_frequency(matrix: &QKCMatrix) -> Result<Vec<f64>, DiagnosisError> {
    if matrix.rows() == 0 {
        return Err(DiagnosisError::EmptyMatrix);
    }
    let n = matrix.rows() as f64;
    Ok((0..matrix.cols()).map(|c| matrix.col_sum(c) as f64 / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub delta_a: f64,
    pub delta_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCProfileEntry {
    pub kc_id: String,
    pub label: String,
    /// `None` when no question is tagged with this KC.
    pub accuracy: Option<f64>,
    pub frequency: f64,
    pub tagged_count: usize,
    pub correct_count: usize,
}

/// The diagnosed mastery profile of one student model over one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCProfile {
    pub student_model_id: String,
    /// Thresholds used for the weak-KC cut, once decided.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Thresholds>,
    pub entries: Vec<KCProfileEntry>,
}

/// Assemble the profile; entries follow matrix column (KC set) order.
pub fn build_profile(
    matrix: &QKCMatrix,
    correctness: &[bool],
    student_model_id: &str,
) -> Result<KCProfile, DiagnosisError> {
    if matrix.rows() == 0 {
        return Err(DiagnosisError::EmptyMatrix);
    }
    let accuracy = kc_accuracy(matrix, correctness)?;
    let frequency = kc_frequency(matrix)?;
    let entries = matrix
        .col_kcs()
        .iter()
        .enumerate()
        .map(|(c, kc)| {
            let tagged_count = matrix.col_sum(c);
            let correct_count = (0..matrix.rows())
                .filter(|&r| matrix.get(r, c) && correctness[r])
                .count();
            KCProfileEntry {
                kc_id: kc.kc_id.clone(),
                label: kc.label.clone(),
                accuracy: accuracy[c],
                frequency: frequency[c],
                tagged_count,
                correct_count,
            }
        })
        .collect();
    Ok(KCProfile {
        student_model_id: student_model_id.to_string(),
        thresholds: None,
        entries,
    })
}

/// KCs weak by the thresholded rule: accuracy at or below `delta_a`
/// (undefined accuracy counts as weak) or frequency at or below `delta_f`.
pub fn identify_weak_kcs(
    profile: &KCProfile,
    delta_a: f64,
    delta_f: f64,
) -> Result<BTreeSet<String>, DiagnosisError> {
    for (name, value) in [("delta_a", delta_a), ("delta_f", delta_f)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(DiagnosisError::InvalidThreshold { name, value });
        }
    }
    Ok(profile
        .entries
        .iter()
        .filter(|e| e.accuracy.map_or(true, |a| a <= delta_a) || e.frequency <= delta_f)
        .map(|e| e.kc_id.clone())
        .collect())
}

/// One erroneous case with its model-written diagnosis attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub error_case: ErrorCase,
    /// Free-text analysis of what went wrong.
    pub p_diag: String,
    /// Weak KCs named by the diagnosis, resolved against the KC set.
    #[serde(rename = "weak_kcs")]
    pub weak_kc_ids: BTreeSet<String>,
    /// Labels the diagnosis named that resolve to no known KC; kept
    /// verbatim for the audit trail.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unmatched_weak_labels: Vec<String>,
}

impl JsonlRecord for DiagnosticRecord {
    fn validate(&self) -> Result<(), String> {
        self.error_case.validate()?;
        if self.p_diag.trim().is_empty() {
            return Err("empty p_diag".into());
        }
        Ok(())
    }
    fn dup_key(&self) -> Option<&str> {
        None
    }
}

/// Diagnose one erroneous case: why the response is wrong, and which KCs
/// the mistake exposes.
pub fn diagnose_error(
    case: &ErrorCase,
    kc_set: &KCSet,
    task_kind: TaskKind,
    gateway: &Gateway,
    templates: &TemplateStore,
) -> Result<DiagnosticRecord, DiagnosisError> {
    let allowed = kc_set
        .iter()
        .map(|kc| kc.label.clone())
        .collect::<Vec<_>>()
        .join("; ");
    let prompt = templates.render(
        &template_id("diagnose", task_kind),
        &BTreeMap::from([
            ("question", case.question.clone()),
            ("erroneous_response", case.erroneous_response.clone()),
            ("allowed_kcs", allowed),
        ]),
    )?;
    let request = ChatRequest::new(vec![Message::user(prompt)], SamplingParams::diagnosis(), 1)
        .map_err(DiagnosisError::Llm)?;
    let completion = gateway.complete(&request)?.completions[0].clone();
    parse_diagnosis(case, &completion, kc_set)
}

fn parse_diagnosis(
    case: &ErrorCase,
    completion: &str,
    kc_set: &KCSet,
) -> Result<DiagnosticRecord, DiagnosisError> {
    const MARKER: &str = "Weak KCs:";
    let Some(marker_pos) = completion.find(MARKER) else {
        return Err(DiagnosisError::ParseFailure {
            sample_id: case.sample_id.clone(),
            what: "no Weak KCs line".into(),
        });
    };
    let p_diag = completion[..marker_pos].trim().to_string();
    if p_diag.is_empty() {
        return Err(DiagnosisError::ParseFailure {
            sample_id: case.sample_id.clone(),
            what: "diagnosis text is empty".into(),
        });
    }
    let labels = parse_labeled_list(&completion[marker_pos..], MARKER).ok_or_else(|| {
        DiagnosisError::ParseFailure {
            sample_id: case.sample_id.clone(),
            what: "Weak KCs line is empty".into(),
        }
    })?;
    let mut weak_kc_ids = BTreeSet::new();
    let mut unmatched = Vec::new();
    for label in labels {
        match kc_set.by_label(&label) {
            Some(kc) => {
                weak_kc_ids.insert(kc.kc_id.clone());
            }
            None => unmatched.push(label),
        }
    }
    Ok(DiagnosticRecord {
        error_case: case.clone(),
        p_diag,
        weak_kc_ids,
        unmatched_weak_labels: unmatched,
    })
}

/// Per-case failure from a batch diagnosis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisFailure {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct DiagnosisOutcome {
    pub records: Vec<DiagnosticRecord>,
    pub failures: Vec<DiagnosisFailure>,
}

/// Diagnose every case, keeping per-case failures out of the record list.
pub fn diagnose_errors(
    cases: &[ErrorCase],
    kc_set: &KCSet,
    task_kind: TaskKind,
    gateway: &Gateway,
    templates: &TemplateStore,
) -> Result<DiagnosisOutcome, DiagnosisError> {
    // surface template problems once, up front
    templates.get(&template_id("diagnose", task_kind))?;
    let results = parallel_map(cases, WORKERS, |_, case| {
        diagnose_error(case, kc_set, task_kind, gateway, templates)
    });
    let mut outcome = DiagnosisOutcome::default();
    for (case, result) in cases.iter().zip(results) {
        match result {
            Ok(record) => outcome.records.push(record),
            Err(e) => outcome.failures.push(DiagnosisFailure {
                sample_id: case.sample_id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(outcome)
}
