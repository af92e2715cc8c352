//! End-to-end orchestration: configuration, stage commands, artifacts.
//!
//! Each stage command reads its inputs from the output directory (or the
//! configured corpus paths), calls the corresponding library operations,
//! and writes its artifacts plus a small JSON report. Stages are
//! individually re-runnable: given identical inputs, fixtures, and seed,
//! a rerun produces byte-identical artifacts, and running the six stages
//! one by one matches a single `run_all`.
//!
//! All randomness flows from the one top-level seed through stage-salted
//! derived seeds, so adding a stage never perturbs another stage's
//! sampling. Artifacts contain no timestamps or absolute paths.

pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{self, build_qkc_matrix, ManualEdit};
use crate::corpus::{
    dedupe_by_question, derive_seed, load_jsonl, save_jsonl, ErrorCase, JsonlRecord, KCSet,
    KnowledgeComponent, Sample, SyntheticItem, TaggedSample, TaskKind,
};
use crate::diagnosis::{self, DiagnosisFailure, DiagnosticRecord, KCProfile, Thresholds};
use crate::evaluation::{self, CodeRunner, EvaluationRecord};
use crate::gateway::http::{HttpChatClient, DEFAULT_TIMEOUT};
use crate::gateway::replay::ReplayClient;
use crate::gateway::templates::TemplateStore;
use crate::gateway::{ChatClient, Gateway};
use crate::selection::{self, ScoreStats, SelectionParams};
use crate::synthesis::{
    self, AugmentRejection, FusionOutcome, RewriteOutcome, SynthesisConfig, SynthesisError,
    SynthesisFailure,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {field}: {message}")]
    ConfigInvalid { field: String, message: String },
    #[error("{stage}: missing input {path}")]
    MissingInput { stage: &'static str, path: PathBuf },
    #[error("nothing to report on: missing artifact {path}")]
    MissingArtifacts { path: PathBuf },
    #[error("{stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    /// Process exit code: 2 config error, 3 missing input, 4 stage failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::ConfigInvalid { .. } => 2,
            Self::MissingInput { .. } | Self::MissingArtifacts { .. } => 3,
            Self::Stage { .. } => 4,
        }
    }

    fn stage(stage: &'static str, err: impl std::fmt::Display) -> Self {
        Self::Stage { stage, message: err.to_string() }
    }
}

// ---- configuration -------------------------------------------------------

fn default_key_env() -> String {
    "CDS_API_KEY".into()
}

/// One chat-completion endpoint. The API key is read from the named
/// environment variable; endpoints that need no key may leave it unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    /// The annotator / diagnoser / synthesizer / scorer.
    pub advanced_model: EndpointConfig,
    /// The model being diagnosed.
    pub student_model: EndpointConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Diagnosis corpus: JSONL of samples the pipeline works over.
    pub target: PathBuf,
    /// Optional held-out split. Validated but never consumed; it exists so
    /// a run records which data was reserved for after-training comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
    /// Optional pre-built KC set. When present, the annotate stage skips
    /// KC derivation and tags directly against it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kc_set: Option<PathBuf>,
    /// Optional directory of prompt-template overrides (id.txt files);
    /// anything not overridden falls back to the built-in templates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    /// Optional directory of recorded fixtures; when set, every model
    /// call is answered from disk and no network is touched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures_dir: Option<PathBuf>,
    /// Where artifacts land. Created on demand.
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationSection {
    /// Example KC labels shown to the annotator to calibrate granularity.
    pub exemplar_kcs: Vec<String>,
    /// Curation edits applied to the consolidated KC set, in order.
    pub manual_edits: Vec<ManualEdit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosisSection {
    /// A KC at or below this accuracy is weak.
    pub delta_a: f64,
    /// A KC at or below this corpus frequency is weak.
    pub delta_f: f64,
}

impl Default for DiagnosisSection {
    fn default() -> Self {
        Self { delta_a: 0.6, delta_f: 0.05 }
    }
}

/// Synthesis knobs as they appear in the config file. The augmentation
/// seed is not configured here: it derives from the top-level seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSection {
    pub n_per_weak_kc: usize,
    pub n_samples_per_call: u32,
    pub p_rewrite: f64,
    pub p_fusion: f64,
    pub max_kcs_per_item: usize,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        let c = SynthesisConfig::default();
        Self {
            n_per_weak_kc: c.n_per_weak_kc,
            n_samples_per_call: c.n_samples_per_call,
            p_rewrite: c.p_rewrite,
            p_fusion: c.p_fusion,
            max_kcs_per_item: c.max_kcs_per_item,
        }
    }
}

impl SynthesisSection {
    fn to_config(&self, master_seed: u64) -> SynthesisConfig {
        SynthesisConfig {
            n_per_weak_kc: self.n_per_weak_kc,
            n_samples_per_call: self.n_samples_per_call,
            p_rewrite: self.p_rewrite,
            p_fusion: self.p_fusion,
            max_kcs_per_item: self.max_kcs_per_item,
            seed: derive_seed(master_seed, "augment"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Command run inside the scratch directory to judge code answers;
    /// defaults to `python3 tests.py`.
    pub code_command: Option<Vec<String>>,
    /// Wall-clock budget for one code-grading run.
    pub timeout_secs: Option<u64>,
}

impl EvaluationSection {
    fn code_runner(&self) -> CodeRunner {
        let mut runner = CodeRunner::default();
        if let Some(command) = &self.code_command {
            runner.command = command.clone();
        }
        if let Some(timeout) = self.timeout_secs {
            runner.timeout_secs = timeout;
        }
        runner
    }
}

/// The whole pipeline configuration, read from one JSON file. Every
/// section except `paths` may be omitted; omitted fields take the
/// documented defaults. `endpoints` may be omitted only for replay runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoints: Option<Endpoints>,
    pub paths: PathsConfig,
    #[serde(default)]
    pub annotation: AnnotationSection,
    #[serde(default)]
    pub diagnosis: DiagnosisSection,
    #[serde(default)]
    pub synthesis: SynthesisSection,
    #[serde(default)]
    pub selection: SelectionParams,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub seed: u64,
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub delta_a: Option<f64>,
    pub delta_f: Option<f64>,
    pub theta: Option<i64>,
    pub seed: Option<u64>,
    pub mock_fixtures: Option<PathBuf>,
    pub timeout_secs: Option<u64>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let invalid = |message: String| PipelineError::ConfigInvalid {
            field: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| invalid(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))
    }

    pub fn apply_overrides(&mut self, overrides: &Overrides) {
        if let Some(out) = &overrides.out {
            self.paths.output_dir = out.clone();
        }
        if let Some(v) = overrides.delta_a {
            self.diagnosis.delta_a = v;
        }
        if let Some(v) = overrides.delta_f {
            self.diagnosis.delta_f = v;
        }
        if let Some(v) = overrides.theta {
            self.selection.theta = v;
        }
        if let Some(v) = overrides.seed {
            self.seed = v;
        }
        if let Some(dir) = &overrides.mock_fixtures {
            self.paths.fixtures_dir = Some(dir.clone());
        }
        if let Some(v) = overrides.timeout_secs {
            self.evaluation.timeout_secs = Some(v);
        }
    }

    /// Check value ranges and referenced paths. Runs before any network
    /// call, so a bad config never costs model traffic.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |field: &str, message: String| {
            Err(PipelineError::ConfigInvalid { field: field.into(), message })
        };
        if self.endpoints.is_none() && self.paths.fixtures_dir.is_none() {
            return invalid(
                "endpoints",
                "required unless paths.fixtures_dir makes the run a replay".into(),
            );
        }
        for (field, value) in [
            ("diagnosis.delta_a", self.diagnosis.delta_a),
            ("diagnosis.delta_f", self.diagnosis.delta_f),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return invalid(field, format!("{value} outside [0, 1]"));
            }
        }
        self.synthesis
            .to_config(self.seed)
            .validate()
            .map_err(|e| PipelineError::ConfigInvalid {
                field: "synthesis".into(),
                message: e.to_string(),
            })?;
        self.selection.validate().map_err(|e| PipelineError::ConfigInvalid {
            field: "selection".into(),
            message: e.to_string(),
        })?;
        if let Some(timeout) = self.evaluation.timeout_secs {
            if timeout == 0 {
                return invalid("evaluation.timeout_secs", "must be >= 1".into());
            }
        }
        if let Some(command) = &self.evaluation.code_command {
            if command.is_empty() {
                return invalid("evaluation.code_command", "must name a program".into());
            }
        }

        let missing = |path: &Path| PipelineError::MissingInput {
            stage: "config",
            path: path.to_path_buf(),
        };
        if !self.paths.target.is_file() {
            return Err(missing(&self.paths.target));
        }
        for path in [&self.paths.eval, &self.paths.kc_set] {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(missing(path));
                }
            }
        }
        for dir in [&self.paths.templates_dir, &self.paths.fixtures_dir] {
            if let Some(dir) = dir {
                if !dir.is_dir() {
                    return Err(missing(dir));
                }
            }
        }
        Ok(())
    }
}

// ---- artifact names -------------------------------------------------------

/// File names of everything the pipeline writes into the output directory.
pub mod artifacts {
    pub const KC_SET: &str = "kc_set.json";
    pub const TAGGED: &str = "tagged.jsonl";
    pub const EXCLUSIONS: &str = "exclusions.jsonl";
    pub const ANNOTATE_REPORT: &str = "annotate_report.json";
    pub const EVALUATION: &str = "evaluation.jsonl";
    pub const ERROR_CASES: &str = "error_cases.jsonl";
    pub const EVALUATE_REPORT: &str = "evaluate_report.json";
    pub const PROFILE: &str = "profile.json";
    pub const PROFILE_TEXT: &str = "profile.txt";
    pub const WEAK_KCS: &str = "weak_kcs.json";
    pub const DIAGNOSES: &str = "diagnoses.jsonl";
    pub const DIAGNOSE_REPORT: &str = "diagnose_report.json";
    pub const D_S: &str = "d_s.jsonl";
    pub const SYNTHESIZE_REPORT: &str = "synthesize_report.json";
    pub const D_A: &str = "d_a.jsonl";
    pub const AUGMENT_REPORT: &str = "augment_report.json";
    pub const D_FINAL: &str = "d_final.jsonl";
    pub const FINETUNE: &str = "finetune.jsonl";
    pub const STAGE1_DROPPED: &str = "stage1_dropped.jsonl";
    pub const SELECT_REPORT: &str = "select_report.json";
    pub const MANIFEST: &str = "manifest.json";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TEXT: &str = "report.txt";
}

pub fn artifact(config: &PipelineConfig, name: &str) -> PathBuf {
    config.paths.output_dir.join(name)
}

// ---- clients ----------------------------------------------------------

/// The two resolved model gateways a run talks to. With a fixtures
/// directory both resolve to the same replay client.
pub struct Clients {
    pub advanced: Gateway,
    pub student: Gateway,
    pub advanced_model_id: String,
    pub student_model_id: String,
    pub replayed: bool,
}

impl Clients {
    pub fn from_config(config: &PipelineConfig) -> Result<Self, PipelineError> {
        if let Some(dir) = &config.paths.fixtures_dir {
            let client: Arc<dyn ChatClient> = Arc::new(
                ReplayClient::open(dir).map_err(|e| PipelineError::stage("clients", e))?,
            );
            let (advanced_id, student_id) = match &config.endpoints {
                Some(e) => (e.advanced_model.model.clone(), e.student_model.model.clone()),
                None => ("replay".to_string(), "replay".to_string()),
            };
            return Ok(Self {
                advanced: Gateway::new(Arc::clone(&client)),
                student: Gateway::new(client),
                advanced_model_id: advanced_id,
                student_model_id: student_id,
                replayed: true,
            });
        }
        let endpoints = config.endpoints.as_ref().ok_or_else(|| PipelineError::ConfigInvalid {
            field: "endpoints".into(),
            message: "required unless paths.fixtures_dir makes the run a replay".into(),
        })?;
        let build = |endpoint: &EndpointConfig| -> Result<Gateway, PipelineError> {
            let api_key = std::env::var(&endpoint.api_key_env).ok();
            let client = HttpChatClient::new(
                endpoint.base_url.clone(),
                endpoint.model.clone(),
                api_key,
                DEFAULT_TIMEOUT,
            )
            .map_err(|e| PipelineError::stage("clients", e))?;
            Ok(Gateway::new(Arc::new(client)))
        };
        Ok(Self {
            advanced: build(&endpoints.advanced_model)?,
            student: build(&endpoints.student_model)?,
            advanced_model_id: endpoints.advanced_model.model.clone(),
            student_model_id: endpoints.student_model.model.clone(),
            replayed: false,
        })
    }

    /// Wire explicit gateways, bypassing config resolution. This is how
    /// tests and embedding programs drive the pipeline with their own
    /// clients.
    pub fn from_gateways(
        advanced: Gateway,
        student: Gateway,
        advanced_model_id: impl Into<String>,
        student_model_id: impl Into<String>,
    ) -> Self {
        Self {
            advanced,
            student,
            advanced_model_id: advanced_model_id.into(),
            student_model_id: student_model_id.into(),
            replayed: false,
        }
    }
}

// ---- shared stage plumbing ---------------------------------------------

fn templates_for(config: &PipelineConfig) -> Result<TemplateStore, PipelineError> {
    let mut store = TemplateStore::builtin();
    if let Some(dir) = &config.paths.templates_dir {
        store.overlay_dir(dir).map_err(|e| PipelineError::stage("templates", e))?;
    }
    Ok(store)
}

fn ensure_output_dir(config: &PipelineConfig) -> Result<(), PipelineError> {
    fs::create_dir_all(&config.paths.output_dir)
        .map_err(|e| PipelineError::stage("output", e))
}

fn load_stage_jsonl<T: JsonlRecord>(
    stage: &'static str,
    path: &Path,
) -> Result<Vec<T>, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::MissingInput { stage, path: path.to_path_buf() });
    }
    load_jsonl(path).map_err(|e| PipelineError::stage(stage, e))
}

fn save_stage_jsonl<T: Serialize>(
    stage: &'static str,
    records: &[T],
    path: &Path,
) -> Result<(), PipelineError> {
    save_jsonl(records, path).map_err(|e| PipelineError::stage(stage, e))
}

fn write_json<T: Serialize>(
    stage: &'static str,
    path: &Path,
    value: &T,
) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::stage(stage, e))
}

fn read_json<T: serde::de::DeserializeOwned>(
    stage: &'static str,
    path: &Path,
) -> Result<T, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::MissingInput { stage, path: path.to_path_buf() });
    }
    let text = fs::read_to_string(path).map_err(|e| PipelineError::stage(stage, e))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::stage(stage, format!("{}: {e}", path.display())))
}

fn load_kc_set(stage: &'static str, path: &Path) -> Result<KCSet, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::MissingInput { stage, path: path.to_path_buf() });
    }
    KCSet::load(path).map_err(|e| PipelineError::stage(stage, e))
}

/// Non-blank line count of a JSONL artifact.
pub fn count_jsonl_lines(path: &Path) -> std::io::Result<usize> {
    let file = fs::File::open(path)?;
    let mut count = 0;
    for line in std::io::BufReader::new(file).lines() {
        if !line?.trim().is_empty() {
            count += 1;
        }
    }
    Ok(count)
}

/// The pipeline works one task per run; a mixed corpus is an input error.
fn single_task_kind(stage: &'static str, samples: &[Sample]) -> Result<TaskKind, PipelineError> {
    let kind = samples[0].task_kind;
    for sample in samples {
        if sample.task_kind != kind {
            return Err(PipelineError::stage(
                stage,
                format!(
                    "mixed task kinds in target corpus ({} and {}); run one task per pipeline",
                    kind.as_str(),
                    sample.task_kind.as_str()
                ),
            ));
        }
    }
    Ok(kind)
}

fn tagged_task_kind(
    stage: &'static str,
    config: &PipelineConfig,
) -> Result<(Vec<TaggedSample>, TaskKind), PipelineError> {
    let tagged: Vec<TaggedSample> = load_stage_jsonl(stage, &artifact(config, artifacts::TAGGED))?;
    if tagged.is_empty() {
        return Err(PipelineError::stage(stage, "tagged corpus is empty"));
    }
    let kind = tagged[0].sample.task_kind;
    Ok((tagged, kind))
}

// ---- stage reports -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotateReport {
    pub samples: usize,
    pub kc_count: usize,
    /// False when the KC set came ready-made from `paths.kc_set`.
    pub kc_set_derived: bool,
    pub coarse_failures: usize,
    pub tagged: usize,
    pub excluded: usize,
    pub reprompted: usize,
    pub dropped_tags: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub evaluated: usize,
    /// Records reflecting a genuine graded attempt.
    pub graded: usize,
    pub correct: usize,
    pub errors: usize,
    /// Calls that failed and produced no gradable response.
    pub failures: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnoseReport {
    /// Samples that entered the Q-KC matrix (graded evaluations only).
    pub rows: usize,
    pub kc_count: usize,
    pub weak_kcs: usize,
    pub error_cases: usize,
    pub diagnosed: usize,
    pub failures: Vec<DiagnosisFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesizeReport {
    pub weak_kcs: usize,
    pub global_items: usize,
    pub fine_grained_items: usize,
    /// Question-level duplicates removed when assembling the output.
    pub deduplicated: usize,
    pub d_s: usize,
    pub failures: Vec<SynthesisFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentReport {
    pub input: usize,
    pub rewrites_sampled: usize,
    pub rewrites_accepted: usize,
    pub fusion_pairs_target: usize,
    pub fusion_pairs_formed: usize,
    pub fusions_accepted: usize,
    pub fusion_infeasible: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_note: Option<String>,
    pub d_a: usize,
    pub rejections: Vec<AugmentRejection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectReport {
    pub input: usize,
    pub theta: i64,
    pub stage1_kept: usize,
    pub stage1_dropped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_stats: Option<ScoreStats>,
    pub retained: usize,
}

/// Summary of a full run: versions, seeds, and per-artifact line counts
/// recounted from disk so they cannot drift from the files themselves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub pipeline_version: String,
    pub task_kind: TaskKind,
    pub seed: u64,
    pub derived_seeds: BTreeMap<String, u64>,
    pub advanced_model: String,
    pub student_model: String,
    pub replayed: bool,
    pub counts: BTreeMap<String, usize>,
}

/// The weak-KC artifact: ids plus labels, sorted by id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeakKcsDoc {
    pub weak_kcs: Vec<KnowledgeComponent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FinetuneRow {
    instruction: String,
    response: String,
}

// ---- stage commands ------------------------------------------------------

/// Derive (or load) the KC set and tag every target sample against it.
pub fn cmd_annotate(
    config: &PipelineConfig,
    clients: &Clients,
) -> Result<AnnotateReport, PipelineError> {
    const STAGE: &str = "annotate";
    let samples: Vec<Sample> = load_stage_jsonl(STAGE, &config.paths.target)?;
    if samples.is_empty() {
        return Err(PipelineError::stage(STAGE, "target corpus is empty"));
    }
    single_task_kind(STAGE, &samples)?;
    ensure_output_dir(config)?;
    let templates = templates_for(config)?;

    let mut coarse_failures = 0;
    let (kc_set, derived) = match &config.paths.kc_set {
        Some(path) => (load_kc_set(STAGE, path)?, false),
        None => {
            let coarse = annotation::coarse_annotate(
                &samples,
                &config.annotation.exemplar_kcs,
                &clients.advanced,
                &templates,
            )
            .map_err(|e| PipelineError::stage(STAGE, e))?;
            coarse_failures = coarse.failures.len();
            let kc_set = annotation::consolidate_kc_set(
                &coarse.annotations,
                &config.annotation.manual_edits,
                &clients.advanced,
                &templates,
            )
            .map_err(|e| PipelineError::stage(STAGE, e))?;
            (kc_set, true)
        }
    };
    // downstream stages always read the KC set from the output directory
    kc_set
        .save(&artifact(config, artifacts::KC_SET))
        .map_err(|e| PipelineError::stage(STAGE, e))?;

    let outcome = annotation::constrained_annotate(&samples, &kc_set, &clients.advanced, &templates)
        .map_err(|e| PipelineError::stage(STAGE, e))?;
    save_stage_jsonl(STAGE, &outcome.tagged, &artifact(config, artifacts::TAGGED))?;
    save_stage_jsonl(STAGE, &outcome.exclusions, &artifact(config, artifacts::EXCLUSIONS))?;

    let report = AnnotateReport {
        samples: samples.len(),
        kc_count: kc_set.len(),
        kc_set_derived: derived,
        coarse_failures,
        tagged: outcome.tagged.len(),
        excluded: outcome.exclusions.len(),
        reprompted: outcome.reprompted,
        dropped_tags: outcome.dropped_tags,
    };
    write_json(STAGE, &artifact(config, artifacts::ANNOTATE_REPORT), &report)?;
    Ok(report)
}

/// Pose every tagged question to the student model and grade the answers.
pub fn cmd_evaluate(
    config: &PipelineConfig,
    clients: &Clients,
) -> Result<EvaluateReport, PipelineError> {
    const STAGE: &str = "evaluate";
    let (tagged, _) = tagged_task_kind(STAGE, config)?;
    ensure_output_dir(config)?;
    let templates = templates_for(config)?;
    let runner = config.evaluation.code_runner();

    let records = evaluation::evaluate(&tagged, &clients.student, &templates, Some(&runner))
        .map_err(|e| PipelineError::stage(STAGE, e))?;
    let errors = evaluation::collect_errors(&records, &tagged)
        .map_err(|e| PipelineError::stage(STAGE, e))?;
    save_stage_jsonl(STAGE, &records, &artifact(config, artifacts::EVALUATION))?;
    save_stage_jsonl(STAGE, &errors, &artifact(config, artifacts::ERROR_CASES))?;

    let failures = records.iter().filter(|r| r.failure_reason.is_some()).count();
    let graded = records.len() - failures;
    let correct = records.iter().filter(|r| r.failure_reason.is_none() && r.correct).count();
    let report = EvaluateReport {
        evaluated: records.len(),
        graded,
        correct,
        errors: errors.len(),
        failures,
        accuracy: if graded == 0 { 0.0 } else { correct as f64 / graded as f64 },
    };
    write_json(STAGE, &artifact(config, artifacts::EVALUATE_REPORT), &report)?;
    Ok(report)
}

/// Build the KC mastery profile, pick out weak KCs, and have the
/// advanced model diagnose each wrong answer.
pub fn cmd_diagnose(
    config: &PipelineConfig,
    clients: &Clients,
) -> Result<DiagnoseReport, PipelineError> {
    const STAGE: &str = "diagnose";
    let (tagged, kind) = tagged_task_kind(STAGE, config)?;
    let records: Vec<EvaluationRecord> =
        load_stage_jsonl(STAGE, &artifact(config, artifacts::EVALUATION))?;
    let error_cases: Vec<ErrorCase> =
        load_stage_jsonl(STAGE, &artifact(config, artifacts::ERROR_CASES))?;
    let kc_set = load_kc_set(STAGE, &artifact(config, artifacts::KC_SET))?;
    ensure_output_dir(config)?;
    let templates = templates_for(config)?;

    // only genuine graded attempts enter the mastery math
    let by_id: BTreeMap<&str, &EvaluationRecord> =
        records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let mut rows = Vec::new();
    let mut correctness = Vec::new();
    for t in &tagged {
        let record = by_id.get(t.sample.id.as_str()).ok_or_else(|| {
            PipelineError::stage(STAGE, format!("no evaluation record for sample {}", t.sample.id))
        })?;
        if record.failure_reason.is_some() {
            continue;
        }
        rows.push(t.clone());
        correctness.push(record.correct);
    }
    if rows.is_empty() {
        return Err(PipelineError::stage(STAGE, "no graded evaluations to diagnose"));
    }
    let matrix =
        build_qkc_matrix(&rows, &kc_set).map_err(|e| PipelineError::stage(STAGE, e))?;
    let mut profile = diagnosis::build_profile(&matrix, &correctness, &clients.student_model_id)
        .map_err(|e| PipelineError::stage(STAGE, e))?;
    profile.thresholds =
        Some(Thresholds { delta_a: config.diagnosis.delta_a, delta_f: config.diagnosis.delta_f });
    let weak_ids =
        diagnosis::identify_weak_kcs(&profile, config.diagnosis.delta_a, config.diagnosis.delta_f)
            .map_err(|e| PipelineError::stage(STAGE, e))?;
    let weak_kcs: Vec<KnowledgeComponent> =
        weak_ids.iter().filter_map(|id| kc_set.by_id(id).cloned()).collect();

    write_json(STAGE, &artifact(config, artifacts::PROFILE), &profile)?;
    fs::write(
        artifact(config, artifacts::PROFILE_TEXT),
        report::render_profile_text(&profile, &weak_ids),
    )
    .map_err(|e| PipelineError::stage(STAGE, e))?;
    write_json(STAGE, &artifact(config, artifacts::WEAK_KCS), &WeakKcsDoc { weak_kcs })?;

    let outcome = diagnosis::diagnose_errors(&error_cases, &kc_set, kind, &clients.advanced, &templates)
        .map_err(|e| PipelineError::stage(STAGE, e))?;
    save_stage_jsonl(STAGE, &outcome.records, &artifact(config, artifacts::DIAGNOSES))?;

    let report = DiagnoseReport {
        rows: rows.len(),
        kc_count: kc_set.len(),
        weak_kcs: weak_ids.len(),
        error_cases: error_cases.len(),
        diagnosed: outcome.records.len(),
        failures: outcome.failures,
    };
    write_json(STAGE, &artifact(config, artifacts::DIAGNOSE_REPORT), &report)?;
    Ok(report)
}

/// Generate new questions for every weak KC (globally) and every
/// diagnosed error (fine-grained).
pub fn cmd_synthesize(
    config: &PipelineConfig,
    clients: &Clients,
) -> Result<SynthesizeReport, PipelineError> {
    const STAGE: &str = "synthesize";
    let (_, kind) = tagged_task_kind(STAGE, config)?;
    let kc_set = load_kc_set(STAGE, &artifact(config, artifacts::KC_SET))?;
    let weak: WeakKcsDoc = read_json(STAGE, &artifact(config, artifacts::WEAK_KCS))?;
    let diagnoses: Vec<DiagnosticRecord> =
        load_stage_jsonl(STAGE, &artifact(config, artifacts::DIAGNOSES))?;
    ensure_output_dir(config)?;
    let templates = templates_for(config)?;
    let syn_config = config.synthesis.to_config(config.seed);

    let mut items = Vec::new();
    let mut failures = Vec::new();
    let mut global_items = 0;
    let mut fine_grained_items = 0;
    if !weak.weak_kcs.is_empty() {
        let outcome = synthesis::synthesize_global(
            &weak.weak_kcs,
            &clients.advanced,
            &templates,
            &syn_config,
            kind,
        )
        .map_err(|e| PipelineError::stage(STAGE, e))?;
        global_items = outcome.items.len();
        items.extend(outcome.items);
        failures.extend(outcome.failures);
    }
    if !diagnoses.is_empty() {
        let outcome = synthesis::synthesize_fine_grained(
            &diagnoses,
            &kc_set,
            &clients.advanced,
            &templates,
            &syn_config,
            kind,
        )
        .map_err(|e| PipelineError::stage(STAGE, e))?;
        fine_grained_items = outcome.items.len();
        items.extend(outcome.items);
        failures.extend(outcome.failures);
    }
    let generated = items.len();
    let d_s = dedupe_by_question(items);
    save_stage_jsonl(STAGE, &d_s, &artifact(config, artifacts::D_S))?;

    let report = SynthesizeReport {
        weak_kcs: weak.weak_kcs.len(),
        global_items,
        fine_grained_items,
        deduplicated: generated - d_s.len(),
        d_s: d_s.len(),
        failures,
    };
    write_json(STAGE, &artifact(config, artifacts::SYNTHESIZE_REPORT), &report)?;
    Ok(report)
}

/// Expand the synthesized set with KC-constrained rewrites and fusions.
pub fn cmd_augment(
    config: &PipelineConfig,
    clients: &Clients,
) -> Result<AugmentReport, PipelineError> {
    const STAGE: &str = "augment";
    let (_, kind) = tagged_task_kind(STAGE, config)?;
    let d_s: Vec<SyntheticItem> = load_stage_jsonl(STAGE, &artifact(config, artifacts::D_S))?;
    let kc_set = load_kc_set(STAGE, &artifact(config, artifacts::KC_SET))?;
    ensure_output_dir(config)?;
    let templates = templates_for(config)?;
    let syn_config = config.synthesis.to_config(config.seed);

    let mut rewrite_outcome = RewriteOutcome::default();
    let mut fusion_outcome = FusionOutcome::default();
    let mut fusion_note = None;
    if !d_s.is_empty() {
        rewrite_outcome = synthesis::augment_rewrite(
            &d_s,
            &kc_set,
            &clients.advanced,
            &templates,
            &syn_config,
            kind,
        )
        .map_err(|e| PipelineError::stage(STAGE, e))?;
        if d_s.len() >= 2 {
            match synthesis::augment_fuse(
                &d_s,
                &kc_set,
                &clients.advanced,
                &templates,
                &syn_config,
                kind,
            ) {
                Ok(outcome) => fusion_outcome = outcome,
                // every candidate pair blowing the KC cap is a real outcome,
                // not a crash: the run continues without fusions
                Err(SynthesisError::NoFeasiblePairs { cap }) => {
                    fusion_note = Some(format!("no feasible pairs within the {cap}-KC cap"));
                }
                Err(e) => return Err(PipelineError::stage(STAGE, e)),
            }
        } else {
            fusion_note = Some("too few items to fuse".into());
        }
    }

    let mut rejections = rewrite_outcome.rejections;
    rejections.extend(fusion_outcome.rejections);
    let report_counts = (
        rewrite_outcome.sampled,
        rewrite_outcome.rewrites.len(),
        fusion_outcome.pairs_target,
        fusion_outcome.pairs_formed,
        fusion_outcome.fusions.len(),
        fusion_outcome.infeasible,
    );
    let input = d_s.len();
    let d_a = synthesis::assemble_augmented(d_s, rewrite_outcome.rewrites, fusion_outcome.fusions);
    save_stage_jsonl(STAGE, &d_a, &artifact(config, artifacts::D_A))?;

    let report = AugmentReport {
        input,
        rewrites_sampled: report_counts.0,
        rewrites_accepted: report_counts.1,
        fusion_pairs_target: report_counts.2,
        fusion_pairs_formed: report_counts.3,
        fusions_accepted: report_counts.4,
        fusion_infeasible: report_counts.5,
        fusion_note,
        d_a: d_a.len(),
        rejections,
    };
    write_json(STAGE, &artifact(config, artifacts::AUGMENT_REPORT), &report)?;
    Ok(report)
}

/// Two-stage selection: model scoring at `theta`, then the one-sigma cut
/// on the KC-value score. Emits the final dataset in both full-record
/// and instruction/response form.
pub fn cmd_select(
    config: &PipelineConfig,
    clients: &Clients,
) -> Result<SelectReport, PipelineError> {
    const STAGE: &str = "select";
    let (_, kind) = tagged_task_kind(STAGE, config)?;
    let d_a: Vec<SyntheticItem> = load_stage_jsonl(STAGE, &artifact(config, artifacts::D_A))?;
    let kc_set = load_kc_set(STAGE, &artifact(config, artifacts::KC_SET))?;
    let profile: KCProfile = read_json(STAGE, &artifact(config, artifacts::PROFILE))?;
    ensure_output_dir(config)?;
    let templates = templates_for(config)?;
    let params = &config.selection;

    let mut retained: Vec<SyntheticItem> = Vec::new();
    let mut dropped = Vec::new();
    let mut stage1_kept = 0;
    let mut score_stats = None;
    if !d_a.is_empty() {
        // frequencies are measured over the full augmented set, before
        // any filtering
        let ctx = selection::build_score_context(&profile, &d_a)
            .map_err(|e| PipelineError::stage(STAGE, e))?;
        let input = d_a.len();
        let stage1 =
            selection::stage1_filter(d_a, &kc_set, &clients.advanced, &templates, params, kind)
                .map_err(|e| PipelineError::stage(STAGE, e))?;
        debug_assert_eq!(input, stage1.kept.len() + stage1.dropped.len());
        stage1_kept = stage1.kept.len();
        dropped = stage1.dropped;
        if stage1_kept > 0 {
            let scored = selection::score_items(stage1.kept, &ctx, params);
            let scores: Vec<f64> = scored.iter().filter_map(|i| i.cds_score).collect();
            let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let outcome = selection::select_one_sigma(scored)
                .map_err(|e| PipelineError::stage(STAGE, e))?;
            score_stats = Some(ScoreStats {
                count: scores.len(),
                min,
                max,
                mean: outcome.mean,
                std_dev: outcome.std_dev,
                cutoff: outcome.cutoff,
            });
            retained = outcome.retained;
        }
    }

    save_stage_jsonl(STAGE, &retained, &artifact(config, artifacts::D_FINAL))?;
    let finetune: Vec<FinetuneRow> = retained
        .iter()
        .map(|item| FinetuneRow {
            instruction: item.question.clone(),
            response: item.answer.clone(),
        })
        .collect();
    save_stage_jsonl(STAGE, &finetune, &artifact(config, artifacts::FINETUNE))?;
    save_stage_jsonl(STAGE, &dropped, &artifact(config, artifacts::STAGE1_DROPPED))?;

    let report = SelectReport {
        input: stage1_kept + dropped.len(),
        theta: params.theta,
        stage1_kept,
        stage1_dropped: dropped.len(),
        score_stats,
        retained: retained.len(),
    };
    write_json(STAGE, &artifact(config, artifacts::SELECT_REPORT), &report)?;
    Ok(report)
}

/// Run all six stages in order and write the run manifest.
pub fn cmd_run_all(
    config: &PipelineConfig,
    clients: &Clients,
) -> Result<RunManifest, PipelineError> {
    cmd_annotate(config, clients)?;
    cmd_evaluate(config, clients)?;
    cmd_diagnose(config, clients)?;
    cmd_synthesize(config, clients)?;
    cmd_augment(config, clients)?;
    cmd_select(config, clients)?;
    write_manifest(config, clients)
}

/// Recount every artifact on disk and write the run manifest. Counting
/// from the files rather than the in-memory reports keeps the manifest
/// honest: it describes what a reader of the directory will find.
pub fn write_manifest(
    config: &PipelineConfig,
    clients: &Clients,
) -> Result<RunManifest, PipelineError> {
    const STAGE: &str = "run-all";
    let (tagged, kind) = tagged_task_kind(STAGE, config)?;
    drop(tagged);
    let mut counts = BTreeMap::new();
    for name in [
        artifacts::TAGGED,
        artifacts::EXCLUSIONS,
        artifacts::EVALUATION,
        artifacts::ERROR_CASES,
        artifacts::DIAGNOSES,
        artifacts::D_S,
        artifacts::D_A,
        artifacts::STAGE1_DROPPED,
        artifacts::D_FINAL,
        artifacts::FINETUNE,
    ] {
        let count = count_jsonl_lines(&artifact(config, name))
            .map_err(|e| PipelineError::stage(STAGE, e))?;
        counts.insert(name.to_string(), count);
    }
    let kc_set = load_kc_set(STAGE, &artifact(config, artifacts::KC_SET))?;
    counts.insert(artifacts::KC_SET.to_string(), kc_set.len());

    let manifest = RunManifest {
        pipeline_version: env!("CARGO_PKG_VERSION").to_string(),
        task_kind: kind,
        seed: config.seed,
        derived_seeds: BTreeMap::from([("augment".to_string(), derive_seed(config.seed, "augment"))]),
        advanced_model: clients.advanced_model_id.clone(),
        student_model: clients.student_model_id.clone(),
        replayed: clients.replayed,
        counts,
    };
    write_json(STAGE, &artifact(config, artifacts::MANIFEST), &manifest)?;
    Ok(manifest)
}
