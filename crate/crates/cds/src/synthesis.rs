//! Weakness-targeted question synthesis and KC-guided augmentation.
//!
//! Two generators produce the seed set `d_s`: global synthesis writes
//! fresh questions per weak KC from the KC label alone (no original
//! question ever enters the prompt), and fine-grained synthesis writes
//! one question per diagnosed error, conditioned on the error, its
//! diagnosis, and the weak KCs it exposed. Augmentation then grows the
//! set with KC-constrained rewrites (same KC set as the parent) and
//! two-parent fusions (KC set = union of the parents', capped), yielding
//! `d_a`.
//!
//! Every generation call samples `n_samples_per_call` completions and
//! keeps the first acceptable one; the rest are retained in the item's
//! `generation_params` for audit. Constraint violations are re-prompted
//! once and then rejected — rejections are reported, never patched up.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    salted_rng, synthetic_id, KCSet, KnowledgeComponent, Provenance, Strategy, SyntheticItem,
    TaskKind,
};
use crate::diagnosis::DiagnosticRecord;
use crate::gateway::templates::{template_id, TemplateError, TemplateStore};
use crate::gateway::{
    parallel_map, ChatRequest, Gateway, Message, SamplingParams,
};

const WORKERS: usize = 8;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("invalid synthesis config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("{0} got empty input")]
    EmptyInput(&'static str),
    #[error("fusion requires at least two items")]
    TooFewItems,
    #[error("no pair of items has a KC union within the cap of {cap}")]
    NoFeasiblePairs { cap: usize },
    #[error("item references unknown kc {0}")]
    UnknownKc(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Knobs shared by the synthesis and augmentation operations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Questions generated per weak KC by global synthesis.
    pub n_per_weak_kc: usize,
    /// Completions sampled per generation call.
    pub n_samples_per_call: u32,
    /// Fraction of items rewritten during augmentation.
    pub p_rewrite: f64,
    /// Fraction of items drawn into fusion pairs during augmentation.
    pub p_fusion: f64,
    /// Hard cap on a fused item's KC set size.
    pub max_kcs_per_item: usize,
    /// Seed for the augmentation sampling decisions.
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            n_per_weak_kc: 2,
            n_samples_per_call: 5,
            p_rewrite: 0.25,
            p_fusion: 0.25,
            max_kcs_per_item: 5,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        let bad = |field: &'static str, message: String| {
            Err(SynthesisError::InvalidConfig { field, message })
        };
        if self.n_per_weak_kc == 0 {
            return bad("n_per_weak_kc", "must be >= 1".into());
        }
        if self.n_samples_per_call == 0 {
            return bad("n_samples_per_call", "must be >= 1".into());
        }
        for (field, p) in [("p_rewrite", self.p_rewrite), ("p_fusion", self.p_fusion)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(field, format!("{p} outside [0, 1]"));
            }
        }
        if self.p_rewrite + self.p_fusion > 1.0 {
            return bad("p_fusion", format!(
                "p_rewrite + p_fusion = {} exceeds 1",
                self.p_rewrite + self.p_fusion
            ));
        }
        if self.max_kcs_per_item == 0 {
            return bad("max_kcs_per_item", "must be >= 1".into());
        }
        Ok(())
    }
}

/// A completion parsed against the Question/Answer/KCs reply format.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedQa {
    pub question: String,
    pub answer: String,
    pub kcs: Vec<String>,
}

/// Parse a generation completion: a `Question:` block, then an `Answer:`
/// block, then a final `KCs:` list line. `None` unless all three are
/// present and nonempty.
pub fn parse_qa(text: &str) -> Option<ParsedQa> {
    #[derive(PartialEq)]
    enum State {
        Preamble,
        Question,
        Answer,
    }
    let mut state = State::Preamble;
    let mut question: Vec<&str> = Vec::new();
    let mut answer: Vec<&str> = Vec::new();
    let mut kcs: Option<Vec<String>> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        match state {
            State::Preamble => {
                if let Some(rest) = trimmed.strip_prefix("Question:") {
                    state = State::Question;
                    if !rest.trim().is_empty() {
                        question.push(rest.trim());
                    }
                }
            }
            State::Question => {
                if let Some(rest) = trimmed.strip_prefix("Answer:") {
                    state = State::Answer;
                    if !rest.trim().is_empty() {
                        answer.push(rest.trim());
                    }
                } else {
                    question.push(line);
                }
            }
            State::Answer => {
                if trimmed.starts_with("KCs:") {
                    kcs = crate::annotation::parse_labeled_list(trimmed, "KCs:");
                    break;
                }
                answer.push(line);
            }
        }
    }
    let question = question.join("\n").trim().to_string();
    let answer = answer.join("\n").trim().to_string();
    let kcs = kcs?;
    if question.is_empty() || answer.is_empty() {
        return None;
    }
    Some(ParsedQa { question, answer, kcs })
}

/// A generation attempt that produced no item, with enough context to
/// find it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisFailure {
    pub context: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct SynthesisOutcome {
    pub items: Vec<SyntheticItem>,
    pub failures: Vec<SynthesisFailure>,
}

fn base_generation_params(sampling: &SamplingParams, n: u32) -> BTreeMap<String, String> {
    let mut params = BTreeMap::new();
    params.insert("temperature".into(), format!("{}", sampling.temperature));
    params.insert("top_p".into(), format!("{}", sampling.top_p));
    params.insert(
        "repetition_penalty".into(),
        format!("{}", sampling.repetition_penalty),
    );
    params.insert("max_tokens".into(), format!("{}", sampling.max_tokens));
    params.insert("n_samples".into(), format!("{n}"));
    params
}

/// One call, first parseable completion wins; unchosen completions are
/// retained for audit.
fn generate(
    prompt: &str,
    gateway: &Gateway,
    n_samples: u32,
    accept: impl Fn(&ParsedQa) -> bool,
) -> Result<(ParsedQa, BTreeMap<String, String>), String> {
    let sampling = SamplingParams::synthesis();
    let request = ChatRequest::new(vec![Message::user(prompt)], sampling.clone(), n_samples)
        .map_err(|e| format!("llm-failure: {e}"))?;
    let response = gateway.complete(&request).map_err(|e| format!("llm-failure: {e}"))?;
    let chosen = response
        .completions
        .iter()
        .enumerate()
        .find_map(|(i, text)| parse_qa(text).filter(&accept).map(|qa| (i, qa)));
    match chosen {
        Some((idx, qa)) => {
            let mut params = base_generation_params(&sampling, n_samples);
            params.insert("selected_index".into(), format!("{idx}"));
            for (i, alt) in response.completions.iter().enumerate() {
                if i != idx {
                    params.insert(format!("alt_{i}"), alt.clone());
                }
            }
            Ok((qa, params))
        }
        None => Err(format!(
            "parse-failure: none of {} completion(s) acceptable",
            response.completions.len()
        )),
    }
}

/// Global synthesis: fresh questions per weak KC, from the label alone.
pub fn synthesize_global(
    weak_kcs: &[KnowledgeComponent],
    gateway: &Gateway,
    templates: &TemplateStore,
    config: &SynthesisConfig,
    task_kind: TaskKind,
) -> Result<SynthesisOutcome, SynthesisError> {
    config.validate()?;
    if weak_kcs.is_empty() {
        return Err(SynthesisError::EmptyInput("synthesize_global"));
    }
    let template = template_id("synthesize_global", task_kind);
    // one job per (kc, variant); the variant number keeps prompts distinct
    let mut jobs = Vec::new();
    for kc in weak_kcs {
        for variant in 1..=config.n_per_weak_kc {
            let prompt = templates.render(
                &template,
                &BTreeMap::from([
                    ("kc_label", kc.label.clone()),
                    ("variant", variant.to_string()),
                ]),
            )?;
            jobs.push((kc.clone(), variant, prompt));
        }
    }

    let results = parallel_map(&jobs, WORKERS, |_, (kc, variant, prompt)| {
        let generated = generate(prompt, gateway, config.n_samples_per_call, |_| true);
        (kc.clone(), *variant, generated)
    });

    let mut outcome = SynthesisOutcome::default();
    for (kc, variant, generated) in results {
        match generated {
            Ok((qa, mut params)) => {
                params.insert("kc_label".into(), kc.label.clone());
                params.insert("variant".into(), variant.to_string());
                outcome.items.push(SyntheticItem {
                    id: synthetic_id(&qa.question, Strategy::Global, &[]),
                    question: qa.question,
                    answer: qa.answer,
                    kc_ids: BTreeSet::from([kc.kc_id.clone()]),
                    provenance: Provenance {
                        strategy: Strategy::Global,
                        parent_ids: vec![],
                        generation_params: params,
                    },
                    stage1_score: None,
                    cds_score: None,
                });
            }
            Err(reason) => outcome.failures.push(SynthesisFailure {
                context: format!("global kc={} variant={variant}", kc.label),
                reason,
            }),
        }
    }
    Ok(outcome)
}

/// Fine-grained synthesis: one new question per diagnosed error,
/// conditioned on the error, its diagnosis, and the weak KCs it exposed.
pub fn synthesize_fine_grained(
    records: &[DiagnosticRecord],
    kc_set: &KCSet,
    gateway: &Gateway,
    templates: &TemplateStore,
    config: &SynthesisConfig,
    task_kind: TaskKind,
) -> Result<SynthesisOutcome, SynthesisError> {
    config.validate()?;
    if records.is_empty() {
        return Err(SynthesisError::EmptyInput("synthesize_fine_grained"));
    }
    let template = template_id("synthesize_fine", task_kind);
    let mut outcome = SynthesisOutcome::default();
    let mut jobs = Vec::new();
    for record in records {
        if record.weak_kc_ids.is_empty() {
            outcome.failures.push(SynthesisFailure {
                context: format!("fine_grained sample={}", record.error_case.sample_id),
                reason: "skipped: diagnosis names no known weak KCs".into(),
            });
            continue;
        }
        let weak_labels = kc_set
            .labels_for(&record.weak_kc_ids)
            .map_err(|_| unknown_kc(&record.weak_kc_ids, kc_set))?;
        let prompt = templates.render(
            &template,
            &BTreeMap::from([
                ("question", record.error_case.question.clone()),
                ("erroneous_response", record.error_case.erroneous_response.clone()),
                ("diagnosis", record.p_diag.clone()),
                ("weak_kcs", weak_labels.join("; ")),
            ]),
        )?;
        jobs.push((record, prompt));
    }

    let results = parallel_map(&jobs, WORKERS, |_, (record, prompt)| {
        let generated = generate(prompt, gateway, config.n_samples_per_call, |_| true);
        ((*record).clone(), generated)
    });

    for (record, generated) in results {
        match generated {
            Ok((qa, mut params)) => {
                params.insert("source_sample".into(), record.error_case.sample_id.clone());
                let parents = vec![record.error_case.sample_id.clone()];
                outcome.items.push(SyntheticItem {
                    id: synthetic_id(&qa.question, Strategy::FineGrained, &parents),
                    question: qa.question,
                    answer: qa.answer,
                    kc_ids: record.weak_kc_ids.clone(),
                    provenance: Provenance {
                        strategy: Strategy::FineGrained,
                        parent_ids: parents,
                        generation_params: params,
                    },
                    stage1_score: None,
                    cds_score: None,
                });
            }
            Err(reason) => outcome.failures.push(SynthesisFailure {
                context: format!("fine_grained sample={}", record.error_case.sample_id),
                reason,
            }),
        }
    }
    Ok(outcome)
}

fn unknown_kc(ids: &BTreeSet<String>, kc_set: &KCSet) -> SynthesisError {
    let missing = ids
        .iter()
        .find(|id| !kc_set.contains_id(id))
        .cloned()
        .unwrap_or_default();
    SynthesisError::UnknownKc(missing)
}

/// Resolve a declared KC list against the set; `None` if any label is
/// unknown (an invented label always fails the constraint).
fn resolve_declared(declared: &[String], kc_set: &KCSet) -> Option<BTreeSet<String>> {
    declared
        .iter()
        .map(|label| kc_set.by_label(label).map(|kc| kc.kc_id.clone()))
        .collect()
}

/// Generate under a KC constraint: the declared KC set must resolve to
/// exactly `required`. One corrective re-prompt, then rejection.
fn generate_constrained(
    prompt: &str,
    required: &BTreeSet<String>,
    required_labels: &[String],
    kc_set: &KCSet,
    gateway: &Gateway,
    n_samples: u32,
) -> Result<(ParsedQa, BTreeMap<String, String>), String> {
    let accept =
        |qa: &ParsedQa| resolve_declared(&qa.kcs, kc_set).as_ref() == Some(required);
    match generate(prompt, gateway, n_samples, accept) {
        Ok(found) => Ok(found),
        Err(first_reason) => {
            if first_reason.starts_with("llm-failure") {
                return Err(first_reason);
            }
            // show the model its own reply, restate the constraint, try once more
            let sampling = SamplingParams::synthesis();
            let first_request =
                ChatRequest::new(vec![Message::user(prompt)], sampling.clone(), n_samples)
                    .map_err(|e| format!("llm-failure: {e}"))?;
            let first_reply = gateway
                .complete(&first_request)
                .map_err(|e| format!("llm-failure: {e}"))?
                .completions[0]
                .clone();
            let corrective = format!(
                "Your KCs line must list exactly these components and no others: {}. \
                 Reply again in the same Question/Answer/KCs format.",
                required_labels.join("; ")
            );
            let retry_messages = vec![
                Message::user(prompt),
                Message::assistant(first_reply),
                Message::user(corrective),
            ];
            let request = ChatRequest::new(retry_messages, sampling, n_samples)
                .map_err(|e| format!("llm-failure: {e}"))?;
            let response =
                gateway.complete(&request).map_err(|e| format!("llm-failure: {e}"))?;
            let chosen = response
                .completions
                .iter()
                .enumerate()
                .find_map(|(i, text)| parse_qa(text).filter(&accept).map(|qa| (i, qa)));
            match chosen {
                Some((idx, qa)) => {
                    let mut params =
                        base_generation_params(&SamplingParams::synthesis(), n_samples);
                    params.insert("selected_index".into(), format!("{idx}"));
                    params.insert("reprompted".into(), "true".into());
                    for (i, alt) in response.completions.iter().enumerate() {
                        if i != idx {
                            params.insert(format!("alt_{i}"), alt.clone());
                        }
                    }
                    Ok((qa, params))
                }
                None => Err(format!("kc-violation after re-prompt ({first_reason})")),
            }
        }
    }
}

/// A parent whose rewrite or fusion was rejected, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRejection {
    pub parent_ids: Vec<String>,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct RewriteOutcome {
    pub rewrites: Vec<SyntheticItem>,
    pub rejections: Vec<AugmentRejection>,
    /// How many parents were drawn for rewriting.
    pub sampled: usize,
}

/// KC-constrained rewriting: a seeded `ceil(p_rewrite * n)`-sized sample
/// of items is rewritten; a rewrite is accepted only when its declared KC
/// set equals the parent's exactly.
pub fn augment_rewrite(
    items: &[SyntheticItem],
    kc_set: &KCSet,
    gateway: &Gateway,
    templates: &TemplateStore,
    config: &SynthesisConfig,
    task_kind: TaskKind,
) -> Result<RewriteOutcome, SynthesisError> {
    config.validate()?;
    if items.is_empty() {
        return Err(SynthesisError::EmptyInput("augment_rewrite"));
    }
    let count = (config.p_rewrite * items.len() as f64).ceil() as usize;
    let count = count.min(items.len());
    if count == 0 {
        return Ok(RewriteOutcome::default());
    }
    let mut indices: Vec<usize> = (0..items.len()).collect();
    let mut rng = salted_rng(config.seed, "augment_rewrite");
    indices.shuffle(&mut rng);
    let mut chosen: Vec<usize> = indices[..count].to_vec();
    chosen.sort_unstable();

    let template = template_id("rewrite", task_kind);
    let mut jobs = Vec::new();
    for &i in &chosen {
        let parent = &items[i];
        let labels = kc_set
            .labels_for(&parent.kc_ids)
            .map_err(|_| unknown_kc(&parent.kc_ids, kc_set))?;
        let prompt = templates.render(
            &template,
            &BTreeMap::from([
                ("question", parent.question.clone()),
                ("answer", parent.answer.clone()),
                ("kc_labels", labels.join("; ")),
            ]),
        )?;
        jobs.push((parent, labels, prompt));
    }

    let results = parallel_map(&jobs, WORKERS, |_, (parent, labels, prompt)| {
        let generated = generate_constrained(
            prompt,
            &parent.kc_ids,
            labels,
            kc_set,
            gateway,
            config.n_samples_per_call,
        );
        ((*parent).clone(), generated)
    });

    let mut outcome = RewriteOutcome { sampled: count, ..RewriteOutcome::default() };
    for (parent, generated) in results {
        match generated {
            Ok((qa, params)) => {
                let parents = vec![parent.id.clone()];
                outcome.rewrites.push(SyntheticItem {
                    id: synthetic_id(&qa.question, Strategy::Rewrite, &parents),
                    question: qa.question,
                    answer: qa.answer,
                    kc_ids: parent.kc_ids.clone(),
                    provenance: Provenance {
                        strategy: Strategy::Rewrite,
                        parent_ids: parents,
                        generation_params: params,
                    },
                    stage1_score: None,
                    cds_score: None,
                });
            }
            Err(reason) => outcome.rejections.push(AugmentRejection {
                parent_ids: vec![parent.id.clone()],
                reason,
            }),
        }
    }
    Ok(outcome)
}

#[derive(Debug, Default)]
pub struct FusionOutcome {
    pub fusions: Vec<SyntheticItem>,
    pub rejections: Vec<AugmentRejection>,
    pub pairs_target: usize,
    pub pairs_formed: usize,
    /// Items that found no partner within the KC cap.
    pub infeasible: usize,
}

/// Multi-KC fusion: disjoint seeded pairs covering `ceil(p_fusion * n)`
/// items are fused; a fusion's KC set is the union of its parents' and
/// must stay within `max_kcs_per_item`.
pub fn augment_fuse(
    items: &[SyntheticItem],
    kc_set: &KCSet,
    gateway: &Gateway,
    templates: &TemplateStore,
    config: &SynthesisConfig,
    task_kind: TaskKind,
) -> Result<FusionOutcome, SynthesisError> {
    config.validate()?;
    if config.p_fusion == 0.0 {
        return Ok(FusionOutcome::default());
    }
    if items.len() < 2 {
        return Err(SynthesisError::TooFewItems);
    }
    let m = (config.p_fusion * items.len() as f64).ceil() as usize;
    let pairs_target = m.div_ceil(2).min(items.len() / 2);

    // shuffled pool; partner = first later entry whose KC union fits the cap
    let mut pool: Vec<usize> = (0..items.len()).collect();
    let mut rng = salted_rng(config.seed, "augment_fuse");
    pool.shuffle(&mut rng);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut infeasible = 0usize;
    while pairs.len() < pairs_target && pool.len() >= 2 {
        let a = pool.remove(0);
        let partner = pool.iter().position(|&b| {
            items[a].kc_ids.union(&items[b].kc_ids).count() <= config.max_kcs_per_item
        });
        match partner {
            Some(j) => {
                let b = pool.remove(j);
                pairs.push((a, b));
            }
            None => infeasible += 1,
        }
    }
    if pairs.is_empty() {
        return Err(SynthesisError::NoFeasiblePairs { cap: config.max_kcs_per_item });
    }

    let template = template_id("fuse", task_kind);
    let mut jobs = Vec::new();
    for &(a, b) in &pairs {
        let (a, b) = (&items[a], &items[b]);
        let union: BTreeSet<String> = a.kc_ids.union(&b.kc_ids).cloned().collect();
        let labels = kc_set
            .labels_for(&union)
            .map_err(|_| unknown_kc(&union, kc_set))?;
        let prompt = templates.render(
            &template,
            &BTreeMap::from([
                ("question_a", a.question.clone()),
                ("answer_a", a.answer.clone()),
                ("question_b", b.question.clone()),
                ("answer_b", b.answer.clone()),
                ("kc_labels", labels.join("; ")),
            ]),
        )?;
        jobs.push((a, b, union, labels, prompt));
    }

    let results = parallel_map(&jobs, WORKERS, |_, (a, b, union, labels, prompt)| {
        let generated = generate_constrained(
            prompt,
            union,
            labels,
            kc_set,
            gateway,
            config.n_samples_per_call,
        );
        ((*a).clone(), (*b).clone(), union.clone(), generated)
    });

    let mut outcome = FusionOutcome {
        pairs_target,
        pairs_formed: pairs.len(),
        infeasible,
        ..FusionOutcome::default()
    };
    for (a, b, union, generated) in results {
        match generated {
            Ok((qa, params)) => {
                let parents = vec![a.id.clone(), b.id.clone()];
                outcome.fusions.push(SyntheticItem {
                    id: synthetic_id(&qa.question, Strategy::Fusion, &parents),
                    question: qa.question,
                    answer: qa.answer,
                    kc_ids: union,
                    provenance: Provenance {
                        strategy: Strategy::Fusion,
                        parent_ids: parents,
                        generation_params: params,
                    },
                    stage1_score: None,
                    cds_score: None,
                });
            }
            Err(reason) => outcome.rejections.push(AugmentRejection {
                parent_ids: vec![a.id.clone(), b.id.clone()],
                reason,
            }),
        }
    }
    Ok(outcome)
}

/// `d_a`: seed set plus accepted rewrites and fusions, question-deduped.
pub fn assemble_augmented(
    d_s: Vec<SyntheticItem>,
    rewrites: Vec<SyntheticItem>,
    fusions: Vec<SyntheticItem>,
) -> Vec<SyntheticItem> {
    let mut all = d_s;
    all.extend(rewrites);
    all.extend(fusions);
    crate::corpus::dedupe_by_question(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatClient, ChatResponse, ClientError, RetryPolicy};
    use std::sync::Arc;

    struct FnClient<F>(F);
    impl<F> ChatClient for FnClient<F>
    where
        F: Fn(&ChatRequest) -> Result<ChatResponse, ClientError> + Send + Sync,
    {
        fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
            (self.0)(request)
        }
    }

    fn gateway<F>(f: F) -> Gateway
    where
        F: Fn(&ChatRequest) -> Result<ChatResponse, ClientError> + Send + Sync + 'static,
    {
        Gateway::with_policy(Arc::new(FnClient(f)), RetryPolicy::immediate(1), 4)
    }

    fn reply(completions: Vec<String>) -> Result<ChatResponse, ClientError> {
        Ok(ChatResponse { completions, model_id: "fake".into(), usage: None })
    }

    fn item(id_hint: &str, kc_ids: &[&str]) -> SyntheticItem {
        SyntheticItem {
            id: format!("syn-{id_hint}"),
            question: format!("question {id_hint}"),
            answer: format!("answer {id_hint}"),
            kc_ids: kc_ids.iter().map(|s| s.to_string()).collect(),
            provenance: Provenance {
                strategy: Strategy::Global,
                parent_ids: vec![],
                generation_params: BTreeMap::new(),
            },
            stage1_score: None,
            cds_score: None,
        }
    }

    #[test]
    fn parse_qa_handles_blocks_and_rejects_fragments() {
        let text = "Sure!\nQuestion:\nIf a train goes 60 mph\nfor 2 hours, how far?\nAnswer:\n120 miles.\nKCs: Rates; Multiplication\n";
        let qa = parse_qa(text).unwrap();
        assert_eq!(qa.question, "If a train goes 60 mph\nfor 2 hours, how far?");
        assert_eq!(qa.answer, "120 miles.");
        assert_eq!(qa.kcs, vec!["Rates", "Multiplication"]);

        let inline = "Question: 2+2?\nAnswer: 4\nKCs: Addition";
        assert!(parse_qa(inline).is_some());

        assert!(parse_qa("Question: x\nAnswer: y").is_none(), "missing KCs");
        assert!(parse_qa("Question: x\nKCs: a").is_none(), "missing answer");
        assert!(parse_qa("Question:\nAnswer: y\nKCs: a").is_none(), "empty question");
    }

    #[test]
    fn config_rejects_overcommitted_fractions() {
        let config = SynthesisConfig { p_rewrite: 0.7, p_fusion: 0.5, ..Default::default() };
        assert!(matches!(
            config.validate(),
            Err(SynthesisError::InvalidConfig { field: "p_fusion", .. })
        ));
    }

    #[test]
    fn global_synthesis_tags_items_with_the_target_kc() {
        let kcs = vec![
            KnowledgeComponent { kc_id: "kc-a".into(), label: "Fractions".into() },
            KnowledgeComponent { kc_id: "kc-b".into(), label: "Ratios".into() },
        ];
        let gw = gateway(|req| {
            let prompt = &req.messages[0].content;
            let label = if prompt.contains("Fractions") { "Fractions" } else { "Ratios" };
            reply(vec![
                "unparseable garbage".into(),
                format!("Question: about {label}?\nAnswer: yes\nKCs: {label}"),
            ])
        });
        let templates = TemplateStore::builtin();
        let config = SynthesisConfig { n_per_weak_kc: 2, ..Default::default() };
        let outcome =
            synthesize_global(&kcs, &gw, &templates, &config, TaskKind::Math).unwrap();
        assert_eq!(outcome.items.len(), 4);
        assert!(outcome.failures.is_empty());
        for item in &outcome.items {
            assert_eq!(item.kc_ids.len(), 1);
            assert!(item.provenance.parent_ids.is_empty());
            assert_eq!(item.provenance.strategy, Strategy::Global);
            assert_eq!(item.provenance.generation_params["selected_index"], "1");
            assert!(item.provenance.generation_params.contains_key("alt_0"));
        }
    }

    #[test]
    fn fine_grained_inherits_weak_kcs_and_skips_empty_diagnoses() {
        use crate::corpus::ErrorCase;
        let kc_set = KCSet::from_labels(["Carrying"]).unwrap();
        let kc_id = kc_set.iter().next().unwrap().kc_id.clone();
        let mk_record = |sid: &str, weak: BTreeSet<String>| DiagnosticRecord {
            error_case: ErrorCase {
                sample_id: sid.into(),
                question: "17+25?".into(),
                erroneous_response: "#### 32".into(),
                kc_ids: BTreeSet::from([kc_id.clone()]),
            },
            p_diag: "forgot the carry".into(),
            weak_kc_ids: weak,
            unmatched_weak_labels: vec![],
        };
        let records = vec![
            mk_record("s1", BTreeSet::from([kc_id.clone()])),
            mk_record("s2", BTreeSet::new()),
        ];
        let gw = gateway(|_| reply(vec!["Question: 38+47?\nAnswer: 85\nKCs: Carrying".into()]));
        let templates = TemplateStore::builtin();
        let outcome = synthesize_fine_grained(
            &records,
            &kc_set,
            &gw,
            &templates,
            &SynthesisConfig::default(),
            TaskKind::Math,
        )
        .unwrap();
        assert_eq!(outcome.items.len(), 1);
        assert_eq!(outcome.items[0].kc_ids, BTreeSet::from([kc_id]));
        assert_eq!(outcome.items[0].provenance.parent_ids, vec!["s1".to_string()]);
        assert_eq!(outcome.failures.len(), 1);
        assert!(outcome.failures[0].reason.contains("skipped"));
    }

    #[test]
    fn rewrite_enforces_exact_kc_set_with_one_reprompt() {
        let kc_set = KCSet::from_labels(["Addition", "Carrying"]).unwrap();
        let add = kc_set.by_label("Addition").unwrap().kc_id.clone();
        let items = vec![item("p1", &[&add])];
        // first reply declares an extra KC; the corrective retry fixes it
        let gw = gateway(|req| {
            if req.messages.len() > 1 {
                reply(vec!["Question: rewritten\nAnswer: fixed\nKCs: addition".into()])
            } else {
                reply(vec!["Question: rewritten\nAnswer: draft\nKCs: Addition; Carrying".into()])
            }
        });
        let templates = TemplateStore::builtin();
        let config = SynthesisConfig { p_rewrite: 1.0, p_fusion: 0.0, ..Default::default() };
        let outcome =
            augment_rewrite(&items, &kc_set, &gw, &templates, &config, TaskKind::Math).unwrap();
        assert_eq!(outcome.sampled, 1);
        assert_eq!(outcome.rewrites.len(), 1);
        let rewrite = &outcome.rewrites[0];
        assert_eq!(rewrite.kc_ids, items[0].kc_ids);
        assert_eq!(rewrite.provenance.parent_ids, vec![items[0].id.clone()]);
        assert_eq!(rewrite.provenance.generation_params["reprompted"], "true");
        assert_eq!(rewrite.answer, "fixed");
    }

    #[test]
    fn rewrite_rejects_persistent_kc_violations() {
        let kc_set = KCSet::from_labels(["Addition"]).unwrap();
        let add = kc_set.by_label("Addition").unwrap().kc_id.clone();
        let items = vec![item("p1", &[&add])];
        let gw = gateway(|_| {
            reply(vec!["Question: q\nAnswer: a\nKCs: Telepathy".into()])
        });
        let templates = TemplateStore::builtin();
        let config = SynthesisConfig { p_rewrite: 1.0, p_fusion: 0.0, ..Default::default() };
        let outcome =
            augment_rewrite(&items, &kc_set, &gw, &templates, &config, TaskKind::Math).unwrap();
        assert!(outcome.rewrites.is_empty());
        assert_eq!(outcome.rejections.len(), 1);
        assert!(outcome.rejections[0].reason.contains("kc-violation"));
    }

    #[test]
    fn rewrite_sample_size_and_choice_are_seeded() {
        let kc_set = KCSet::from_labels(["Addition"]).unwrap();
        let add = kc_set.by_label("Addition").unwrap().kc_id.clone();
        let items: Vec<SyntheticItem> =
            (0..8).map(|i| item(&format!("p{i}"), &[&add])).collect();
        let gw = gateway(|req| {
            // echo a question derived from the prompt so ids differ per parent
            let tag = req.messages[0]
                .content
                .lines()
                .find(|l| l.starts_with("question "))
                .unwrap_or("question x")
                .to_string();
            reply(vec![format!("Question: new {tag}\nAnswer: a\nKCs: Addition")])
        });
        let templates = TemplateStore::builtin();
        let config =
            SynthesisConfig { p_rewrite: 0.25, p_fusion: 0.0, seed: 11, ..Default::default() };
        let first =
            augment_rewrite(&items, &kc_set, &gw, &templates, &config, TaskKind::Math).unwrap();
        let second =
            augment_rewrite(&items, &kc_set, &gw, &templates, &config, TaskKind::Math).unwrap();
        // ceil(0.25 * 8) = 2 parents, same ones both times
        assert_eq!(first.sampled, 2);
        let parents = |o: &RewriteOutcome| -> Vec<String> {
            o.rewrites.iter().map(|r| r.provenance.parent_ids[0].clone()).collect()
        };
        assert_eq!(parents(&first), parents(&second));
    }

    #[test]
    fn fusion_unions_kcs_and_respects_the_cap() {
        let kc_set = KCSet::from_labels(["A", "B", "C", "D"]).unwrap();
        let id = |l: &str| kc_set.by_label(l).unwrap().kc_id.clone();
        let items = vec![
            item("p0", &[&id("A"), &id("B")]),
            item("p1", &[&id("C")]),
            item("p2", &[&id("A"), &id("C"), &id("D")]),
        ];
        let gw = gateway(move |req| {
            // declare exactly the KCs the prompt asked for
            let line = req.messages[0]
                .content
                .lines()
                .find(|l| l.starts_with("Combined KCs:"))
                .unwrap()
                .trim_start_matches("Combined KCs:")
                .trim()
                .to_string();
            reply(vec![format!("Question: fused\nAnswer: both\nKCs: {line}")])
        });
        let templates = TemplateStore::builtin();
        let config = SynthesisConfig {
            p_rewrite: 0.0,
            p_fusion: 1.0,
            max_kcs_per_item: 3,
            seed: 3,
            ..Default::default()
        };
        let outcome =
            augment_fuse(&items, &kc_set, &gw, &templates, &config, TaskKind::Math).unwrap();
        assert!(outcome.pairs_formed >= 1);
        for fused in &outcome.fusions {
            assert!(fused.kc_ids.len() <= 3);
            assert_eq!(fused.provenance.parent_ids.len(), 2);
            // union of the two parents, exactly
            let parents: Vec<&SyntheticItem> = fused
                .provenance
                .parent_ids
                .iter()
                .map(|pid| items.iter().find(|i| &i.id == pid).unwrap())
                .collect();
            let union: BTreeSet<String> =
                parents[0].kc_ids.union(&parents[1].kc_ids).cloned().collect();
            assert_eq!(fused.kc_ids, union);
        }
    }

    #[test]
    fn fusion_with_no_feasible_pair_is_an_error() {
        let kc_set = KCSet::from_labels(["A", "B", "C", "D"]).unwrap();
        let id = |l: &str| kc_set.by_label(l).unwrap().kc_id.clone();
        let items = vec![
            item("p0", &[&id("A"), &id("B")]),
            item("p1", &[&id("C"), &id("D")]),
        ];
        let gw = gateway(|_| reply(vec!["unused".into()]));
        let templates = TemplateStore::builtin();
        let config = SynthesisConfig {
            p_rewrite: 0.0,
            p_fusion: 1.0,
            max_kcs_per_item: 3,
            ..Default::default()
        };
        let err = augment_fuse(&items, &kc_set, &gw, &templates, &config, TaskKind::Math)
            .unwrap_err();
        assert!(matches!(err, SynthesisError::NoFeasiblePairs { cap: 3 }));
    }

    #[test]
    fn assembled_set_dedupes_across_sources() {
        let d_s = vec![item("a", &["kc-1"]), item("b", &["kc-1"])];
        let mut rewrite = item("c", &["kc-1"]);
        rewrite.question = items_question_copy(&d_s[0]);
        let fusion = item("d", &["kc-1"]);
        let assembled = assemble_augmented(d_s, vec![rewrite], vec![fusion]);
        assert_eq!(assembled.len(), 3);
        assert_eq!(assembled[0].id, "syn-a");
    }

    fn items_question_copy(item: &SyntheticItem) -> String {
        // same text modulo whitespace/case, to exercise normalization
        format!("  {}  ", item.question.to_uppercase())
    }
}
