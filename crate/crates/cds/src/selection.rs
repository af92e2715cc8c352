//! Two-stage selection of synthetic items, plus baseline selectors.
//!
//! Stage one asks the advanced model to score each item 0-10 and keeps
//! those at or above `theta`. Stage two scores the survivors by summing,
//! over each item's KCs, a value that rewards well-mastered KCs
//! (`w1 * ln(acc + eps)`) and well-covered KCs (`w2 * ln(freq + eps)`),
//! then keeps items scoring at or above one population standard
//! deviation below the mean. Low-accuracy or rare KCs drag an item's
//! score down, so the cut removes items built on shaky ground.
//!
//! The baseline selectors (random, longest, diversity, k-center,
//! low-perplexity) exist for size-matched comparisons; they share the
//! same inputs and the same "return a subset in corpus order" contract.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_jsonl, CorpusError, JsonlRecord, KCSet, SyntheticItem};
use crate::diagnosis::KCProfile;
use crate::gateway::templates::{template_id, TemplateError, TemplateStore};
use crate::gateway::{parallel_map, ChatRequest, Gateway, Message, SamplingParams};

const WORKERS: usize = 8;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("{0} got empty input")]
    EmptyInput(&'static str),
    #[error("cannot select {k} items from {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("invalid selection parameter {name}: {message}")]
    InvalidParam { name: &'static str, message: String },
    #[error("item {0} has no cds_score")]
    MissingScore(String),
    #[error("no embedding for item {0}")]
    MissingEmbedding(String),
    #[error("embedding for {id} has {got} dims, expected {expected}")]
    EmbeddingDimensionMismatch { id: String, expected: usize, got: usize },
    #[error("no perplexity for item {0}")]
    MissingPerplexity(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Knobs for both selection stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionParams {
    /// Stage-one keep threshold on the 0-10 model score.
    pub theta: i64,
    /// Weight on the accuracy term.
    pub w1: f64,
    /// Weight on the frequency term.
    pub w2: f64,
    /// Keeps the logs finite at zero accuracy or frequency.
    pub epsilon: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self { theta: 8, w1: 0.85, w2: 0.15, epsilon: 1e-6 }
    }
}

impl SelectionParams {
    pub fn validate(&self) -> Result<(), SelectionError> {
        let bad = |name: &'static str, message: String| {
            Err(SelectionError::InvalidParam { name, message })
        };
        if !(0..=10).contains(&self.theta) {
            return bad("theta", format!("{} outside [0, 10]", self.theta));
        }
        if !(self.w1 > 0.0) {
            return bad("w1", format!("{} must be > 0", self.w1));
        }
        if !(self.w2 > 0.0) {
            return bad("w2", format!("{} must be > 0", self.w2));
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", format!("{} must be > 0", self.epsilon));
        }
        Ok(())
    }
}

/// First integer after the literal `Score:` token, if it lands in [0, 10].
pub fn parse_score(text: &str) -> Option<i64> {
    let idx = text.find("Score:")?;
    let tail = &text[idx + "Score:".len()..];
    let bytes = tail.as_bytes();
    let mut i = 0;
    while i < bytes.len() && !bytes[i].is_ascii_digit() && bytes[i] != b'-' {
        i += 1;
    }
    let negative = i < bytes.len() && bytes[i] == b'-';
    if negative {
        i += 1;
    }
    let start = i;
    while i < bytes.len() && bytes[i].is_ascii_digit() {
        i += 1;
    }
    if i == start {
        return None;
    }
    let value: i64 = tail[start..i].parse().ok()?;
    let value = if negative { -value } else { value };
    (0..=10).contains(&value).then_some(value)
}

/// An item dropped by stage one, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedItem {
    pub item: SyntheticItem,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct Stage1Outcome {
    pub kept: Vec<SyntheticItem>,
    pub dropped: Vec<DroppedItem>,
}

/// Stage one: model-score every item, keep those with score >= theta.
/// The parsed score is recorded on kept and dropped items alike.
pub fn stage1_filter(
    items: Vec<SyntheticItem>,
    kc_set: &KCSet,
    gateway: &Gateway,
    templates: &TemplateStore,
    params: &SelectionParams,
    task_kind: crate::corpus::TaskKind,
) -> Result<Stage1Outcome, SelectionError> {
    params.validate()?;
    if items.is_empty() {
        return Err(SelectionError::EmptyInput("stage1_filter"));
    }
    let template = template_id("score", task_kind);
    let mut prompts = Vec::with_capacity(items.len());
    for item in &items {
        let labels = item
            .kc_ids
            .iter()
            .map(|id| {
                kc_set
                    .label_for(id)
                    .map(str::to_string)
                    // unknown ids still get scored; the label falls back to the id
                    .unwrap_or_else(|| id.clone())
            })
            .collect::<Vec<_>>()
            .join("; ");
        prompts.push(templates.render(
            &template,
            &BTreeMap::from([
                ("question", item.question.clone()),
                ("answer", item.answer.clone()),
                ("kc_labels", labels),
            ]),
        )?);
    }

    let scores = parallel_map(&prompts, WORKERS, |_, prompt| score_one(prompt, gateway));

    let mut outcome = Stage1Outcome::default();
    for (mut item, scored) in items.into_iter().zip(scores) {
        match scored {
            Ok(score) => {
                item.stage1_score = Some(score);
                if score >= params.theta {
                    outcome.kept.push(item);
                } else {
                    outcome.dropped.push(DroppedItem {
                        item,
                        reason: format!("score {score} below theta {}", params.theta),
                    });
                }
            }
            Err(reason) => outcome.dropped.push(DroppedItem { item, reason }),
        }
    }
    Ok(outcome)
}

fn score_one(prompt: &str, gateway: &Gateway) -> Result<i64, String> {
    let request = ChatRequest::new(vec![Message::user(prompt)], SamplingParams::scoring(), 1)
        .map_err(|e| format!("llm-failure: {e}"))?;
    let response = gateway.complete(&request).map_err(|e| format!("llm-failure: {e}"))?;
    parse_score(&response.completions[0])
        .ok_or_else(|| "parse-failure: no Score in [0, 10]".to_string())
}

/// Per-KC frequency over the augmented set: tagged items / all items.
pub fn compute_freq_a(d_a: &[SyntheticItem]) -> Result<BTreeMap<String, f64>, SelectionError> {
    if d_a.is_empty() {
        return Err(SelectionError::EmptyInput("compute_freq_a"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for item in d_a {
        for kc in &item.kc_ids {
            *counts.entry(kc.clone()).or_default() += 1;
        }
    }
    let n = d_a.len() as f64;
    Ok(counts.into_iter().map(|(kc, c)| (kc, c as f64 / n)).collect())
}

/// Accuracy and frequency lookups backing the stage-two score.
#[derive(Debug, Clone)]
pub struct ScoreContext {
    pub acc: BTreeMap<String, f64>,
    pub freq_a: BTreeMap<String, f64>,
    /// KCs whose accuracy had to be imputed (no tagged question in the
    /// diagnosis corpus); their value is `imputed_acc`.
    pub imputed: BTreeSet<String>,
    pub imputed_acc: f64,
}

/// Build the stage-two context: accuracies from the diagnosed profile,
/// frequencies from the augmented set. KCs present in `d_a` but never
/// measured get the mean of the measured accuracies (1.0 when nothing
/// was measured at all), and are flagged as imputed.
pub fn build_score_context(
    profile: &KCProfile,
    d_a: &[SyntheticItem],
) -> Result<ScoreContext, SelectionError> {
    let freq_a = compute_freq_a(d_a)?;
    let mut acc: BTreeMap<String, f64> = profile
        .entries
        .iter()
        .filter_map(|e| e.accuracy.map(|a| (e.kc_id.clone(), a)))
        .collect();
    let measured: Vec<f64> = acc.values().copied().collect();
    let imputed_acc = if measured.is_empty() {
        1.0
    } else {
        measured.iter().sum::<f64>() / measured.len() as f64
    };
    let mut imputed = BTreeSet::new();
    for kc in freq_a.keys() {
        if !acc.contains_key(kc) {
            acc.insert(kc.clone(), imputed_acc);
            imputed.insert(kc.clone());
        }
    }
    Ok(ScoreContext { acc, freq_a, imputed, imputed_acc })
}

/// Value of one KC: `w1 * ln(acc + eps) + w2 * ln(freq_a + eps)`.
pub fn kc_value(acc: f64, freq_a: f64, params: &SelectionParams) -> f64 {
    params.w1 * (acc + params.epsilon).ln() + params.w2 * (freq_a + params.epsilon).ln()
}

/// Stage-two score of an item: the sum of its KC values, accumulated in
/// KC-id order. The score is exactly that sum — same order, same floats.
pub fn cds_score(item: &SyntheticItem, ctx: &ScoreContext, params: &SelectionParams) -> f64 {
    item.kc_ids
        .iter()
        .map(|kc| {
            let acc = ctx.acc.get(kc).copied().unwrap_or(ctx.imputed_acc);
            let freq = ctx.freq_a.get(kc).copied().unwrap_or(0.0);
            kc_value(acc, freq, params)
        })
        .sum()
}

/// Score every item, recording the score on it.
pub fn score_items(
    mut items: Vec<SyntheticItem>,
    ctx: &ScoreContext,
    params: &SelectionParams,
) -> Vec<SyntheticItem> {
    for item in &mut items {
        item.cds_score = Some(cds_score(item, ctx, params));
    }
    items
}

#[derive(Debug, Clone)]
pub struct OneSigmaOutcome {
    pub retained: Vec<SyntheticItem>,
    pub mean: f64,
    pub std_dev: f64,
    pub cutoff: f64,
}

/// Summary statistics of a scored set before the one-sigma cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std_dev: f64,
    pub cutoff: f64,
}

/// Keep items scoring at or above `mean - std_dev` (population standard
/// deviation); input order is preserved.
pub fn select_one_sigma(items: Vec<SyntheticItem>) -> Result<OneSigmaOutcome, SelectionError> {
    if items.is_empty() {
        return Err(SelectionError::EmptyInput("select_one_sigma"));
    }
    let mut scores = Vec::with_capacity(items.len());
    for item in &items {
        scores.push(item.cds_score.ok_or_else(|| SelectionError::MissingScore(item.id.clone()))?);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let variance = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let std_dev = variance.sqrt();
    let cutoff = mean - std_dev;
    let retained = items
        .into_iter()
        .zip(&scores)
        .filter(|(_, &s)| s >= cutoff)
        .map(|(item, _)| item)
        .collect();
    Ok(OneSigmaOutcome { retained, mean, std_dev, cutoff })
}

/// The k highest-scoring items (by `cds_score`), returned in input order;
/// ties break toward earlier items.
pub fn select_top_k(
    items: &[SyntheticItem],
    k: usize,
) -> Result<Vec<SyntheticItem>, SelectionError> {
    check_k(k, items.len())?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    for (i, item) in items.iter().enumerate() {
        if item.cds_score.is_none() {
            return Err(SelectionError::MissingScore(items[i].id.clone()));
        }
    }
    order.sort_by(|&a, &b| {
        let sa = items[a].cds_score.unwrap();
        let sb = items[b].cds_score.unwrap();
        sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    Ok(in_corpus_order(items, &order[..k]))
}

fn check_k(k: usize, n: usize) -> Result<(), SelectionError> {
    if k > n {
        return Err(SelectionError::KTooLarge { k, n });
    }
    Ok(())
}

fn in_corpus_order(items: &[SyntheticItem], chosen: &[usize]) -> Vec<SyntheticItem> {
    let mut chosen: Vec<usize> = chosen.to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| items[i].clone()).collect()
}

// ---- baseline selectors ------------------------------------------------

/// Seeded uniform sample of k items, without replacement.
pub fn select_random(
    items: &[SyntheticItem],
    k: usize,
    seed: u64,
) -> Result<Vec<SyntheticItem>, SelectionError> {
    check_k(k, items.len())?;
    let mut indices: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    Ok(in_corpus_order(items, &indices[..k]))
}

/// The k longest items by question + answer character count.
pub fn select_longest(
    items: &[SyntheticItem],
    k: usize,
) -> Result<Vec<SyntheticItem>, SelectionError> {
    check_k(k, items.len())?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    let length = |i: usize| {
        items[i].question.chars().count() + items[i].answer.chars().count()
    };
    order.sort_by(|&a, &b| length(b).cmp(&length(a)).then(a.cmp(&b)));
    Ok(in_corpus_order(items, &order[..k]))
}

/// ROUGE-L F1 between two texts over whitespace tokens.
pub fn rouge_l_f1(candidate: &str, reference: &str) -> f64 {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refr: Vec<&str> = reference.split_whitespace().collect();
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    // classic O(m*n) LCS table, rolling rows
    let mut prev = vec![0usize; refr.len() + 1];
    let mut curr = vec![0usize; refr.len() + 1];
    for c in &cand {
        for (j, r) in refr.iter().enumerate() {
            curr[j + 1] = if c == r { prev[j] + 1 } else { prev[j + 1].max(curr[j]) };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    let lcs = prev[refr.len()] as f64;
    let precision = lcs / cand.len() as f64;
    let recall = lcs / refr.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Diversity baseline: the k items whose questions have the lowest mean
/// ROUGE-L F1 against a seeded reference subset (self-comparisons are
/// excluded).
pub fn select_diverse_rouge(
    items: &[SyntheticItem],
    k: usize,
    n_subset: usize,
    seed: u64,
) -> Result<Vec<SyntheticItem>, SelectionError> {
    check_k(k, items.len())?;
    if n_subset == 0 {
        return Err(SelectionError::InvalidParam {
            name: "n_subset",
            message: "must be >= 1".into(),
        });
    }
    let mut indices: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let subset: Vec<usize> = indices[..n_subset.min(items.len())].to_vec();

    let means: Vec<f64> = (0..items.len())
        .map(|i| {
            let mut total = 0.0;
            let mut count = 0usize;
            for &j in &subset {
                if j == i {
                    continue;
                }
                total += rouge_l_f1(&items[i].question, &items[j].question);
                count += 1;
            }
            if count == 0 { 0.0 } else { total / count as f64 }
        })
        .collect();
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        means[a].partial_cmp(&means[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    Ok(in_corpus_order(items, &order[..k]))
}

/// Greedy k-center selection on item embeddings (Euclidean distance):
/// start at the point nearest the centroid, then repeatedly add the
/// point farthest from the chosen set. Classic 2-approximation.
pub fn select_kcenter(
    items: &[SyntheticItem],
    embeddings: &BTreeMap<String, Vec<f64>>,
    k: usize,
) -> Result<Vec<SyntheticItem>, SelectionError> {
    check_k(k, items.len())?;
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut vectors: Vec<&Vec<f64>> = Vec::with_capacity(items.len());
    for item in items {
        let v = embeddings
            .get(&item.id)
            .ok_or_else(|| SelectionError::MissingEmbedding(item.id.clone()))?;
        if let Some(first) = vectors.first() {
            if v.len() != first.len() {
                return Err(SelectionError::EmbeddingDimensionMismatch {
                    id: item.id.clone(),
                    expected: first.len(),
                    got: v.len(),
                });
            }
        }
        vectors.push(v);
    }
    let dims = vectors[0].len();
    let mut centroid = vec![0.0f64; dims];
    for v in &vectors {
        for (c, x) in centroid.iter_mut().zip(v.iter()) {
            *c += x;
        }
    }
    for c in &mut centroid {
        *c /= items.len() as f64;
    }
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // ties always break toward the lower index, keeping the run reproducible
    let start = (0..items.len())
        .min_by(|&a, &b| {
            dist2(vectors[a], &centroid)
                .partial_cmp(&dist2(vectors[b], &centroid))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        })
        .expect("nonempty");
    let mut chosen = vec![start];
    let mut min_dist2: Vec<f64> =
        (0..items.len()).map(|i| dist2(vectors[i], vectors[start])).collect();
    while chosen.len() < k {
        let next = (0..items.len())
            .max_by(|&a, &b| {
                min_dist2[a]
                    .partial_cmp(&min_dist2[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a)) // max_by keeps the later of equals; invert
            })
            .expect("nonempty");
        chosen.push(next);
        for i in 0..items.len() {
            let d = dist2(vectors[i], vectors[next]);
            if d < min_dist2[i] {
                min_dist2[i] = d;
            }
        }
    }
    Ok(in_corpus_order(items, &chosen))
}

/// The k items with the lowest externally computed perplexity.
pub fn select_low_perplexity(
    items: &[SyntheticItem],
    perplexities: &BTreeMap<String, f64>,
    k: usize,
) -> Result<Vec<SyntheticItem>, SelectionError> {
    check_k(k, items.len())?;
    let mut ppl = Vec::with_capacity(items.len());
    for item in items {
        let p = perplexities
            .get(&item.id)
            .ok_or_else(|| SelectionError::MissingPerplexity(item.id.clone()))?;
        ppl.push(*p);
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        ppl[a].partial_cmp(&ppl[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    Ok(in_corpus_order(items, &order[..k]))
}

// ---- sidecar file loaders ----------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRow {
    id: String,
    vector: Vec<f64>,
}

impl JsonlRecord for EmbeddingRow {
    fn validate(&self) -> Result<(), String> {
        if self.vector.is_empty() {
            return Err("empty vector".into());
        }
        if self.vector.iter().any(|x| !x.is_finite()) {
            return Err("non-finite vector component".into());
        }
        Ok(())
    }
    fn dup_key(&self) -> Option<&str> {
        Some(&self.id)
    }
}

/// Load `{"id", "vector"}` JSONL into an id-keyed map.
pub fn load_embeddings(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, SelectionError> {
    let rows: Vec<EmbeddingRow> = load_jsonl(path)?;
    Ok(rows.into_iter().map(|r| (r.id, r.vector)).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct PerplexityRow {
    id: String,
    ppl: f64,
}

impl JsonlRecord for PerplexityRow {
    fn validate(&self) -> Result<(), String> {
        if !self.ppl.is_finite() {
            return Err("non-finite ppl".into());
        }
        Ok(())
    }
    fn dup_key(&self) -> Option<&str> {
        Some(&self.id)
    }
}

/// Load `{"id", "ppl"}` JSONL into an id-keyed map.
pub fn load_perplexities(path: &Path) -> Result<BTreeMap<String, f64>, SelectionError> {
    let rows: Vec<PerplexityRow> = load_jsonl(path)?;
    Ok(rows.into_iter().map(|r| (r.id, r.ppl)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Provenance, Strategy, TaskKind};
    use crate::gateway::{ChatClient, ChatResponse, ClientError, Gateway, RetryPolicy};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn item(id: &str, question: &str, kc_ids: &[&str]) -> SyntheticItem {
        SyntheticItem {
            id: id.into(),
            question: question.into(),
            answer: "answer".into(),
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

    fn scored(id: &str, score: f64) -> SyntheticItem {
        let mut it = item(id, id, &["kc-1"]);
        it.cds_score = Some(score);
        it
    }

    #[test]
    fn score_parsing_variants() {
        assert_eq!(parse_score("Score: 8 || Explanation: solid"), Some(8));
        assert_eq!(parse_score("Score: 1 || Explanation: the question is unclear"), Some(1));
        assert_eq!(parse_score("Score:9/10"), Some(9));
        assert_eq!(parse_score("preface\nScore: 10"), Some(10));
        assert_eq!(parse_score("Score: eleven"), None);
        assert_eq!(parse_score("Score: 11"), None);
        assert_eq!(parse_score("Score: -2"), None);
        assert_eq!(parse_score("no score at all"), None);
    }

    #[test]
    fn kc_value_matches_frozen_oracle() {
        let params = SelectionParams::default();
        let v = kc_value(1.0 / 3.0, 0.5, &params);
        assert!((v - (-1.037789672456010026)).abs() < 1e-12, "{v}");
        // near-perfect KC on a fully covered set is worth almost zero
        let near_zero = kc_value(1.0, 1.0, &params);
        assert!((near_zero - 9.9999949991806676e-7).abs() < 1e-18, "{near_zero}");
    }

    #[test]
    fn one_sigma_cut_matches_hand_computation() {
        let items = vec![
            scored("a", 0.0),
            scored("b", 0.0),
            scored("c", 0.0),
            scored("d", -10.0),
        ];
        let outcome = select_one_sigma(items).unwrap();
        assert_eq!(outcome.mean, -2.5);
        assert!((outcome.std_dev - 4.330127018922193).abs() < 1e-12);
        assert!((outcome.cutoff - (-6.830127018922193)).abs() < 1e-12);
        let ids: Vec<&str> = outcome.retained.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn one_sigma_boundary_is_inclusive() {
        // scores {1, 1, -1, -1}: mean 0, sigma 1, cutoff -1 exactly
        let items = vec![scored("a", 1.0), scored("b", 1.0), scored("c", -1.0), scored("d", -1.0)];
        let outcome = select_one_sigma(items).unwrap();
        assert_eq!(outcome.cutoff, -1.0);
        assert_eq!(outcome.retained.len(), 4, "items at the cutoff are retained");
    }

    #[test]
    fn stage1_threshold_is_inclusive_and_records_scores() {
        struct Fixed(&'static str);
        impl ChatClient for Fixed {
            fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ClientError> {
                let text = if req.messages[0].content.contains("keep me") {
                    "Score: 8 || Explanation: exactly at the bar"
                } else {
                    self.0
                };
                Ok(ChatResponse {
                    completions: vec![text.into()],
                    model_id: "m".into(),
                    usage: None,
                })
            }
        }
        let gw = Gateway::with_policy(
            Arc::new(Fixed("Score: 1 || Explanation: The question is of low quality.")),
            RetryPolicy::immediate(1),
            2,
        );
        let templates = TemplateStore::builtin();
        let kc_set = KCSet::from_labels(["Addition"]).unwrap();
        let kc = kc_set.iter().next().unwrap().kc_id.clone();
        let items = vec![item("good", "keep me", &[&kc]), item("bad", "drop me", &[&kc])];
        let outcome = stage1_filter(
            items,
            &kc_set,
            &gw,
            &templates,
            &SelectionParams::default(),
            TaskKind::Math,
        )
        .unwrap();
        assert_eq!(outcome.kept.len(), 1);
        assert_eq!(outcome.kept[0].id, "good");
        assert_eq!(outcome.kept[0].stage1_score, Some(8));
        assert_eq!(outcome.dropped.len(), 1);
        assert_eq!(outcome.dropped[0].item.stage1_score, Some(1));
        assert!(outcome.dropped[0].reason.contains("below theta"));
    }

    #[test]
    fn context_imputes_unmeasured_kcs() {
        use crate::diagnosis::{KCProfile, KCProfileEntry};
        let profile = KCProfile {
            student_model_id: "s".into(),
            thresholds: None,
            entries: vec![
                KCProfileEntry {
                    kc_id: "kc-a".into(),
                    label: "A".into(),
                    accuracy: Some(0.2),
                    frequency: 0.5,
                    tagged_count: 2,
                    correct_count: 1,
                },
                KCProfileEntry {
                    kc_id: "kc-b".into(),
                    label: "B".into(),
                    accuracy: Some(0.6),
                    frequency: 0.5,
                    tagged_count: 2,
                    correct_count: 1,
                },
            ],
        };
        let d_a = vec![item("x", "q1", &["kc-a", "kc-new"]), item("y", "q2", &["kc-b"])];
        let ctx = build_score_context(&profile, &d_a).unwrap();
        assert_eq!(ctx.acc["kc-a"], 0.2);
        assert!((ctx.acc["kc-new"] - 0.4).abs() < 1e-15, "mean of measured accuracies");
        assert!(ctx.imputed.contains("kc-new"));
        assert_eq!(ctx.freq_a["kc-b"], 0.5);
    }

    #[test]
    fn rouge_matches_hand_lcs() {
        assert!((rouge_l_f1("a b c d", "a c d e") - 0.75).abs() < 1e-15);
        assert_eq!(rouge_l_f1("same text", "same text"), 1.0);
        assert_eq!(rouge_l_f1("alpha beta", "gamma delta"), 0.0);
        assert_eq!(rouge_l_f1("", "anything"), 0.0);
    }

    #[test]
    fn diversity_prefers_the_odd_one_out() {
        let items = vec![
            item("dup1", "the cat sat on the mat", &["kc-1"]),
            item("dup2", "the cat sat on the mat", &["kc-1"]),
            item("odd", "quantum flux resonator calibration", &["kc-1"]),
        ];
        let chosen = select_diverse_rouge(&items, 1, 3, 42).unwrap();
        assert_eq!(chosen[0].id, "odd");
    }

    #[test]
    fn kcenter_covers_the_line() {
        let items = vec![item("a", "q", &["kc-1"]), item("b", "q2", &["kc-1"]), item("c", "q3", &["kc-1"])];
        let embeddings = BTreeMap::from([
            ("a".to_string(), vec![0.0]),
            ("b".to_string(), vec![1.0]),
            ("c".to_string(), vec![10.0]),
        ]);
        let chosen = select_kcenter(&items, &embeddings, 2).unwrap();
        let ids: Vec<&str> = chosen.iter().map(|i| i.id.as_str()).collect();
        // centroid ~3.67 -> start at 1.0; farthest from it is 10.0
        assert_eq!(ids, vec!["b", "c"]);

        let missing = BTreeMap::from([("a".to_string(), vec![0.0])]);
        assert!(matches!(
            select_kcenter(&items, &missing, 1),
            Err(SelectionError::MissingEmbedding(_))
        ));
        let ragged = BTreeMap::from([
            ("a".to_string(), vec![0.0]),
            ("b".to_string(), vec![1.0, 2.0]),
            ("c".to_string(), vec![3.0]),
        ]);
        assert!(matches!(
            select_kcenter(&items, &ragged, 1),
            Err(SelectionError::EmbeddingDimensionMismatch { .. })
        ));
    }

    #[test]
    fn simple_selectors_are_deterministic_and_exact() {
        let items: Vec<SyntheticItem> = (0..10)
            .map(|i| item(&format!("i{i}"), &"x ".repeat(i + 1), &["kc-1"]))
            .collect();
        let r1 = select_random(&items, 4, 7).unwrap();
        let r2 = select_random(&items, 4, 7).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.len(), 4);

        let longest = select_longest(&items, 3).unwrap();
        let ids: Vec<&str> = longest.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, vec!["i7", "i8", "i9"]);

        let ppl: BTreeMap<String, f64> =
            items.iter().enumerate().map(|(i, it)| (it.id.clone(), 100.0 - i as f64)).collect();
        let low = select_low_perplexity(&items, &ppl, 2).unwrap();
        let ids: Vec<&str> = low.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, vec!["i8", "i9"]);

        assert!(matches!(
            select_random(&items, 11, 1),
            Err(SelectionError::KTooLarge { k: 11, n: 10 })
        ));
    }

    #[test]
    fn sidecar_loaders_round_trip_and_validate() {
        use tempfile::tempdir;
        let dir = tempdir().unwrap();
        let epath = dir.path().join("emb.jsonl");
        std::fs::write(
            &epath,
            "{\"id\":\"a\",\"vector\":[0.1,0.2]}\n{\"id\":\"b\",\"vector\":[0.3,0.4]}\n",
        )
        .unwrap();
        let emb = load_embeddings(&epath).unwrap();
        assert_eq!(emb["a"], vec![0.1, 0.2]);

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"id\":\"a\",\"vector\":[]}\n").unwrap();
        assert!(load_embeddings(&bad).is_err());

        let ppath = dir.path().join("ppl.jsonl");
        std::fs::write(&ppath, "{\"id\":\"a\",\"ppl\":12.5}\n").unwrap();
        let ppl = load_perplexities(&ppath).unwrap();
        assert_eq!(ppl["a"], 12.5);
    }

    proptest! {
        #[test]
        fn cds_score_is_exactly_additive(
            accs in proptest::collection::vec(0.0f64..=1.0, 1..5),
            freqs in proptest::collection::vec(0.0f64..=1.0, 5),
        ) {
            let params = SelectionParams::default();
            let kcs: Vec<String> = (0..accs.len()).map(|i| format!("kc-{i}")).collect();
            let ctx = ScoreContext {
                acc: kcs.iter().cloned().zip(accs.iter().copied()).collect(),
                freq_a: kcs.iter().cloned().zip(freqs.iter().copied()).collect(),
                imputed: BTreeSet::new(),
                imputed_acc: 1.0,
            };
            let refs: Vec<&str> = kcs.iter().map(String::as_str).collect();
            let it = item("x", "q", &refs);
            let total = cds_score(&it, &ctx, &params);
            let manual: f64 = it
                .kc_ids
                .iter()
                .map(|kc| kc_value(ctx.acc[kc], ctx.freq_a[kc], &params))
                .sum();
            prop_assert_eq!(total, manual, "bitwise-equal additivity");
        }

        #[test]
        fn one_sigma_never_drops_more_than_spread_allows(
            scores in proptest::collection::vec(-50.0f64..50.0, 1..40)
        ) {
            let items: Vec<SyntheticItem> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| scored(&format!("i{i}"), s))
                .collect();
            let outcome = select_one_sigma(items).unwrap();
            // retained set is nonempty: the max is always >= mean - sigma
            prop_assert!(!outcome.retained.is_empty());
            for it in &outcome.retained {
                prop_assert!(it.cds_score.unwrap() >= outcome.cutoff);
            }
        }
    }
}
