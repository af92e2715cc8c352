//! A ten-question corpus and a deterministic scripted model pair, shared
//! by the runnable examples so that every example works offline and
//! prints the same output on every run.
//!
//! The scripted model recognizes each prompt by the fixed opening
//! sentence of the template that produced it, finds the corpus question
//! embedded in the prompt when it needs one, and derives free-text
//! replies from content hashes. The student is scripted to get both
//! unit-conversion questions wrong, so diagnosis always finds exactly
//! one weak knowledge component.

use std::sync::Arc;

use cds::corpus::{Sample, TaskKind};
use cds::gateway::{ChatClient, ChatRequest, ChatResponse, ClientError, Gateway};
use cds::pipeline::Clients;
use sha2::{Digest, Sha256};

pub const ADVANCED_ID: &str = "scripted-tutor";
pub const STUDENT_ID: &str = "scripted-student";

/// question, reference answer, KC labels, student-answers-wrong
const SCRIPT: &[(&str, &str, &[&str], bool)] = &[
    (
        "A shelf holds 12 paperbacks and 7 hardcovers. How many books is that altogether?",
        "19",
        &["Addition"],
        false,
    ),
    (
        "A crate holds 6 rows of 9 bottles. How many bottles fit in the crate?",
        "54",
        &["Multiplication"],
        false,
    ),
    (
        "A $40 lamp is discounted by 25%. What does the lamp cost now?",
        "30",
        &["Percentages"],
        false,
    ),
    (
        "A trail run covers 5 kilometers. How many meters is that?",
        "5000",
        &["Unit conversion"],
        true,
    ),
    (
        "Three packs of 4 pens arrive, plus 5 loose pens. How many pens is that in total?",
        "17",
        &["Addition", "Multiplication"],
        false,
    ),
    (
        "In a class of 20 students, 40% wear glasses. How many students wear glasses?",
        "8",
        &["Percentages", "Multiplication"],
        false,
    ),
    (
        "A recipe calls for 2 liters of stock. How many milliliters of stock is that?",
        "2000",
        &["Unit conversion"],
        true,
    ),
    (
        "Seven boxes each hold 8 mugs. How many mugs are there in total?",
        "56",
        &["Multiplication"],
        false,
    ),
    (
        "Ana read 35 pages on Monday and 48 pages on Tuesday. How many pages did she read over both days?",
        "83",
        &["Addition"],
        false,
    ),
    (
        "A $50 dinner bill gets a 10% tip added. What is the total amount paid?",
        "55",
        &["Percentages", "Addition"],
        false,
    ),
];

/// The corpus as loadable samples, ids `q0..q9`.
pub fn corpus() -> Vec<Sample> {
    SCRIPT
        .iter()
        .enumerate()
        .map(|(i, (question, reference, _, _))| Sample {
            id: format!("q{i}"),
            question: question.to_string(),
            reference_answer: reference.to_string(),
            task_kind: TaskKind::Math,
            metadata: None,
        })
        .collect()
}

/// The corpus pre-tagged with its scripted labels, for examples that
/// start downstream of annotation.
pub fn tagged_corpus() -> (cds::corpus::KCSet, Vec<cds::corpus::TaggedSample>) {
    let kc_set = cds::corpus::KCSet::from_labels([
        "Addition",
        "Multiplication",
        "Percentages",
        "Unit conversion",
    ])
    .expect("canonical labels");
    let tagged = corpus()
        .into_iter()
        .zip(SCRIPT)
        .map(|(sample, (_, _, labels, _))| cds::corpus::TaggedSample {
            sample,
            kc_ids: labels
                .iter()
                .map(|l| kc_set.by_label(l).expect("scripted label").kc_id.clone())
                .collect(),
        })
        .collect();
    (kc_set, tagged)
}

/// Both endpoints, wired straight to scripted models.
pub fn clients() -> Clients {
    Clients::from_gateways(
        Gateway::new(Arc::new(ScriptedModel::new(ADVANCED_ID))),
        Gateway::new(Arc::new(ScriptedModel::new(STUDENT_ID))),
        ADVANCED_ID,
        STUDENT_ID,
    )
}

/// Deterministic stand-in for a chat-completion endpoint.
pub struct ScriptedModel {
    model_id: String,
}

impl ScriptedModel {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self { model_id: model_id.into() }
    }

    fn find(&self, prompt: &str) -> (&'static str, &'static str, &'static [&'static str], bool) {
        *SCRIPT
            .iter()
            .find(|(question, _, _, _)| prompt.contains(question))
            .unwrap_or_else(|| panic!("no scripted question in prompt: {}", head(prompt)))
    }

    fn respond(&self, prompt: &str, alt: usize) -> String {
        if prompt.starts_with("You are an experienced math teacher.") {
            let (_, _, labels, _) = self.find(prompt);
            format!("KCs: {}", labels.join("; "))
        } else if prompt.starts_with("Consolidate the raw knowledge component tags") {
            consolidate(prompt)
        } else if prompt.starts_with("Tag the question below") {
            let (_, _, labels, _) = self.find(prompt);
            format!("KCs: {}", labels.join("; "))
        } else if prompt.starts_with("Solve the math problem below.") {
            self.solve(prompt)
        } else if prompt.starts_with("A student answered the math question below incorrectly. Analyze") {
            let (_, _, labels, _) = self.find(prompt);
            format!(
                "The conversion factor is applied but the result is then nudged by one, \
                 so the final quantity drifts off the exact value.\nWeak KCs: {}",
                labels.join("; ")
            )
        } else if prompt.starts_with("Write one new math practice question") {
            synthesize_global(prompt, alt)
        } else if prompt.starts_with("A student answered the math question below incorrectly. Write") {
            synthesize_fine(prompt, alt)
        } else if prompt.starts_with("Rewrite the math question below") {
            rewrite(prompt, alt)
        } else if prompt.starts_with("Combine the two math questions below") {
            fuse(prompt, alt)
        } else if prompt.starts_with("Rate the quality of the math question-answer pair") {
            score(prompt)
        } else {
            panic!("scripted model got an unscripted prompt: {}", head(prompt));
        }
    }

    fn solve(&self, prompt: &str) -> String {
        let (_, reference, _, wrong) = self.find(prompt);
        let shown = if wrong {
            let n: i64 = reference.parse().expect("integer reference");
            (n + 1).to_string()
        } else {
            reference.to_string()
        };
        format!("I work through the quantities in the order given.\n#### {shown}")
    }
}

impl ChatClient for ScriptedModel {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let prompt = &request.messages[0].content;
        let completions = (0..request.n_samples as usize)
            .map(|alt| self.respond(prompt, alt))
            .collect();
        Ok(ChatResponse { completions, model_id: self.model_id.clone(), usage: None })
    }
}

// ---- prompt parsing and hashed free-text replies ------------------------

fn head(prompt: &str) -> String {
    prompt.chars().take(100).collect()
}

/// Remainder of the first line that starts with `key`.
fn line_value<'a>(prompt: &'a str, key: &str) -> &'a str {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no `{key}` line in prompt: {}", head(prompt)))
        .trim()
}

/// Text between the first `start` and the following `end`.
fn block<'a>(prompt: &'a str, start: &str, end: &str) -> &'a str {
    let from = prompt.find(start).unwrap_or_else(|| {
        panic!("no `{}` block in prompt: {}", start.trim(), head(prompt))
    }) + start.len();
    let to = prompt[from..].find(end).map(|i| from + i).unwrap_or(prompt.len());
    prompt[from..to].trim()
}

/// First eight bytes of a SHA-256 over the parts — the deterministic
/// "spark" behind every free-text reply.
fn hash64(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0]);
    }
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn consolidate(prompt: &str) -> String {
    let raw = line_value(prompt, "Raw tags:");
    let mut seen = Vec::new();
    for tag in raw.split(';').map(str::trim).filter(|t| !t.is_empty()) {
        if !seen.contains(&tag) {
            seen.push(tag);
        }
    }
    format!("KCs: {}", seen.join("; "))
}

fn synthesize_global(prompt: &str, alt: usize) -> String {
    let kc = line_value(prompt, "Knowledge component:");
    let variant = line_value(prompt, "Variant:");
    let h = hash64(&["global", kc, variant, &alt.to_string()]);
    let value = 11 + h % 89;
    format!(
        "Question:\nDrill {variant} for {kc}: scenario {h} describes two quantities \
         and asks for the combined result.\nAnswer:\nWorking scenario {h} through \
         step by step gives {value}.\n#### {value}\nKCs: {kc}"
    )
}

fn synthesize_fine(prompt: &str, alt: usize) -> String {
    let original = block(prompt, "Original question:\n", "\nStudent's response:");
    let weak = line_value(prompt, "Weak knowledge components:");
    let h = hash64(&["fine", original, &alt.to_string()]);
    let value = 11 + h % 89;
    format!(
        "Question:\nFollow-up practice {h}: a fresh scenario drills the same skills \
         with different quantities.\nAnswer:\nThe refreshed scenario resolves to \
         {value}.\n#### {value}\nKCs: {weak}"
    )
}

fn rewrite(prompt: &str, alt: usize) -> String {
    let question = block(prompt, "Question:\n", "\nAnswer:");
    let answer = block(prompt, "Answer:\n", "\nKCs:");
    let required = line_value(prompt, "KCs:");
    let h = hash64(&["rewrite", question, &alt.to_string()]);
    format!(
        "Question:\nRestated with fresh surface details ({h}): {question}\n\
         Answer:\nThe same result falls out by a different route. {answer}\nKCs: {required}"
    )
}

fn fuse(prompt: &str, alt: usize) -> String {
    let a = block(prompt, "Question A:\n", "\nAnswer A:");
    let b = block(prompt, "Question B:\n", "\nAnswer B:");
    let combined = line_value(prompt, "Combined KCs:");
    let h = hash64(&["fuse", a, b, &alt.to_string()]);
    let v1 = 11 + h % 89;
    let v2 = 7 + h % 61;
    format!(
        "Question:\nTwo-stage challenge {h}: settle the first scenario, then feed its \
         result into the companion scenario.\nAnswer:\nStage one gives {v1}; carrying \
         it into stage two yields {v2}.\n#### {v2}\nKCs: {combined}"
    )
}

fn score(prompt: &str) -> String {
    let question = block(prompt, "Question:\n", "\nAnswer:");
    let h = hash64(&["score", question]);
    let value = match h % 10 {
        0 => 2,
        1 | 2 => 7,
        _ => 8 + (h / 16) % 3,
    };
    format!(
        "Score: {value} || Explanation: The answer matches the question and the \
         listed components are genuinely exercised."
    )
}
