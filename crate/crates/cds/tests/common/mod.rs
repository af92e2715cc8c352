//! Shared scaffolding for the integration tests: a 40-question math
//! corpus plus a scripted stand-in for both chat models that knows how
//! to answer every prompt the pipeline can produce over that corpus.
//!
//! The stand-in is a pure function of the request — same request, same
//! completions, byte for byte — so a run recorded through it replays
//! identically from fixtures, and two direct runs agree exactly.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cds::corpus::{save_jsonl, Sample, TaskKind};
use cds::gateway::replay::RecordingClient;
use cds::gateway::{ChatClient, ChatRequest, ChatResponse, ClientError, Gateway};
use cds::pipeline::{Clients, PathsConfig, PipelineConfig};
use sha2::{Digest, Sha256};

// ---- the scripted corpus ----------------------------------------------

/// Canonical knowledge-component labels the scripted teacher works with.
pub const KC_LABELS: [&str; 8] = [
    "Addition",
    "Subtraction",
    "Multiplication",
    "Division",
    "Percentages",
    "Fraction arithmetic",
    "Unit conversion",
    "Estimation",
];

/// Labels the corpus is engineered to make weak: "Unit conversion" by
/// accuracy (1 of 5 answered correctly), "Estimation" by frequency
/// (tagged on a single question out of 39).
pub const WEAK_LABELS: [&str; 2] = ["Unit conversion", "Estimation"];

/// How a sample misbehaves when the scripted model handles it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quirk {
    None,
    /// First coarse tag comes back lowercased; consolidation must fold it.
    LowercaseTag,
    /// Constrained tagging adds a stray label once, then complies.
    StrayTagOnce,
    /// Constrained tagging adds a stray label on both attempts; the
    /// stray tag is dropped but the sample stays tagged.
    StrayTagAlways,
    /// Constrained tagging never produces a KCs line; the sample is
    /// excluded from the tagged corpus.
    Garbage,
}

/// One corpus question plus the script for how the models treat it.
#[derive(Debug, Clone)]
pub struct Scripted {
    pub sample: Sample,
    pub labels: Vec<&'static str>,
    /// The student answers this question incorrectly.
    pub wrong: bool,
    pub quirk: Quirk,
}

const SIX: [&str; 6] = [
    "Addition",
    "Subtraction",
    "Multiplication",
    "Division",
    "Percentages",
    "Fraction arithmetic",
];

fn question_for(i: usize, primary: &str, a: i64, b: i64) -> (String, String) {
    match primary {
        "Addition" => (
            format!(
                "Problem {i:02}: A library shelves {a} novels on Monday and {b} more on \
                 Tuesday. How many novels arrive across the two days?"
            ),
            (a + b).to_string(),
        ),
        "Subtraction" => (
            format!(
                "Problem {i:02}: A tank holds {} liters and {b} liters drain away. \
                 How many liters remain?",
                a * 10
            ),
            (a * 10 - b).to_string(),
        ),
        "Multiplication" => (
            format!(
                "Problem {i:02}: Each crate packs {a} jars and a pallet stacks {b} \
                 crates. How many jars sit on one pallet?"
            ),
            (a * b).to_string(),
        ),
        "Division" => (
            format!(
                "Problem {i:02}: A bakery splits {} rolls evenly among {b} baskets. \
                 How many rolls go in each basket?",
                a * b
            ),
            a.to_string(),
        ),
        "Percentages" => (
            format!(
                "Problem {i:02}: A jacket lists at {} dollars and the sale takes {} \
                 percent off. How many dollars is the discount?",
                a * 20,
                b * 10
            ),
            (a * b * 2).to_string(),
        ),
        "Fraction arithmetic" => (
            format!(
                "Problem {i:02}: A recipe needs {a} thirds of a cup of flour and \
                 another {b} thirds. How many thirds in total?"
            ),
            (a + b).to_string(),
        ),
        "Unit conversion" => (
            format!("Problem {i:02}: A trail runs {a} kilometers. How many meters is that?"),
            (a * 1000).to_string(),
        ),
        "Estimation" => (
            format!(
                "Problem {i:02}: Roughly how many seconds are in {a} minutes, to the \
                 nearest hundred?"
            ),
            (((a * 60) + 50) / 100 * 100).to_string(),
        ),
        other => panic!("no question template for {other}"),
    }
}

/// Build the 40-question script. The label assignment and wrong-answer
/// set are chosen so that exactly [`WEAK_LABELS`] come out weak under
/// the default thresholds (accuracy <= 0.6, frequency <= 0.05).
pub fn scripted_corpus() -> Vec<Scripted> {
    let unit_conversion: [usize; 5] = [6, 14, 22, 30, 38];
    let wrong_ids: [usize; 6] = [3, 6, 14, 17, 22, 30];

    (0..40)
        .map(|i| {
            let a = 3 + (i as i64 % 9);
            let b = 2 + (i as i64 % 5);
            let (labels, question, answer): (Vec<&str>, String, String) = if unit_conversion
                .contains(&i)
            {
                let labels = match i {
                    22 => vec!["Unit conversion", "Multiplication"],
                    30 => vec!["Unit conversion", "Division"],
                    _ => vec!["Unit conversion"],
                };
                let (q, ans) = question_for(i, "Unit conversion", a, b);
                (labels, q, ans)
            } else if i == 35 {
                let (q, ans) = question_for(i, "Estimation", a, b);
                (vec!["Estimation"], q, ans)
            } else if i == 20 {
                // answered with a thousands separator; must still grade correct
                (
                    vec!["Multiplication"],
                    format!(
                        "Problem {i:02}: A stadium seats 8 blocks of 125 fans. \
                         How many fans fill the stadium?"
                    ),
                    "1000".to_string(),
                )
            } else if i == 28 {
                // answered without the leading zero; must still grade correct
                (
                    vec!["Percentages"],
                    format!(
                        "Problem {i:02}: A tax rate of one half percent applies. \
                         Write the rate as a decimal number of percent."
                    ),
                    "0.5".to_string(),
                )
            } else {
                let primary = SIX[i % 6];
                let mut labels = vec![primary];
                if i % 3 == 0 {
                    labels.push(SIX[(i + 1) % 6]);
                }
                let (q, ans) = question_for(i, primary, a, b);
                (labels, q, ans)
            };

            let quirk = match i {
                39 => Quirk::Garbage,
                5 => Quirk::StrayTagOnce,
                12 => Quirk::StrayTagAlways,
                _ if i % 7 == 3 => Quirk::LowercaseTag,
                _ => Quirk::None,
            };

            Scripted {
                sample: Sample {
                    id: format!("s{i:02}"),
                    question,
                    reference_answer: answer,
                    task_kind: TaskKind::Math,
                    metadata: None,
                },
                labels,
                wrong: wrong_ids.contains(&i),
                quirk,
            }
        })
        .collect()
}

/// Per-label (tagged, correct) counts over the samples that survive
/// tagging — the independent oracle the pipeline's profile must match.
pub fn expected_tag_counts() -> BTreeMap<&'static str, (usize, usize)> {
    let mut counts: BTreeMap<&'static str, (usize, usize)> =
        KC_LABELS.iter().map(|l| (*l, (0, 0))).collect();
    for s in scripted_corpus() {
        if s.quirk == Quirk::Garbage {
            continue;
        }
        for label in &s.labels {
            let entry = counts.get_mut(label).expect("label in canonical set");
            entry.0 += 1;
            if !s.wrong {
                entry.1 += 1;
            }
        }
    }
    counts
}

/// Number of samples that end up in the tagged corpus.
pub fn expected_tagged() -> usize {
    scripted_corpus().iter().filter(|s| s.quirk != Quirk::Garbage).count()
}

/// Number of questions the student answers incorrectly (among tagged).
pub fn expected_errors() -> usize {
    scripted_corpus().iter().filter(|s| s.wrong && s.quirk != Quirk::Garbage).count()
}

// ---- the scripted models ------------------------------------------------

/// Deterministic stand-in for both the advanced and the student model.
///
/// It recognizes each prompt by the fixed opening sentence of the
/// template that produced it, finds the corpus question embedded in the
/// prompt when it needs one, and derives everything else from content
/// hashes. Unknown prompts panic: a test reaching this model with an
/// unscripted request is a bug worth a loud failure.
pub struct ProceduralLlm {
    model_id: String,
    script: Vec<Scripted>,
}

impl ProceduralLlm {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self { model_id: model_id.into(), script: scripted_corpus() }
    }

    fn find(&self, prompt: &str) -> &Scripted {
        self.script
            .iter()
            .find(|s| prompt.contains(&s.sample.question))
            .unwrap_or_else(|| {
                panic!("no scripted question in prompt: {}", head(prompt))
            })
    }

    fn respond(&self, prompt: &str, retry: bool, alt: usize) -> String {
        if prompt.starts_with("You are an experienced math teacher.") {
            self.coarse_tags(prompt)
        } else if prompt.starts_with("Consolidate the raw knowledge component tags") {
            consolidate(prompt)
        } else if prompt.starts_with("Tag the question below") {
            self.constrained_tags(prompt, retry)
        } else if prompt.starts_with("Solve the math problem below.") {
            self.solve(prompt)
        } else if prompt.starts_with(
            "A student answered the math question below incorrectly. Analyze",
        ) {
            self.diagnose(prompt)
        } else if prompt.starts_with("Write one new math practice question") {
            synthesize_global(prompt, alt)
        } else if prompt.starts_with(
            "A student answered the math question below incorrectly. Write",
        ) {
            synthesize_fine(prompt, alt)
        } else if prompt.starts_with("Rewrite the math question below") {
            rewrite(prompt, retry, alt)
        } else if prompt.starts_with("Combine the two math questions below") {
            fuse(prompt, alt)
        } else if prompt.starts_with("Rate the quality of the math question-answer pair") {
            score(prompt)
        } else {
            panic!("scripted model got an unscripted prompt: {}", head(prompt))
        }
    }

    fn coarse_tags(&self, prompt: &str) -> String {
        let s = self.find(prompt);
        let mut tags: Vec<String> = s.labels.iter().map(|l| l.to_string()).collect();
        if s.quirk == Quirk::LowercaseTag {
            tags[0] = tags[0].to_lowercase();
        }
        format!("KCs: {}", tags.join("; "))
    }

    fn constrained_tags(&self, prompt: &str, retry: bool) -> String {
        let s = self.find(prompt);
        match s.quirk {
            Quirk::Garbage => "I cannot map this question onto the given list.".to_string(),
            Quirk::StrayTagOnce if !retry => {
                format!("KCs: {}; Quantum flux", s.labels.join("; "))
            }
            Quirk::StrayTagAlways => {
                format!("KCs: {}; Quantum flux", s.labels.join("; "))
            }
            _ => format!("KCs: {}", s.labels.join("; ")),
        }
    }

    fn solve(&self, prompt: &str) -> String {
        let s = self.find(prompt);
        let shown = if s.wrong {
            let n: i64 = s.sample.reference_answer.parse().unwrap_or_else(|_| {
                panic!("wrong-answer sample {} needs an integer reference", s.sample.id)
            });
            (n + 1).to_string()
        } else {
            // two correct answers in unusual surface forms, to make the
            // grader's normalization earn its keep inside a full run
            match s.sample.id.as_str() {
                "s20" => "1,000".to_string(),
                "s28" => ".5".to_string(),
                _ => s.sample.reference_answer.clone(),
            }
        };
        format!("I work through the quantities in the order given.\n#### {shown}")
    }

    fn diagnose(&self, prompt: &str) -> String {
        let s = self.find(prompt);
        format!(
            "The working slips while handling {}: the quantities are combined in the \
             wrong order, so the final value drifts off by one step.\nWeak KCs: {}",
            s.labels[0].to_lowercase(),
            s.labels.join("; ")
        )
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }
}

impl ChatClient for ProceduralLlm {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let prompt = &request.messages[0].content;
        let retry = request.messages.len() > 1;
        let completions = (0..request.n_samples as usize)
            .map(|alt| self.respond(prompt, retry, alt))
            .collect();
        Ok(ChatResponse { completions, model_id: self.model_id.clone(), usage: None })
    }
}

// ---- prompt parsing and hashed free-text replies ------------------------

pub fn head(prompt: &str) -> String {
    prompt.chars().take(100).collect()
}

/// Remainder of the first line that starts with `key`.
pub fn line_value<'a>(prompt: &'a str, key: &str) -> &'a str {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no `{key}` line in prompt: {}", head(prompt)))
        .trim()
}

/// Text between the first `start` and the following `end`.
pub fn block<'a>(prompt: &'a str, start: &str, end: &str) -> &'a str {
    let from = prompt
        .find(start)
        .unwrap_or_else(|| panic!("no `{start}` in prompt: {}", head(prompt)))
        + start.len();
    let len = prompt[from..]
        .find(end)
        .unwrap_or_else(|| panic!("no `{end}` after `{start}` in prompt: {}", head(prompt)));
    prompt[from..from + len].trim()
}

/// First eight bytes of a salted SHA-256, as the deterministic "creative
/// spark" behind every free-text reply.
pub fn hash64(parts: &[&str]) -> u64 {
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
        let mut chars = tag.chars();
        let canonical = match chars.next() {
            Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
            None => continue,
        };
        if !seen.contains(&canonical) {
            seen.push(canonical);
        }
    }
    format!("KCs: {}", seen.join("; "))
}

fn synthesize_global(prompt: &str, alt: usize) -> String {
    let kc = line_value(prompt, "Knowledge component:");
    let variant = line_value(prompt, "Variant:");
    let h = hash64(&["global", kc, variant, &alt.to_string()]);
    // the full hash keys the scenario so distinct prompts can never
    // collide into one question and collapse in deduplication
    let scenario = h;
    let value = 11 + h % 89;
    format!(
        "Question:\nDrill {variant} for {kc}: scenario {scenario} describes two \
         quantities and asks for the combined result.\nAnswer:\nWorking scenario \
         {scenario} through step by step gives {value}.\n#### {value}\nKCs: {kc}"
    )
}

fn synthesize_fine(prompt: &str, alt: usize) -> String {
    let original = block(prompt, "Original question:\n", "\nStudent's response:");
    let weak = line_value(prompt, "Weak knowledge components:");
    let h = hash64(&["fine", original, &alt.to_string()]);
    let scenario = h;
    let value = 11 + h % 89;
    format!(
        "Question:\nFollow-up practice {scenario}: a fresh scenario drills the same \
         skills with different quantities.\nAnswer:\nThe refreshed scenario resolves \
         to {value}.\n#### {value}\nKCs: {weak}"
    )
}

fn rewrite(prompt: &str, retry: bool, alt: usize) -> String {
    let question = block(prompt, "Question:\n", "\nAnswer:");
    let answer = block(prompt, "Answer:\n", "\nKCs:");
    let required = line_value(prompt, "KCs:");
    let h = hash64(&["rewrite", question]);
    // a fifth of first attempts declare a label outside the KC set; half
    // of those repeat the offense when re-prompted and get rejected
    let violate = if retry { h % 10 == 0 } else { h % 5 == 0 };
    let kcs = if violate { format!("{required}; Signal processing") } else { required.to_string() };
    let tag = 100 + h % 900;
    let alt_note = if alt == 0 { String::new() } else { format!(" (phrasing {alt})") };
    format!(
        "Question:\nRestated with fresh surface details ({tag}){alt_note}: {question}\n\
         Answer:\nThe same result falls out by a different route. {answer}\nKCs: {kcs}"
    )
}

fn fuse(prompt: &str, alt: usize) -> String {
    let a = block(prompt, "Question A:\n", "\nAnswer A:");
    let b = block(prompt, "Question B:\n", "\nAnswer B:");
    let combined = line_value(prompt, "Combined KCs:");
    let h = hash64(&["fuse", a, b, &alt.to_string()]);
    let tag = h;
    let v1 = 11 + h % 89;
    let v2 = 7 + h % 61;
    format!(
        "Question:\nTwo-stage challenge {tag}: settle the first scenario, then feed \
         its result into the companion scenario.\nAnswer:\nStage one gives {v1}; \
         carrying it into stage two yields {v2}.\n#### {v2}\nKCs: {combined}"
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

// ---- wiring helpers ------------------------------------------------------

pub const ADVANCED_ID: &str = "scripted-advanced";
pub const STUDENT_ID: &str = "scripted-student";

/// Write the scripted corpus as a target JSONL file and return its path.
pub fn write_target(dir: &Path) -> PathBuf {
    let path = dir.join("target.jsonl");
    let samples: Vec<Sample> = scripted_corpus().into_iter().map(|s| s.sample).collect();
    save_jsonl(&samples, &path).expect("write target corpus");
    path
}

/// A pipeline config over the scripted corpus, writing under
/// `root/<out_name>`. No endpoints and no fixtures: callers either
/// inject scripted gateways directly or point `fixtures_dir` at a
/// recording.
pub fn base_config(root: &Path, out_name: &str) -> PipelineConfig {
    let target = write_target(root);
    let mut config = PipelineConfig {
        endpoints: None,
        paths: PathsConfig {
            target,
            eval: None,
            kc_set: None,
            templates_dir: None,
            fixtures_dir: None,
            output_dir: root.join(out_name),
        },
        annotation: Default::default(),
        diagnosis: Default::default(),
        synthesis: Default::default(),
        selection: Default::default(),
        evaluation: Default::default(),
        seed: 7,
    };
    config.annotation.exemplar_kcs =
        vec!["Addition".to_string(), "Percentages".to_string()];
    config
}

/// Gateways wired straight to the scripted models.
pub fn scripted_clients() -> Clients {
    Clients::from_gateways(
        Gateway::new(Arc::new(ProceduralLlm::new(ADVANCED_ID))),
        Gateway::new(Arc::new(ProceduralLlm::new(STUDENT_ID))),
        ADVANCED_ID,
        STUDENT_ID,
    )
}

/// Gateways that answer from the scripted models while recording every
/// exchange into `fixtures`, for later replay through `fixtures_dir`.
pub fn recording_clients(fixtures: &Path) -> Clients {
    let record = |model_id: &str| -> Gateway {
        let inner = Box::new(ProceduralLlm::new(model_id));
        Gateway::new(Arc::new(
            RecordingClient::new(inner, fixtures).expect("create fixture dir"),
        ))
    };
    Clients::from_gateways(record(ADVANCED_ID), record(STUDENT_ID), ADVANCED_ID, STUDENT_ID)
}

/// Every file in an output directory, keyed by file name.
pub fn artifact_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).expect("read output dir") {
        let entry = entry.expect("dir entry");
        if entry.path().is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            files.insert(name, std::fs::read(entry.path()).expect("read artifact"));
        }
    }
    files
}
