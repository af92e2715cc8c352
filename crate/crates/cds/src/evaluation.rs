//! Student-model evaluation and collection of erroneous cases.
//!
//! Every tagged question is posed to the student model once with greedy
//! decoding and graded objectively: math by final-number comparison, code
//! by running the reference tests in a sandboxed process, exam items by
//! choice-letter or numeric comparison. Grading never consults a model.
//!
//! A record is produced for every question. Wrong-but-graded answers are
//! plain `correct = false`; model failures and ungradable items also get
//! `correct = false` but carry a `failure_reason`, so downstream stages
//! can tell a real mistake from a pipeline hiccup.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ErrorCase, JsonlRecord, TaggedSample, TaskKind};
use crate::gateway::templates::{template_id, TemplateError, TemplateStore};
use crate::gateway::{parallel_map, ChatRequest, Gateway, Message, SamplingParams};

const WORKERS: usize = 8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sandbox unavailable: {message}")]
    SandboxUnavailable { message: String },
    #[error("evaluation record {sample_id} has no tagged sample")]
    IdMismatch { sample_id: String },
    #[error("code samples present but no code runner configured")]
    NoCodeRunner,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Outcome of posing one question to the student model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub sample_id: String,
    pub response: String,
    pub correct: bool,
    /// Which grader judged the response: `math`, `code`, or `exam`.
    pub grader: String,
    /// Present when the record does not reflect a genuine graded attempt:
    /// the model call failed or the item was not objectively gradable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

impl JsonlRecord for EvaluationRecord {
    fn validate(&self) -> Result<(), String> {
        if self.sample_id.is_empty() {
            return Err("empty sample_id".into());
        }
        if self.grader.is_empty() {
            return Err("empty grader".into());
        }
        Ok(())
    }
    fn dup_key(&self) -> Option<&str> {
        Some(&self.sample_id)
    }
}

// ---- math grading ----------------------------------------------------

/// Pull every number token out of `text`, in order. A token is an
/// optional minus, digits with embedded commas, and an optional decimal
/// part; currency markers before the digits are not part of the token.
fn extract_numbers(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let mut start = i;
        // a bare decimal point belongs to the number (".5"), unless it
        // trails another number or an ellipsis
        if start > 0 && chars[start - 1] == '.' {
            let before = if start >= 2 { Some(chars[start - 2]) } else { None };
            let part_of_other = matches!(before, Some(c) if c.is_ascii_digit() || c == '.');
            if !part_of_other {
                start -= 1;
            }
        }
        // leading minus counts only when it isn't a binary operator
        if start > 0 && chars[start - 1] == '-' {
            let before = if start >= 2 { Some(chars[start - 2]) } else { None };
            let is_binary = matches!(before, Some(c) if c.is_ascii_digit() || c == ')');
            if !is_binary {
                start -= 1;
            }
        }
        let mut end = i;
        while end < chars.len() {
            let c = chars[end];
            if c.is_ascii_digit() {
                end += 1;
            } else if (c == ',' || c == '.')
                && end + 1 < chars.len()
                && chars[end + 1].is_ascii_digit()
            {
                end += 1;
            } else {
                break;
            }
        }
        tokens.push(chars[start..end].iter().collect());
        i = end + 1;
    }
    tokens
}

/// Canonical form for numeric comparison: drop commas and currency,
/// trim redundant zeros, collapse `-0` to `0`.
fn normalize_number(token: &str) -> String {
    let cleaned: String = token
        .chars()
        .filter(|c| *c != ',' && *c != '$' && *c != '£' && *c != '€')
        .collect();
    let (negative, digits) = match cleaned.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, cleaned.as_str()),
    };
    let digits = digits.strip_prefix('+').unwrap_or(digits);
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i, f),
        None => (digits, ""),
    };
    let int_part = int_part.trim_start_matches('0');
    let int_part = if int_part.is_empty() { "0" } else { int_part };
    let frac_part = frac_part.trim_end_matches('0');
    let mut out = String::new();
    if negative {
        out.push('-');
    }
    out.push_str(int_part);
    if !frac_part.is_empty() {
        out.push('.');
        out.push_str(frac_part);
    }
    if out == "-0" {
        out.truncate(0);
        out.push('0');
    }
    out
}

/// Final answer candidate: the first number after the last `####` marker,
/// else the last number anywhere.
fn final_number(text: &str) -> Option<String> {
    if let Some(idx) = text.rfind("####") {
        let tail = &text[idx + 4..];
        if let Some(first) = extract_numbers(tail).into_iter().next() {
            return Some(first);
        }
    }
    extract_numbers(text).into_iter().last()
}

/// Compare the response's final number against the reference's, after
/// normalization. A response or reference without a number grades false.
pub fn grade_math(response: &str, reference: &str) -> bool {
    match (final_number(response), final_number(reference)) {
        (Some(cand), Some(refv)) => normalize_number(&cand) == normalize_number(&refv),
        _ => false,
    }
}

// ---- exam grading ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExamGrade {
    Correct,
    Incorrect,
    /// Reference is neither a choice letter nor numeric; not graded.
    Ungradable,
}

fn choice_letter(text: &str) -> Option<char> {
    let tail = match text.rfind("####") {
        Some(idx) => &text[idx + 4..],
        None => text,
    };
    // last standalone A-E token in the tail
    tail.split(|c: char| !c.is_ascii_alphabetic())
        .filter(|tok| tok.len() == 1)
        .filter_map(|tok| {
            let c = tok.chars().next().unwrap().to_ascii_uppercase();
            ('A'..='E').contains(&c).then_some(c)
        })
        .next_back()
}

/// Grade an exam response: choice letters when the reference is a single
/// A-E letter, numeric comparison when the reference contains a number,
/// otherwise ungradable.
pub fn grade_exam(response: &str, reference: &str) -> ExamGrade {
    let reference_trim = reference.trim();
    if reference_trim.len() == 1 {
        let ref_letter = reference_trim.chars().next().unwrap().to_ascii_uppercase();
        if ('A'..='E').contains(&ref_letter) {
            return match choice_letter(response) {
                Some(c) if c == ref_letter => ExamGrade::Correct,
                _ => ExamGrade::Incorrect,
            };
        }
    }
    if final_number(reference_trim).is_some() {
        return if grade_math(response, reference_trim) {
            ExamGrade::Correct
        } else {
            ExamGrade::Incorrect
        };
    }
    ExamGrade::Ungradable
}

// ---- code grading ----------------------------------------------------

/// First fenced code block in `text`, else the whole text.
pub fn extract_code(text: &str) -> &str {
    let Some(open) = text.find("```") else {
        return text;
    };
    let after_fence = &text[open + 3..];
    // skip the language tag line
    let body_start = after_fence.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after_fence[body_start..];
    match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeGrade {
    pub passed: bool,
    pub reason: Option<String>,
}

/// Runs candidate solutions against reference tests in a scratch
/// directory, one process at a time, with a hard timeout.
///
/// The directory receives `solution.py` (the extracted candidate) and
/// `tests.py` (the reference test program); `command` is spawned with the
/// directory as its working directory. Exit status zero means passed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeRunner {
    pub command: Vec<String>,
    pub timeout_secs: u64,
}

impl Default for CodeRunner {
    fn default() -> Self {
        Self { command: vec!["python3".into(), "tests.py".into()], timeout_secs: 10 }
    }
}

impl CodeRunner {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn grade(&self, response: &str, test_spec: &str) -> Result<CodeGrade, EvalError> {
        if self.command.is_empty() {
            return Err(EvalError::SandboxUnavailable { message: "empty runner command".into() });
        }
        let dir = tempfile::tempdir().map_err(|e| EvalError::SandboxUnavailable {
            message: format!("cannot create scratch dir: {e}"),
        })?;
        let write = |name: &str, content: &str| -> Result<(), EvalError> {
            let mut file = std::fs::File::create(dir.path().join(name)).map_err(|e| {
                EvalError::SandboxUnavailable { message: format!("cannot write {name}: {e}") }
            })?;
            file.write_all(content.as_bytes()).map_err(|e| EvalError::SandboxUnavailable {
                message: format!("cannot write {name}: {e}"),
            })?;
            Ok(())
        };
        write("solution.py", extract_code(response))?;
        write("tests.py", test_spec)?;
        self.run_in(dir.path())
    }

    fn run_in(&self, dir: &Path) -> Result<CodeGrade, EvalError> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .current_dir(dir)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| EvalError::SandboxUnavailable {
                message: format!("cannot spawn {:?}: {e}", self.command[0]),
            })?;
        let deadline = Instant::now() + self.timeout();
        loop {
            match child.try_wait() {
                Ok(Some(status)) => {
                    if status.success() {
                        return Ok(CodeGrade { passed: true, reason: None });
                    }
                    return Ok(CodeGrade {
                        passed: false,
                        reason: Some(format!("runner exited with {status}")),
                    });
                }
                Ok(None) => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Ok(CodeGrade {
                            passed: false,
                            reason: Some(format!("timeout after {}s", self.timeout_secs)),
                        });
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(e) => {
                    let _ = child.kill();
                    return Err(EvalError::SandboxUnavailable {
                        message: format!("wait failed: {e}"),
                    });
                }
            }
        }
    }
}

// ---- evaluation loop ---------------------------------------------------

/// Pose every tagged question to the student model and grade the answers.
///
/// `code_runner` is required when the corpus contains code samples.
pub fn evaluate(
    tagged: &[TaggedSample],
    gateway: &Gateway,
    templates: &TemplateStore,
    code_runner: Option<&CodeRunner>,
) -> Result<Vec<EvaluationRecord>, EvalError> {
    if tagged.iter().any(|t| t.sample.task_kind == TaskKind::Code) && code_runner.is_none() {
        return Err(EvalError::NoCodeRunner);
    }
    let prompts: Vec<String> = tagged
        .iter()
        .map(|t| {
            templates.render(
                &template_id("evaluate", t.sample.task_kind),
                &BTreeMap::from([("question", t.sample.question.clone())]),
            )
        })
        .collect::<Result<_, _>>()?;

    let results = parallel_map(&prompts, WORKERS, |i, prompt| {
        evaluate_one(&tagged[i], prompt, gateway, code_runner)
    });
    // sandbox failures are systemic: surface the first one instead of
    // mislabeling every code sample as wrong
    results.into_iter().collect()
}

fn evaluate_one(
    tagged: &TaggedSample,
    prompt: &str,
    gateway: &Gateway,
    code_runner: Option<&CodeRunner>,
) -> Result<EvaluationRecord, EvalError> {
    let sample = &tagged.sample;
    let grader = sample.task_kind.as_str().to_string();
    let request = match ChatRequest::new(
        vec![Message::user(prompt)],
        SamplingParams::evaluation(),
        1,
    ) {
        Ok(req) => req,
        Err(e) => {
            return Ok(EvaluationRecord {
                sample_id: sample.id.clone(),
                response: String::new(),
                correct: false,
                grader,
                failure_reason: Some(format!("llm-failure: {e}")),
            })
        }
    };
    let response = match gateway.complete(&request) {
        Ok(resp) => resp.completions[0].clone(),
        Err(e) => {
            return Ok(EvaluationRecord {
                sample_id: sample.id.clone(),
                response: String::new(),
                correct: false,
                grader,
                failure_reason: Some(format!("llm-failure: {e}")),
            })
        }
    };

    let (correct, failure_reason) = match sample.task_kind {
        TaskKind::Math => (grade_math(&response, &sample.reference_answer), None),
        TaskKind::Code => {
            let runner = code_runner.expect("checked before dispatch");
            let grade = runner.grade(&response, &sample.reference_answer)?;
            (grade.passed, None)
        }
        TaskKind::Exam => match grade_exam(&response, &sample.reference_answer) {
            ExamGrade::Correct => (true, None),
            ExamGrade::Incorrect => (false, None),
            ExamGrade::Ungradable => (
                false,
                Some("ungradable: reference is neither a choice letter nor numeric".to_string()),
            ),
        },
    };
    Ok(EvaluationRecord {
        sample_id: sample.id.clone(),
        response,
        correct,
        grader,
        failure_reason,
    })
}

/// Turn genuinely wrong answers into erroneous cases carrying the
/// question's KC tags. Records with a `failure_reason` (model failure,
/// ungradable item) stay in the evaluation output but produce no case —
/// there is nothing meaningful to diagnose in them.
pub fn collect_errors(
    records: &[EvaluationRecord],
    tagged: &[TaggedSample],
) -> Result<Vec<ErrorCase>, EvalError> {
    let by_id: BTreeMap<&str, &TaggedSample> =
        tagged.iter().map(|t| (t.sample.id.as_str(), t)).collect();
    let mut cases = Vec::new();
    for record in records {
        if record.correct || record.failure_reason.is_some() {
            continue;
        }
        let tagged = by_id.get(record.sample_id.as_str()).ok_or_else(|| {
            EvalError::IdMismatch { sample_id: record.sample_id.clone() }
        })?;
        cases.push(ErrorCase {
            sample_id: record.sample_id.clone(),
            question: tagged.sample.question.clone(),
            erroneous_response: record.response.clone(),
            kc_ids: tagged.kc_ids.clone(),
        });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sample;
    use crate::gateway::{ChatClient, ChatResponse, ClientError, RetryPolicy};
    use std::collections::BTreeSet;
    use std::sync::Arc;

    #[test]
    fn math_grading_normalizes_separators_and_currency() {
        assert!(grade_math("The total is #### 1,000", "1000"));
        assert!(grade_math("so the answer is $5.50", "5.5"));
        assert!(grade_math("#### 72", "#### 72.0"));
        assert!(grade_math("we get 3 then 7 so final 12", "12"));
        assert!(grade_math("#### -4", "-4.00"));
        assert!(grade_math("#### 0", "-0"));
        assert!(!grade_math("#### 13", "12"));
        assert!(!grade_math("no numbers at all", "12"));
        assert!(!grade_math("#### 5", "no reference number"));
    }

    #[test]
    fn math_grading_reads_bare_decimal_points() {
        assert!(grade_math("#### .5", "0.5"));
        assert!(grade_math("the rate is -.25", "-0.25"));
        // an ellipsis is not a decimal point
        assert!(grade_math("hmm...5 it is", "5"));
        // a trailing dot after one number does not glue onto the next
        assert!(grade_math("steps 1. then #### 7", "7"));
    }

    #[test]
    fn math_grading_prefers_marker_over_last_number() {
        // numbers after the marker win even when later prose has none
        assert!(grade_math("#### 42\nGreat question, really.", "42"));
        // the subtraction's minus is binary, not a sign
        assert_eq!(extract_numbers("10-4"), vec!["10", "4"]);
        assert_eq!(extract_numbers("answer: -4"), vec!["-4"]);
    }

    #[test]
    fn exam_grading_routes_letters_numbers_and_ungradable() {
        assert_eq!(grade_exam("The answer is #### B", "B"), ExamGrade::Correct);
        assert_eq!(grade_exam("I pick (c)", "C"), ExamGrade::Correct);
        assert_eq!(grade_exam("#### A", "B"), ExamGrade::Incorrect);
        assert_eq!(grade_exam("#### 15", "15"), ExamGrade::Correct);
        assert_eq!(grade_exam("essay text", "discuss the themes"), ExamGrade::Ungradable);
    }

    #[test]
    fn code_block_extraction() {
        let fenced = "Here you go:\n```python\nx = 1\n```\ntrailing";
        assert_eq!(extract_code(fenced), "x = 1\n");
        assert_eq!(extract_code("plain code"), "plain code");
        let unterminated = "```\ny = 2\n";
        assert_eq!(extract_code(unterminated), "y = 2\n");
    }

    #[test]
    fn code_runner_passes_and_fails() {
        let runner = CodeRunner::default();
        let tests = "from solution import add\nassert add(2, 3) == 5\n";
        let good = runner
            .grade("```python\ndef add(a, b):\n    return a + b\n```", tests)
            .unwrap();
        assert!(good.passed);
        let bad = runner
            .grade("```python\ndef add(a, b):\n    return a - b\n```", tests)
            .unwrap();
        assert!(!bad.passed);
        assert!(bad.reason.is_some());
    }

    #[test]
    fn code_runner_kills_infinite_loops() {
        let runner = CodeRunner { timeout_secs: 1, ..CodeRunner::default() };
        let start = Instant::now();
        let grade = runner
            .grade("```python\nwhile True:\n    pass\n```", "import solution\n")
            .unwrap();
        assert!(!grade.passed);
        assert!(grade.reason.unwrap().contains("timeout"));
        assert!(start.elapsed() < Duration::from_secs(2));
    }

    #[test]
    fn code_runner_reports_missing_interpreter() {
        let runner = CodeRunner {
            command: vec!["definitely-not-a-real-binary-7f3a".into()],
            timeout_secs: 1,
        };
        let err = runner.grade("x = 1", "pass").unwrap_err();
        assert!(matches!(err, EvalError::SandboxUnavailable { .. }));
    }

    fn tagged(id: &str, question: &str, reference: &str, kind: TaskKind) -> TaggedSample {
        TaggedSample {
            sample: Sample {
                id: id.into(),
                question: question.into(),
                reference_answer: reference.into(),
                task_kind: kind,
                metadata: None,
            },
            kc_ids: BTreeSet::from(["kc-x".to_string()]),
        }
    }

    struct Canned(&'static str);
    impl ChatClient for Canned {
        fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, ClientError> {
            Ok(ChatResponse {
                completions: vec![self.0.to_string()],
                model_id: "canned".into(),
                usage: None,
            })
        }
    }

    #[test]
    fn evaluation_records_and_error_cases_line_up() {
        let gw = Gateway::with_policy(Arc::new(Canned("#### 4")), RetryPolicy::immediate(1), 2);
        let templates = TemplateStore::builtin();
        let corpus = vec![
            tagged("right", "2+2?", "4", TaskKind::Math),
            tagged("wrong", "2+3?", "5", TaskKind::Math),
        ];
        // canned client answers 4 to everything, so "wrong" is wrong
        let mut records = evaluate(&corpus, &gw, &templates, None).unwrap();
        records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        assert_eq!(records.len(), 2);
        let right = records.iter().find(|r| r.sample_id == "right").unwrap();
        let wrong = records.iter().find(|r| r.sample_id == "wrong").unwrap();
        assert!(right.correct && !wrong.correct);
        assert!(wrong.failure_reason.is_none());

        let cases = collect_errors(&records, &corpus).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].sample_id, "wrong");
        assert_eq!(cases[0].erroneous_response, "#### 4");
        assert_eq!(cases[0].question, "2+3?");
    }

    #[test]
    fn model_failures_produce_records_not_cases() {
        struct Failing;
        impl ChatClient for Failing {
            fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, ClientError> {
                Err(ClientError::Transport { message: "down".into(), transient: false })
            }
        }
        let gw = Gateway::with_policy(Arc::new(Failing), RetryPolicy::immediate(2), 2);
        let templates = TemplateStore::builtin();
        let corpus = vec![tagged("s1", "2+2?", "4", TaskKind::Math)];
        let records = evaluate(&corpus, &gw, &templates, None).unwrap();
        assert_eq!(records.len(), 1);
        assert!(!records[0].correct);
        assert!(records[0].failure_reason.as_deref().unwrap().starts_with("llm-failure"));
        assert!(collect_errors(&records, &corpus).unwrap().is_empty());
    }

    #[test]
    fn code_corpus_without_runner_is_rejected() {
        let gw = Gateway::with_policy(Arc::new(Canned("x")), RetryPolicy::immediate(1), 2);
        let templates = TemplateStore::builtin();
        let corpus = vec![tagged("c1", "write add", "assert True", TaskKind::Code)];
        assert!(matches!(
            evaluate(&corpus, &gw, &templates, None),
            Err(EvalError::NoCodeRunner)
        ));
    }

    #[test]
    fn collect_errors_requires_known_ids() {
        let records = vec![EvaluationRecord {
            sample_id: "ghost".into(),
            response: "x".into(),
            correct: false,
            grader: "math".into(),
            failure_reason: None,
        }];
        let err = collect_errors(&records, &[]).unwrap_err();
        assert!(matches!(err, EvalError::IdMismatch { .. }));
    }
}
