//! Diagnose a language model's per-skill weaknesses and synthesize
//! training data that targets them.
//!
//! The pipeline works over a corpus of questions (math word problems,
//! programming tasks, or multiple-choice exams) and two chat-completion
//! endpoints: an *advanced* model that annotates, diagnoses, generates,
//! and scores, and a *student* model whose mistakes are being studied.
//!
//! 1. **Annotate** ([`annotation`]): derive a closed set of knowledge
//!    components (KCs) from the corpus, then tag every question with the
//!    KCs it exercises, yielding a binary question-KC matrix.
//! 2. **Evaluate** ([`evaluation`]): pose each question to the student
//!    and grade the answers with task-specific graders (exact-match
//!    numeric, sandboxed test execution, choice-letter match).
//! 3. **Diagnose** ([`diagnosis`]): fold grades over the matrix into
//!    per-KC accuracy and frequency, flag weak KCs by threshold, and have
//!    the advanced model explain each wrong answer.
//! 4. **Synthesize** ([`synthesis`]): generate fresh questions per weak
//!    KC and per diagnosed error, then expand them by KC-constrained
//!    rewriting and multi-KC fusion.
//! 5. **Select** ([`selection`]): filter by model score, then keep items
//!    whose KC-value score survives a one-sigma cut; baseline selectors
//!    (random, longest, diversity, k-center, perplexity) support
//!    size-matched comparisons.
//!
//! [`pipeline`] wires the stages into re-runnable commands with JSONL
//! artifacts, and [`gateway`] supplies the HTTP client, retry/backoff,
//! prompt templates, and a record/replay client that makes every run
//! reproducible offline. Runs are deterministic given the same inputs,
//! fixtures, and seed.
//!
//! The `examples/` directory has one runnable program per capability;
//! `examples/end_to_end.rs` walks the whole pipeline on a small corpus
//! with a scripted model.

pub mod annotation;
pub mod corpus;
pub mod diagnosis;
pub mod evaluation;
pub mod gateway;
pub mod pipeline;
pub mod selection;
pub mod synthesis;
