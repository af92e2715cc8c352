//! Diagnosis: fold graded responses into a per-KC mastery profile, apply
//! the weak-KC rule, and ask the tutor model to explain each failure.
//!
//! ```text
//! cargo run --example diagnose_weak_kcs
//! ```

#[allow(dead_code)]
#[path = "support/scripted.rs"]
mod scripted;

use cds::annotation::build_qkc_matrix;
use cds::corpus::TaskKind;
use cds::diagnosis::{build_profile, diagnose_errors, identify_weak_kcs};
use cds::evaluation::{collect_errors, evaluate};
use cds::gateway::templates::TemplateStore;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (kc_set, tagged) = scripted::tagged_corpus();
    let clients = scripted::clients();
    let templates = TemplateStore::builtin();

    // Grade the student, then line the verdicts up with the matrix rows
    // (both follow corpus order).
    let records = evaluate(&tagged, &clients.student, &templates, None)?;
    let correctness: Vec<bool> = records.iter().map(|r| r.correct).collect();
    let matrix = build_qkc_matrix(&tagged, &kc_set)?;

    // Accuracy and frequency per KC. A KC that never appears on a tagged
    // question has no accuracy at all, which is not the same as zero.
    let profile = build_profile(&matrix, &correctness, &clients.student_model_id)?;
    println!("mastery profile for {}:", profile.student_model_id);
    println!("  {:<16} {:>8} {:>8} {:>7} {:>7}", "KC", "acc", "freq", "tagged", "right");
    for entry in &profile.entries {
        let acc = entry
            .accuracy
            .map(|a| format!("{a:.2}"))
            .unwrap_or_else(|| "--".to_string());
        println!(
            "  {:<16} {:>8} {:>8.2} {:>7} {:>7}",
            entry.label, acc, entry.frequency, entry.tagged_count, entry.correct_count
        );
    }

    // The weak rule: accuracy at or below the accuracy threshold, or
    // frequency at or below the coverage threshold, flags a KC.
    let (delta_a, delta_f) = (0.6, 0.05);
    let weak = identify_weak_kcs(&profile, delta_a, delta_f)?;
    println!(
        "\nweak KCs at delta_a={delta_a}, delta_f={delta_f}: [{}]",
        kc_set.labels_for(&weak)?.join(", ")
    );

    // Tighten the coverage threshold and rarely-tested KCs get flagged
    // too, even when the student answered them well.
    let wider = identify_weak_kcs(&profile, delta_a, 0.35)?;
    println!(
        "weak KCs at delta_a={delta_a}, delta_f=0.35: [{}]",
        kc_set.labels_for(&wider)?.join(", ")
    );

    // Per-error diagnosis: the tutor model explains what went wrong and
    // names the KCs the student appears shaky on.
    let errors = collect_errors(&records, &tagged)?;
    let outcome = diagnose_errors(&errors, &kc_set, TaskKind::Math, &clients.advanced, &templates)?;
    println!("\nper-error diagnoses ({}):", outcome.records.len());
    for diag in &outcome.records {
        println!(
            "  {:<4} implicated [{}]",
            diag.error_case.sample_id,
            kc_set.labels_for(&diag.weak_kc_ids)?.join(", ")
        );
        for line in diag.p_diag.lines().take(2) {
            println!("       | {line}");
        }
    }
    Ok(())
}
