//! Annotation, step by step: free-form tagging, tag consolidation into a
//! canonical KC set, constrained re-tagging against that set, and the
//! question-KC incidence matrix.
//!
//! ```text
//! cargo run --example derive_and_tag
//! ```

#[allow(dead_code)]
#[path = "support/scripted.rs"]
mod scripted;

use cds::annotation::{
    build_qkc_matrix, coarse_annotate, consolidate_kc_set, constrained_annotate,
};
use cds::gateway::templates::TemplateStore;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples = scripted::corpus();
    let gateway = scripted::clients().advanced;
    let templates = TemplateStore::builtin();

    // Stage one: the model tags each question freely, guided only by a
    // couple of exemplar labels that set the granularity.
    let exemplars = vec!["Addition".to_string()];
    let coarse = coarse_annotate(&samples, &exemplars, &gateway, &templates)?;
    println!("free-form tags:");
    for ann in &coarse.annotations {
        println!("  {:<4} {}", ann.sample_id, ann.tags.join("; "));
    }

    // Consolidation merges duplicates and near-duplicates into one
    // canonical knowledge-component set.
    let kc_set = consolidate_kc_set(&coarse.annotations, &[], &gateway, &templates)?;
    println!("\ncanonical KC set ({}):", kc_set.len());
    for kc in kc_set.iter() {
        println!("  {}  {}", kc.kc_id, kc.label);
    }

    // Stage two: re-tag every question against the closed set. Stray
    // labels are dropped after one corrective re-prompt; questions with
    // no valid tag at all are excluded.
    let constrained = constrained_annotate(&samples, &kc_set, &gateway, &templates)?;
    println!(
        "\ntagged {} of {} questions ({} re-prompted, {} stray tags dropped, {} excluded)",
        constrained.tagged.len(),
        samples.len(),
        constrained.reprompted,
        constrained.dropped_tags,
        constrained.exclusions.len(),
    );

    // The incidence matrix is what diagnosis consumes: one row per
    // question, one column per KC.
    let matrix = build_qkc_matrix(&constrained.tagged, &kc_set)?;
    let initials: Vec<String> = matrix
        .col_kcs()
        .iter()
        .map(|kc| kc.label.chars().next().unwrap_or('?').to_string())
        .collect();
    println!("\nquestion-KC matrix (columns: {}):", initials.join(" "));
    for (row, id) in matrix.row_ids().iter().enumerate() {
        let cells: Vec<&str> = (0..matrix.cols())
            .map(|col| if matrix.get(row, col) { "x" } else { "." })
            .collect();
        println!("  {:<4} {}", id, cells.join(" "));
    }
    Ok(())
}
