//! Synthesis and augmentation: generate fresh practice questions for the
//! weak KCs (globally and from specific mistakes), then grow the pool with
//! KC-preserving rewrites and KC-combining fusions.
//!
//! ```text
//! cargo run --example synthesize_and_augment
//! ```

#[allow(dead_code)]
#[path = "support/scripted.rs"]
mod scripted;

use cds::annotation::build_qkc_matrix;
use cds::corpus::TaskKind;
use cds::diagnosis::{build_profile, diagnose_errors, identify_weak_kcs};
use cds::evaluation::{collect_errors, evaluate};
use cds::gateway::templates::TemplateStore;
use cds::synthesis::{
    assemble_augmented, augment_fuse, augment_rewrite, synthesize_fine_grained,
    synthesize_global, SynthesisConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (kc_set, tagged) = scripted::tagged_corpus();
    let clients = scripted::clients();
    let templates = TemplateStore::builtin();

    // Run the diagnostic front half to find out what needs practice.
    let records = evaluate(&tagged, &clients.student, &templates, None)?;
    let correctness: Vec<bool> = records.iter().map(|r| r.correct).collect();
    let matrix = build_qkc_matrix(&tagged, &kc_set)?;
    let profile = build_profile(&matrix, &correctness, &clients.student_model_id)?;
    // A tight coverage threshold flags the rarely-tested KC alongside the
    // badly-answered one, so the demo has two targets to combine.
    let weak_ids = identify_weak_kcs(&profile, 0.6, 0.35)?;
    let weak_kcs: Vec<_> = kc_set
        .iter()
        .filter(|kc| weak_ids.contains(&kc.kc_id))
        .cloned()
        .collect();
    let errors = collect_errors(&records, &tagged)?;
    let diagnoses =
        diagnose_errors(&errors, &kc_set, TaskKind::Math, &clients.advanced, &templates)?;
    println!(
        "targets: {} weak KC(s), {} diagnosed error(s)",
        weak_kcs.len(),
        diagnoses.records.len()
    );

    let config = SynthesisConfig {
        n_per_weak_kc: 2,
        p_rewrite: 0.34,
        p_fusion: 0.5,
        seed: 5,
        ..SynthesisConfig::default()
    };

    // Global synthesis drills each weak KC in isolation; fine-grained
    // synthesis targets the exact mistakes the diagnoses describe.
    let global = synthesize_global(&weak_kcs, &clients.advanced, &templates, &config, TaskKind::Math)?;
    let fine = synthesize_fine_grained(
        &diagnoses.records,
        &kc_set,
        &clients.advanced,
        &templates,
        &config,
        TaskKind::Math,
    )?;
    let mut d_s = global.items;
    d_s.extend(fine.items);
    let d_s = cds::corpus::dedupe_by_question(d_s);
    println!("\nsynthesized pool D_S ({} items):", d_s.len());
    for item in &d_s {
        println!(
            "  [{:<12}] {}  KCs [{}]",
            item.provenance.strategy.as_str(),
            &item.id[..16.min(item.id.len())],
            kc_set.labels_for(&item.kc_ids)?.join(", ")
        );
    }

    // Rewrites must keep the parent's exact KC set; fusions must cover the
    // union of both parents. The augmenters enforce this and reject items
    // that still violate it after one corrective re-prompt.
    let rewritten = augment_rewrite(&d_s, &kc_set, &clients.advanced, &templates, &config, TaskKind::Math)?;
    println!(
        "\nrewrites: sampled {} -> accepted {}, rejected {}",
        rewritten.sampled,
        rewritten.rewrites.len(),
        rewritten.rejections.len()
    );
    for child in &rewritten.rewrites {
        println!(
            "  {} -> {}  (same KCs: [{}])",
            &child.provenance.parent_ids[0][..12],
            &child.id[..12],
            kc_set.labels_for(&child.kc_ids)?.join(", ")
        );
    }

    let fused = augment_fuse(&d_s, &kc_set, &clients.advanced, &templates, &config, TaskKind::Math)?;
    println!(
        "fusions: {} pair(s) formed of {} targeted -> accepted {}, rejected {}",
        fused.pairs_formed,
        fused.pairs_target,
        fused.fusions.len(),
        fused.rejections.len()
    );
    for child in &fused.fusions {
        println!(
            "  {} + {} -> {}  (union KCs: [{}])",
            &child.provenance.parent_ids[0][..12],
            &child.provenance.parent_ids[1][..12],
            &child.id[..12],
            kc_set.labels_for(&child.kc_ids)?.join(", ")
        );
    }

    // The augmented pool is parents plus accepted children, deduplicated
    // by question text.
    let d_a = assemble_augmented(d_s, rewritten.rewrites, fused.fusions);
    println!("\naugmented pool D_A: {} items", d_a.len());
    println!("\nsample question from the pool:");
    if let Some(item) = d_a.first() {
        for line in item.question.lines() {
            println!("  | {line}");
        }
    }
    Ok(())
}
