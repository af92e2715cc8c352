//! Selection: quality-gate a synthetic pool with the tutor model, score
//! the survivors by how much their KCs need practice, keep everything
//! above one standard deviation below the mean, and compare the result
//! against simpler selection baselines.
//!
//! ```text
//! cargo run --example select_training_set
//! ```

#[allow(dead_code)]
#[path = "support/scripted.rs"]
mod scripted;

use std::collections::BTreeMap;

use cds::annotation::build_qkc_matrix;
use cds::corpus::TaskKind;
use cds::diagnosis::build_profile;
use cds::evaluation::evaluate;
use cds::gateway::templates::TemplateStore;
use cds::selection::{
    build_score_context, score_items, select_longest, select_one_sigma, select_random,
    select_top_k, stage1_filter, SelectionParams,
};
use cds::synthesis::{synthesize_global, SynthesisConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (kc_set, tagged) = scripted::tagged_corpus();
    let clients = scripted::clients();
    let templates = TemplateStore::builtin();

    // Profile the student so the scorer knows which KCs are shaky.
    let records = evaluate(&tagged, &clients.student, &templates, None)?;
    let correctness: Vec<bool> = records.iter().map(|r| r.correct).collect();
    let matrix = build_qkc_matrix(&tagged, &kc_set)?;
    let profile = build_profile(&matrix, &correctness, &clients.student_model_id)?;

    // Build a pool to select from: a few questions for every KC, not just
    // the weak ones, so the scores have something to separate.
    let config = SynthesisConfig {
        n_per_weak_kc: 3,
        seed: 11,
        ..SynthesisConfig::default()
    };
    let all_kcs: Vec<_> = kc_set.iter().cloned().collect();
    let pool = synthesize_global(&all_kcs, &clients.advanced, &templates, &config, TaskKind::Math)?;
    println!("candidate pool: {} items", pool.items.len());

    // Stage one: the tutor model rates each question-answer pair 1-10 and
    // anything below theta is dropped with the score recorded.
    let params = SelectionParams::default();
    let stage1 = stage1_filter(
        pool.items,
        &kc_set,
        &clients.advanced,
        &templates,
        &params,
        TaskKind::Math,
    )?;
    println!(
        "stage 1 (theta={}): kept {}, dropped {}",
        params.theta,
        stage1.kept.len(),
        stage1.dropped.len()
    );
    for dropped in &stage1.dropped {
        println!("  dropped {}: {}", &dropped.item.id[..12], dropped.reason);
    }

    // Stage two: value each KC by how weak (low accuracy) and how rare
    // (low pool frequency) it is; an item scores the sum over its KCs.
    let context = build_score_context(&profile, &stage1.kept)?;
    if !context.imputed.is_empty() {
        println!(
            "  (no accuracy signal for [{}]; imputed {:.2})",
            context
                .imputed
                .iter()
                .map(|id| kc_set.label_for(id).unwrap_or(id))
                .collect::<Vec<_>>()
                .join(", "),
            context.imputed_acc
        );
    }
    let scored = score_items(stage1.kept, &context, &params);
    let all_scored: Vec<(String, f64)> = scored
        .iter()
        .map(|i| (i.id.clone(), i.cds_score.unwrap_or(f64::NAN)))
        .collect();
    let outcome = select_one_sigma(scored)?;
    println!(
        "\nstage 2: mean {:.3}, sigma {:.3}, cutoff {:.3} -> {} retained",
        outcome.mean,
        outcome.std_dev,
        outcome.cutoff,
        outcome.retained.len()
    );
    // Items whose KCs carry almost no accuracy signal take a huge hit
    // from the log and land below the cutoff as population outliers.
    for (id, score) in &all_scored {
        if !outcome.retained.iter().any(|i| &i.id == id) {
            println!("  cut {} at {:.3} (below cutoff)", &id[..12], score);
        }
    }
    let mut ranked = outcome.retained.clone();
    ranked.sort_by(|a, b| b.cds_score.partial_cmp(&a.cds_score).unwrap());
    for item in &ranked {
        println!(
            "  {:>7.3}  {}  KCs [{}]",
            item.cds_score.unwrap_or(f64::NAN),
            &item.id[..12],
            kc_set.labels_for(&item.kc_ids)?.join(", ")
        );
    }

    // Baselines on the same scored pool, for comparison runs.
    let show = |label: &str, items: &[cds::corpus::SyntheticItem]| {
        let ids: Vec<&str> = items.iter().map(|i| &i.id[..12]).collect();
        println!("  {:<12} [{}]", label, ids.join(", "));
    };
    let k = 3;
    println!("\nbaseline selectors (k={k}):");
    show("top-k", &select_top_k(&ranked, k)?);
    show("random", &select_random(&ranked, k, 99)?);
    show("longest", &select_longest(&ranked, k)?);

    // Perplexity-style selection takes scores from the caller; here a toy
    // map favouring short questions stands in for a language model.
    let ppl: BTreeMap<String, f64> = ranked
        .iter()
        .map(|item| (item.id.clone(), item.question.len() as f64))
        .collect();
    show(
        "low-ppl",
        &cds::selection::select_low_perplexity(&ranked, &ppl, k)?,
    );
    Ok(())
}
