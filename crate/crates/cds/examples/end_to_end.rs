//! The whole pipeline in one run: annotate, evaluate, diagnose,
//! synthesize, augment, select, against a scripted model pair.
//!
//! Artifacts land under `target/examples/end_to_end/`; rerunning the
//! example reproduces them byte for byte.
//!
//! ```text
//! cargo run --example end_to_end
//! ```

#[allow(dead_code)]
#[path = "support/scripted.rs"]
mod scripted;

use std::fs;
use std::path::PathBuf;

use cds::corpus::{load_jsonl, save_jsonl, SyntheticItem};
use cds::pipeline::{artifact, artifacts, cmd_run_all, PathsConfig, PipelineConfig, WeakKcsDoc};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from("target/examples/end_to_end");
    fs::create_dir_all(&out)?;

    // The input corpus: ten small math questions.
    let target = out.join("target.jsonl");
    save_jsonl(&scripted::corpus(), &target)?;

    let mut config = PipelineConfig {
        endpoints: None, // gateways are injected below instead
        paths: PathsConfig {
            target,
            eval: None,
            kc_set: None,
            templates_dir: None,
            fixtures_dir: None,
            output_dir: out.clone(),
        },
        annotation: Default::default(),
        diagnosis: Default::default(),
        synthesis: Default::default(),
        selection: Default::default(),
        evaluation: Default::default(),
        seed: 7,
    };
    config.annotation.exemplar_kcs = vec!["Addition".into()];

    let manifest = cmd_run_all(&config, &scripted::clients())?;

    println!("run complete; artifacts in {}", out.display());
    for (name, count) in &manifest.counts {
        println!("  {name:<18} {count:>3} records");
    }

    let weak: WeakKcsDoc =
        serde_json::from_str(&fs::read_to_string(artifact(&config, artifacts::WEAK_KCS))?)?;
    println!(
        "\nweak KCs: {}",
        weak.weak_kcs.iter().map(|kc| kc.label.as_str()).collect::<Vec<_>>().join(", ")
    );

    let selected: Vec<SyntheticItem> = load_jsonl(&artifact(&config, artifacts::D_FINAL))?;
    println!("selected training items ({}):", selected.len());
    for item in &selected {
        let question: String = item.question.chars().take(72).collect();
        println!(
            "  {} [{}] score {:.3}: {question}…",
            item.id,
            item.provenance.strategy.as_str(),
            item.cds_score.unwrap_or(f64::NAN),
        );
    }
    Ok(())
}
