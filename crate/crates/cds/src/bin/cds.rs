//! Command-line front end for the diagnostic synthesis pipeline.
//!
//! Every subcommand takes the same flags: a JSON config plus optional
//! overrides. Exit codes: 0 success, 2 config error, 3 missing input,
//! 4 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cds::pipeline::{self, report, Clients, Overrides, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(
    name = "cds",
    version,
    about = "Diagnose a student model's weak knowledge components and synthesize targeted training data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Pipeline configuration file (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory override.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Weak-KC accuracy threshold override.
    #[arg(long, value_name = "FLOAT")]
    delta_a: Option<f64>,
    /// Weak-KC frequency threshold override.
    #[arg(long, value_name = "FLOAT")]
    delta_f: Option<f64>,
    /// Stage-one keep threshold override (0-10).
    #[arg(long, value_name = "INT")]
    theta: Option<i64>,
    /// Master seed override.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Answer every model call from this fixture directory instead of the
    /// network.
    #[arg(long, value_name = "DIR")]
    mock_fixtures: Option<PathBuf>,
    /// Code-grading timeout override, in seconds.
    #[arg(long, value_name = "SECS")]
    timeout_secs: Option<u64>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            delta_a: self.delta_a,
            delta_f: self.delta_f,
            theta: self.theta,
            seed: self.seed,
            mock_fixtures: self.mock_fixtures.clone(),
            timeout_secs: self.timeout_secs,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Derive the KC set and tag the target corpus.
    Annotate(CommonArgs),
    /// Grade the student model on the tagged corpus.
    Evaluate(CommonArgs),
    /// Build the mastery profile and diagnose each error.
    Diagnose(CommonArgs),
    /// Generate questions for weak KCs and diagnosed errors.
    Synthesize(CommonArgs),
    /// Expand the synthesized set by rewriting and fusion.
    Augment(CommonArgs),
    /// Filter and select the final dataset.
    Select(CommonArgs),
    /// Run all six stages and write the run manifest.
    RunAll(CommonArgs),
    /// Render reports from existing artifacts.
    Report(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Annotate(a)
            | Command::Evaluate(a)
            | Command::Diagnose(a)
            | Command::Synthesize(a)
            | Command::Augment(a)
            | Command::Select(a)
            | Command::RunAll(a)
            | Command::Report(a) => a,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let args = cli.command.args();
    let mut config = PipelineConfig::load(&args.config)?;
    config.apply_overrides(&args.overrides());
    config.validate()?;

    match &cli.command {
        Command::Annotate(_) => annotate(&config, &Clients::from_config(&config)?)?,
        Command::Evaluate(_) => evaluate(&config, &Clients::from_config(&config)?)?,
        Command::Diagnose(_) => diagnose(&config, &Clients::from_config(&config)?)?,
        Command::Synthesize(_) => synthesize(&config, &Clients::from_config(&config)?)?,
        Command::Augment(_) => augment(&config, &Clients::from_config(&config)?)?,
        Command::Select(_) => select(&config, &Clients::from_config(&config)?)?,
        Command::RunAll(_) => {
            let clients = Clients::from_config(&config)?;
            annotate(&config, &clients)?;
            evaluate(&config, &clients)?;
            diagnose(&config, &clients)?;
            synthesize(&config, &clients)?;
            augment(&config, &clients)?;
            select(&config, &clients)?;
            let manifest = pipeline::write_manifest(&config, &clients)?;
            let final_count = manifest
                .counts
                .get(pipeline::artifacts::D_FINAL)
                .copied()
                .unwrap_or(0);
            println!(
                "run-all: complete; d_final has {} items (artifacts in {})",
                final_count,
                config.paths.output_dir.display()
            );
        }
        Command::Report(_) => {
            let data = report::cmd_report(&config)?;
            print!("{}", report::render_text(&data));
        }
    }
    Ok(())
}

// One stage each: run it, then print a one-line summary.

fn annotate(config: &PipelineConfig, clients: &Clients) -> Result<(), PipelineError> {
    let r = pipeline::cmd_annotate(config, clients)?;
    println!(
        "annotate: tagged {}/{} samples against {} KCs ({} excluded)",
        r.tagged, r.samples, r.kc_count, r.excluded
    );
    Ok(())
}

fn evaluate(config: &PipelineConfig, clients: &Clients) -> Result<(), PipelineError> {
    let r = pipeline::cmd_evaluate(config, clients)?;
    println!(
        "evaluate: {} graded, {} correct (accuracy {:.3}), {} errors",
        r.graded, r.correct, r.accuracy, r.errors
    );
    Ok(())
}

fn diagnose(config: &PipelineConfig, clients: &Clients) -> Result<(), PipelineError> {
    let r = pipeline::cmd_diagnose(config, clients)?;
    println!(
        "diagnose: {} of {} KCs weak; diagnosed {}/{} errors",
        r.weak_kcs, r.kc_count, r.diagnosed, r.error_cases
    );
    Ok(())
}

fn synthesize(config: &PipelineConfig, clients: &Clients) -> Result<(), PipelineError> {
    let r = pipeline::cmd_synthesize(config, clients)?;
    println!(
        "synthesize: {} global + {} fine-grained -> {} items ({} failures)",
        r.global_items,
        r.fine_grained_items,
        r.d_s,
        r.failures.len()
    );
    Ok(())
}

fn augment(config: &PipelineConfig, clients: &Clients) -> Result<(), PipelineError> {
    let r = pipeline::cmd_augment(config, clients)?;
    println!(
        "augment: {} -> {} items ({} rewrites, {} fusions)",
        r.input, r.d_a, r.rewrites_accepted, r.fusions_accepted
    );
    Ok(())
}

fn select(config: &PipelineConfig, clients: &Clients) -> Result<(), PipelineError> {
    let r = pipeline::cmd_select(config, clients)?;
    println!(
        "select: {} -> {} past stage 1 (theta {}) -> {} final",
        r.input, r.stage1_kept, r.theta, r.retained
    );
    Ok(())
}
