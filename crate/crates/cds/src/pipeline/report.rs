//! Rendering of run artifacts into JSON and terminal-friendly reports.
//!
//! A report is a pure function of the artifacts on disk: regenerating it
//! without rerunning the pipeline always yields identical bytes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{
    artifact, artifacts, count_jsonl_lines, read_json, write_json, PipelineConfig, PipelineError,
    SelectReport, WeakKcsDoc,
};
use crate::corpus::KnowledgeComponent;
use crate::diagnosis::KCProfile;
use crate::selection::ScoreStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelStep {
    pub stage: String,
    pub count: usize,
}

/// Everything the report shows, in one serializable value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportData {
    pub student_model: String,
    pub profile: KCProfile,
    pub weak_kcs: Vec<KnowledgeComponent>,
    pub funnel: Vec<FunnelStep>,
    pub theta: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_stats: Option<ScoreStats>,
}

fn require(config: &PipelineConfig, name: &str) -> Result<PathBuf, PipelineError> {
    let path = artifact(config, name);
    if !path.is_file() {
        return Err(PipelineError::MissingArtifacts { path });
    }
    Ok(path)
}

/// Assemble the report from the artifacts in the output directory.
pub fn build_report(config: &PipelineConfig) -> Result<ReportData, PipelineError> {
    const STAGE: &str = "report";
    let profile: KCProfile = read_json(STAGE, &require(config, artifacts::PROFILE)?)?;
    let weak: WeakKcsDoc = read_json(STAGE, &require(config, artifacts::WEAK_KCS)?)?;
    let select: SelectReport = read_json(STAGE, &require(config, artifacts::SELECT_REPORT)?)?;

    let count_of = |name: &str| -> Result<usize, PipelineError> {
        let path = require(config, name)?;
        count_jsonl_lines(&path).map_err(|e| PipelineError::stage(STAGE, e))
    };
    let tagged = count_of(artifacts::TAGGED)?;
    let excluded = count_of(artifacts::EXCLUSIONS)?;
    let steps = [
        ("target samples", tagged + excluded),
        ("tagged", tagged),
        ("evaluated", count_of(artifacts::EVALUATION)?),
        ("errors", count_of(artifacts::ERROR_CASES)?),
        ("diagnosed", count_of(artifacts::DIAGNOSES)?),
        ("synthesized (d_s)", count_of(artifacts::D_S)?),
        ("augmented (d_a)", count_of(artifacts::D_A)?),
        ("passed stage-1 filter", select.stage1_kept),
        ("selected (d_final)", count_of(artifacts::D_FINAL)?),
    ];
    Ok(ReportData {
        student_model: profile.student_model_id.clone(),
        profile,
        weak_kcs: weak.weak_kcs,
        funnel: steps
            .into_iter()
            .map(|(stage, count)| FunnelStep { stage: stage.to_string(), count })
            .collect(),
        theta: select.theta,
        score_stats: select.score_stats,
    })
}

/// Build the report and write it as `report.json` + `report.txt`.
pub fn cmd_report(config: &PipelineConfig) -> Result<ReportData, PipelineError> {
    const STAGE: &str = "report";
    let data = build_report(config)?;
    write_json(STAGE, &artifact(config, artifacts::REPORT_JSON), &data)?;
    fs::write(artifact(config, artifacts::REPORT_TEXT), render_text(&data))
        .map_err(|e| PipelineError::stage(STAGE, e))?;
    Ok(data)
}

/// The per-KC mastery table, one row per component.
pub fn render_profile_text(profile: &KCProfile, weak_ids: &BTreeSet<String>) -> String {
    const HEADER: &str = "knowledge component";
    let width = profile
        .entries
        .iter()
        .map(|e| e.label.chars().count())
        .chain(std::iter::once(HEADER.len()))
        .max()
        .unwrap_or(HEADER.len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{HEADER:<width$}  accuracy  frequency  tagged  correct  weak"
    );
    let _ = writeln!(
        out,
        "{}  --------  ---------  ------  -------  ----",
        "-".repeat(width)
    );
    for entry in &profile.entries {
        let accuracy = match entry.accuracy {
            Some(a) => format!("{a:>8.4}"),
            None => format!("{:>8}", "n/a"),
        };
        let weak = if weak_ids.contains(&entry.kc_id) { "weak" } else { "" };
        let _ = writeln!(
            out,
            "{:<width$}  {}  {:>9.4}  {:>6}  {:>7}  {}",
            entry.label, accuracy, entry.frequency, entry.tagged_count, entry.correct_count, weak
        );
    }
    if let Some(t) = &profile.thresholds {
        let _ = writeln!(
            out,
            "weak when accuracy <= {:.2} or frequency <= {:.2} (undefined accuracy counts as weak)",
            t.delta_a, t.delta_f
        );
    }
    out
}

/// The full human-readable report.
pub fn render_text(data: &ReportData) -> String {
    let weak_ids: BTreeSet<String> =
        data.weak_kcs.iter().map(|kc| kc.kc_id.clone()).collect();
    let mut out = String::new();
    let _ = writeln!(out, "diagnostic synthesis report");
    let _ = writeln!(out, "===========================");
    let _ = writeln!(out);
    let _ = writeln!(out, "student model: {}", data.student_model);
    let _ = writeln!(out);
    out.push_str(&render_profile_text(&data.profile, &weak_ids));
    let _ = writeln!(out);
    let labels: Vec<&str> = data.weak_kcs.iter().map(|kc| kc.label.as_str()).collect();
    let _ = writeln!(
        out,
        "weak KCs ({}): {}",
        labels.len(),
        if labels.is_empty() { "(none)".to_string() } else { labels.join(", ") }
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "stage funnel:");
    let stage_width = data
        .funnel
        .iter()
        .map(|s| s.stage.chars().count())
        .max()
        .unwrap_or(0);
    for step in &data.funnel {
        let _ = writeln!(out, "  {:<stage_width$}  {:>6}", step.stage, step.count);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "selection (theta = {}):", data.theta);
    match &data.score_stats {
        Some(s) => {
            let _ = writeln!(out, "  scored items  {:>6}", s.count);
            let _ = writeln!(out, "  score min     {:>14.6}", s.min);
            let _ = writeln!(out, "  score max     {:>14.6}", s.max);
            let _ = writeln!(out, "  score mean    {:>14.6}", s.mean);
            let _ = writeln!(out, "  score std     {:>14.6}", s.std_dev);
            let _ = writeln!(out, "  cutoff        {:>14.6}", s.cutoff);
        }
        None => {
            let _ = writeln!(out, "  nothing survived to the scoring stage");
        }
    }
    out
}
