//! Drives the `cds` binary end to end: exit codes for the documented
//! failure classes, flag overrides, and a full replayed run through
//! `run-all` and `report`.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{artifact_files, base_config, recording_clients, WEAK_LABELS};
use tempfile::tempdir;

fn cds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cds"))
        .args(args)
        .output()
        .expect("spawn cds binary")
}

fn write_config(path: &Path, value: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("config json"))
        .expect("write config");
}

/// Record the scripted corpus once and return a config file whose runs
/// replay entirely from fixtures.
fn replayable_workspace(root: &Path) -> std::path::PathBuf {
    let fixtures = root.join("fixtures");
    let recorded = base_config(root, "recorded");
    cds::pipeline::cmd_run_all(&recorded, &recording_clients(&fixtures)).expect("record");

    let config_path = root.join("config.json");
    write_config(
        &config_path,
        &serde_json::json!({
            "paths": {
                "target": root.join("target.jsonl"),
                "fixtures_dir": fixtures,
                "output_dir": root.join("out"),
            },
            "annotation": { "exemplar_kcs": ["Addition", "Percentages"] },
            "seed": 7,
        }),
    );
    config_path
}

#[test]
fn bad_configs_exit_two() {
    let root = tempdir().expect("tempdir");

    // unreadable config file
    let missing = root.path().join("nope.json");
    let out = cds(&["annotate", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    // readable config with an impossible parameter
    let config_path = root.path().join("overfull.json");
    write_config(
        &config_path,
        &serde_json::json!({
            "paths": {
                "target": root.path().join("target.jsonl"),
                "fixtures_dir": root.path(),
                "output_dir": root.path().join("out"),
            },
            "synthesis": { "p_rewrite": 0.9, "p_fusion": 0.2 },
        }),
    );
    common::write_target(root.path());
    let out = cds(&["run-all", "--config", config_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds 1"));
}

#[test]
fn missing_inputs_exit_three() {
    let root = tempdir().expect("tempdir");
    let config_path = root.path().join("config.json");
    write_config(
        &config_path,
        &serde_json::json!({
            "paths": {
                "target": root.path().join("absent.jsonl"),
                "fixtures_dir": root.path(),
                "output_dir": root.path().join("out"),
            },
        }),
    );
    let out = cds(&["annotate", "--config", config_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    // a valid config, but evaluate asked for before annotate produced
    // its artifacts
    let ready = replayable_workspace(root.path());
    let out = cds(&["evaluate", "--config", ready.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tagged.jsonl"));
}

#[test]
fn stage_failures_exit_four() {
    let root = tempdir().expect("tempdir");
    common::write_target(root.path());
    let empty_fixtures = root.path().join("empty");
    std::fs::create_dir_all(&empty_fixtures).expect("mkdir");
    let config_path = root.path().join("config.json");
    write_config(
        &config_path,
        &serde_json::json!({
            "paths": {
                "target": root.path().join("target.jsonl"),
                "fixtures_dir": empty_fixtures,
                "output_dir": root.path().join("out"),
            },
        }),
    );
    // every model call misses its fixture, so annotation cannot proceed
    let out = cds(&["annotate", "--config", config_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn replayed_run_all_and_report_succeed() {
    let root = tempdir().expect("tempdir");
    let config_path = replayable_workspace(root.path());
    let config = config_path.to_str().unwrap();

    let out = cds(&["run-all", "--config", config]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("annotate:"));
    assert!(stdout.contains("select:"));
    assert!(root.path().join("out/manifest.json").is_file());

    let out = cds(&["report", "--config", config]);
    assert_eq!(out.status.code(), Some(0));
    let report = String::from_utf8_lossy(&out.stdout);
    for label in WEAK_LABELS {
        assert!(report.contains(label), "report must mention {label}");
    }
    assert!(report.contains("selected (d_final)"));
}

#[test]
fn out_flag_redirects_and_repeats_exactly() {
    let root = tempdir().expect("tempdir");
    let config_path = replayable_workspace(root.path());
    let config = config_path.to_str().unwrap();

    let first = root.path().join("first");
    let second = root.path().join("second");
    for out_dir in [&first, &second] {
        let out = cds(&["run-all", "--config", config, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(
        artifact_files(&first),
        artifact_files(&second),
        "same fixtures and seed must reproduce every artifact"
    );
}

#[test]
fn threshold_flags_override_the_config() {
    let root = tempdir().expect("tempdir");
    let config_path = replayable_workspace(root.path());
    let config = config_path.to_str().unwrap();

    let out = cds(&["run-all", "--config", config]);
    assert_eq!(out.status.code(), Some(0));

    // zero thresholds leave nothing weak; the report's weak list empties
    let out = cds(&[
        "diagnose",
        "--config",
        config,
        "--delta-a",
        "0.0",
        "--delta-f",
        "0.0",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let weak: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(root.path().join("out/weak_kcs.json")).expect("weak"),
    )
    .expect("weak json");
    assert_eq!(weak["weak_kcs"].as_array().map(Vec::len), Some(0));
}
