mod fixture;

use std::path::Path;

use fixture::{run_cli, scratch, write_config, SMALL};
use latsched::cli::{ScheduleArtifact, PCA_MODEL, SBM_MODEL, SCHEDULE_JSON};

fn copy(from: &Path, to: &Path, files: &[&str]) {
    for f in files {
        std::fs::copy(from.join(f), to.join(f)).unwrap();
    }
}

const UPSTREAM: [&str; 4] = ["campaign.csv", "campaign.json", PCA_MODEL, SBM_MODEL];

#[test]
fn schedule_without_latent_models_exits_1() {
    let dir = scratch("no-sbm");
    write_config(&dir, SMALL);
    copy(fixture::small_pipeline(), &dir, &["campaign.csv", "campaign.json", PCA_MODEL]);
    assert_eq!(run_cli(&dir, &["--arch", "pca", "schedule"]), 1);
    assert!(!dir.join(SCHEDULE_JSON).exists());
}

#[test]
fn unknown_config_field_exits_1() {
    let dir = scratch("bad-config");
    write_config(&dir, r#"{"campaign": {"episodez": 3}}"#);
    assert_eq!(run_cli(&dir, &["simulate"]), 1);
}

#[test]
fn unreachable_demand_exits_2_with_schedule_written() {
    let dir = scratch("demand-25");
    write_config(&dir, r#"{"campaign": {"episodes": 4}, "schedule": {"problem": {"demand": 25.0}}}"#);
    copy(fixture::small_pipeline(), &dir, &UPSTREAM);
    assert_eq!(run_cli(&dir, &["--arch", "pca", "schedule"]), 2);
    let art: ScheduleArtifact = fixture::read_artifact(&dir.join(SCHEDULE_JSON));
    assert!(!art.solution.feasible);
    assert_eq!(art.problem.demand, 25.0);
}

#[test]
fn tampered_upstream_artifact_is_rejected() {
    let dir = scratch("tampered");
    write_config(&dir, SMALL);
    copy(fixture::small_pipeline(), &dir, &UPSTREAM);
    assert_eq!(run_cli(&dir, &["--arch", "pca", "schedule"]), 0);
    let path = dir.join(PCA_MODEL);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push('\n');
    std::fs::write(&path, text).unwrap();
    assert_eq!(run_cli(&dir, &["--arch", "pca", "schedule"]), 1);
}

#[test]
fn rerun_is_byte_identical() {
    let a = fixture::small_pipeline();
    let b = scratch("rerun");
    write_config(&b, SMALL);
    assert_eq!(run_cli(&b, &["--arch", "pca", "pipeline"]), 0);
    let files = [
        "campaign.csv",
        "campaign.json",
        PCA_MODEL,
        SBM_MODEL,
        SCHEDULE_JSON,
        "schedule.csv",
        "validation.json",
        "report/summary.json",
        "report/nmse.csv",
        "report/violations.csv",
        "report/trajectories.csv",
        "report/solver_log.json",
    ];
    for f in files {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn seed_flag_changes_the_campaign() {
    let dir = scratch("seed-3");
    write_config(&dir, SMALL);
    assert_eq!(run_cli(&dir, &["--seed", "3", "simulate"]), 0);
    let a = std::fs::read(fixture::small_pipeline().join("campaign.csv")).unwrap();
    let b = std::fs::read(dir.join("campaign.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn help_and_bad_subcommand() {
    assert_eq!(latsched::cli::run(["latsched", "--help"]), 0);
    assert_eq!(latsched::cli::run(["latsched", "frobnicate"]), 1);
}

#[test]
fn shipped_example_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/pipeline.example.json");
    let cfg = latsched::cli::PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg, latsched::cli::PipelineConfig::default());
}
