//! End-to-end pipeline behavior: smoke run, resume, input corruption,
//! and the CLI binary itself.

use std::fs;
use std::process::Command;

use vulnplane_cli::config::{AttackConfig, BudgetRuleConfig, DbscanConfig, PipelineConfig};
use vulnplane_cli::pipeline::{run_pipeline, run_stages, RunManifest, Stage};
use vulnplane_cli::CliError;

use vulnplane::data::{DatasetKind, DatasetSpec};
use vulnplane::optim::OptimizerConfig;
use vulnplane::train::ModelConfig;

fn smoke_config() -> PipelineConfig {
    PipelineConfig {
        seed: 42,
        dataset: DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            n_classes: 4,
            n_samples: 200,
            dim: 6,
            class_separation: 2.0,
            label_noise_rate: 0.05,
            seed: 9,
            csv_path: None,
            idx_images: None,
            idx_labels: None,
        },
        model: ModelConfig { hidden_widths: vec![16] },
        optimizer: OptimizerConfig::adamw(3e-3, 0.0),
        epochs: 20,
        checkpoint_interval: 5,
        batch_size: 32,
        n_shadow: 8,
        attack: AttackConfig::default(),
        grid_resolution: 3,
        entropy_resolution: 30,
        dbscan: DbscanConfig::default(),
        theta_vuln: 0.0,
        influence_damping: 0.01,
        travel_quantile: 0.1,
        budget_rule: BudgetRuleConfig::default(),
        emit_binary_scores: true,
        out_dir: None,
    }
}

#[test]
fn smoke_run_emits_all_declared_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&smoke_config(), dir.path(), Some(2)).unwrap();
    assert_eq!(report.executed.len(), 7);
    assert!(report.skipped.is_empty());

    for rel in [
        "pool/pool.meta.json",
        "pool/features.f32",
        "pool/labels.u16",
        "plan.json",
        "scores.jsonl",
        "scores.bin",
        "states.jsonl",
        "metrics.json",
        "transitions.csv",
        "clusters.csv",
        "exposure.csv",
        "hardness.csv",
        "correlations.csv",
        "plane.svg",
        "entropy.svg",
        "transitions.svg",
        "loss_hist.svg",
        "manifest.json",
    ] {
        assert!(dir.path().join(rel).exists(), "missing {rel}");
    }

    // manifest lists every artifact with a verifying hash
    let manifest = RunManifest::load(dir.path()).unwrap().unwrap();
    for (stage, record) in &manifest.stages {
        assert_eq!(record.status, "completed", "stage {stage}");
        for (rel, hash) in &record.outputs {
            let actual =
                vulnplane_cli::pipeline::sha256_file(&dir.path().join(rel)).unwrap();
            assert_eq!(&actual, hash, "artifact {rel}");
        }
    }
}

#[test]
fn rerun_on_completed_directory_does_no_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    run_pipeline(&cfg, dir.path(), Some(2)).unwrap();
    let second = run_pipeline(&cfg, dir.path(), Some(2)).unwrap();
    assert!(second.executed.is_empty(), "executed {:?}", second.executed);
    assert_eq!(second.skipped.len(), 7);
}

#[test]
fn corrupted_scores_are_refused_by_the_attack_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    run_stages(&cfg, dir.path(), &[Stage::GenData, Stage::Train], Some(2)).unwrap();

    let scores = dir.path().join("scores.jsonl");
    let mut bytes = fs::read(&scores).unwrap();
    bytes.extend_from_slice(b"{\"tampered\":true}\n");
    fs::write(&scores, &bytes).unwrap();

    let err = run_stages(&cfg, dir.path(), &[Stage::Attack], Some(2)).unwrap_err();
    match err {
        CliError::Stage { stage, message } => {
            assert_eq!(stage, "attack");
            assert!(message.contains("hash mismatch"), "{message}");
        }
        other => panic!("expected stage error, got {other:?}"),
    }
}

#[test]
fn config_mismatch_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    run_stages(&cfg, dir.path(), &[Stage::GenData], Some(2)).unwrap();

    let mut other = smoke_config();
    other.epochs = 40;
    let err = run_stages(&other, dir.path(), &[Stage::Train], Some(2)).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "got {err:?}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn stages_resume_individually() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    run_stages(&cfg, dir.path(), &[Stage::GenData, Stage::Train], Some(2)).unwrap();

    // attack alone picks up the training outputs
    let report = run_stages(&cfg, dir.path(), &[Stage::Attack], Some(2)).unwrap();
    assert_eq!(report.executed, vec!["attack"]);
    assert!(dir.path().join("states.jsonl").exists());

    // running the prefix again skips everything already done
    let report = run_stages(
        &cfg,
        dir.path(),
        &[Stage::GenData, Stage::Train, Stage::Attack],
        Some(2),
    )
    .unwrap();
    assert!(report.executed.is_empty());
}

#[test]
fn missing_input_names_the_producing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_stages(&smoke_config(), dir.path(), &[Stage::Dynamics], Some(2)).unwrap_err();
    match err {
        CliError::Stage { stage, message } => {
            assert_eq!(stage, "dynamics");
            assert!(message.contains("missing input"), "{message}");
        }
        other => panic!("expected stage error, got {other:?}"),
    }
}

#[test]
fn cli_binary_runs_the_pipeline_and_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    let out_path = dir.path().join("out");
    let mut cfg = smoke_config();
    // keep the binary smoke test quick
    cfg.dataset.n_samples = 80;
    cfg.epochs = 10;
    cfg.n_shadow = 6;
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let status = Command::new(env!("CARGO_BIN_EXE_vulnplane"))
        .args([
            "pipeline",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
            "--threads",
            "2",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out_path.join("correlations.csv").exists());

    // unparsable config exits with the validation code
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{not json").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_vulnplane"))
        .args(["pipeline", "--config", bad.to_str().unwrap(), "--out", out_path.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}
