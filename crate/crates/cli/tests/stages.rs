//! Stage-level integration: prerequisites, resume, exit codes, flag
//! overrides, and the sweep harnesses, all on fixture backends.

use std::path::{Path, PathBuf};
use std::process::Command;

use multicsr_core::backend::FixtureTableBuilder;
use multicsr_core::corpus::{self, ScoredTriplet, Sentence, Triplet};
use multicsr_core::prompts::{render_scoring_prompt, PromptCatalog};
use multicsr_core::synthetic::{build, SyntheticSpec};

use multicsr_cli::{run_all, run_stage, run_sweep, PipelineConfig, Stage, StageError, SweepKind};

struct Fixture {
    dir: tempfile::TempDir,
    config_path: PathBuf,
}

impl Fixture {
    fn config(&self) -> PipelineConfig {
        PipelineConfig::load(&self.config_path).unwrap()
    }

    fn work(&self, name: &str) -> PathBuf {
        self.dir.path().join("out").join(name)
    }
}

/// Premises, STS files, a fixture LM covering generation and scoring, and a
/// config document.
fn fixture(premises: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        premises,
        dev_examples: 40,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let corpus = build(&spec);
    let premises_path = dir.path().join("premises.jsonl");
    corpus::write_jsonl(&corpus.premises, &premises_path).unwrap();
    let dev_path = dir.path().join("dev.tsv");
    corpus::write_sts(&corpus.dev, &dev_path).unwrap();
    let test_path = dir.path().join("test.tsv");
    corpus::write_sts(&corpus.dev[..20], &test_path).unwrap();

    let catalog = PromptCatalog::builtin();
    let mut builder = FixtureTableBuilder::new();
    for id in ["ent-1", "ent-2", "ent-3", "ent-4"] {
        builder.canned(id, &format!("entailed by {id}"));
    }
    for id in ["con-1", "con-2", "con-3", "con-4"] {
        builder.canned(id, &format!("contradicted by {id}"));
    }
    let scores = [
        ("4.5", "0.5"),
        ("2.0", "0.5"),
        ("5.0", "4.0"),
        ("3.5", "3.0"),
    ];
    for (i, premise) in corpus.premises.iter().enumerate() {
        let (a, b) = scores[i % scores.len()];
        for id in ["ent-1", "ent-2", "ent-3", "ent-4"] {
            let key = render_scoring_prompt(
                &catalog.scoring().template,
                &premise.text,
                &format!("entailed by {id}"),
            );
            builder.canned(&key, a);
        }
        for id in ["con-1", "con-2", "con-3", "con-4"] {
            let key = render_scoring_prompt(
                &catalog.scoring().template,
                &premise.text,
                &format!("contradicted by {id}"),
            );
            builder.canned(&key, b);
        }
    }
    let fixture_path = dir.path().join("fixture_lm.jsonl");
    builder.write(&fixture_path).unwrap();

    let config = serde_json::json!({
        "backend": {"kind": "fixture", "fixture_path": fixture_path},
        "generation": {"omega": 0.3, "max_tokens": 16, "seed": 5, "mode": "direct"},
        "policy": {"alpha": 3.0, "beta": 3.0, "gamma": 1.0},
        "train": {
            "tau": 0.2, "sigma": 0.9, "batch_size": 8, "lr": 0.02, "epochs": 2,
            "seed": 5, "mask_enabled": true, "buckets": 512, "dim": 8
        },
        "paths": {
            "premises": premises_path,
            "work_dir": dir.path().join("out"),
            "dev_sts": dev_path,
            "test_sts": test_path
        },
        "reference": {"kind": "hash", "seed": 99, "buckets": 512, "dim": 8},
        "workers": 2,
        "max_retries": 1
    });
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    Fixture { dir, config_path }
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let f = fixture(16);
    let summaries = run_all(&f.config(), false).unwrap();
    assert_eq!(summaries.len(), 5);
    assert!(summaries.iter().all(|s| !s.skipped));
    for name in [
        "triplets.jsonl",
        "skipped.jsonl",
        "scored.jsonl",
        "curated.jsonl",
        "curation_report.json",
        "checkpoint.json",
        "history.jsonl",
        "eval.json",
        "effective_config.json",
    ] {
        assert!(f.work(name).exists(), "{name} missing");
    }
    // curation kept exactly the (4.5, 0.5) quarter of the premises
    let curated: Vec<Triplet> = corpus::read_jsonl(&f.work("curated.jsonl")).unwrap();
    assert_eq!(curated.len(), 4);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.work("curation_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["input"], 16);
    assert_eq!(report["kept"], 4);
    assert_eq!(report["dropped_low_a"], 4);
    assert_eq!(report["dropped_high_b"], 4);
    assert_eq!(report["dropped_margin"], 4);
    // triplet ids trace back to premise ids
    let premises: Vec<Sentence> = corpus::read_jsonl(&f.dir.path().join("premises.jsonl")).unwrap();
    let premise_ids: Vec<&str> = premises.iter().map(|p| p.id.as_str()).collect();
    let triplets: Vec<Triplet> = corpus::read_jsonl(&f.work("triplets.jsonl")).unwrap();
    for t in &triplets {
        assert!(premise_ids.contains(&t.id.as_str()), "{} untraceable", t.id);
    }
}

#[test]
fn run_stage_curate_without_score_is_missing_prerequisite() {
    let f = fixture(8);
    match run_stage(Stage::Curate, &f.config()) {
        Err(StageError::MissingPrerequisite(msg)) => {
            assert!(msg.contains("scored.jsonl"), "{msg}")
        }
        other => panic!("expected MissingPrerequisite, got {other:?}"),
    }
    match run_stage(Stage::Train, &f.config()) {
        Err(StageError::MissingPrerequisite(msg)) => {
            assert!(msg.contains("curated.jsonl"), "{msg}")
        }
        other => panic!("expected MissingPrerequisite, got {other:?}"),
    }
}

#[test]
fn resume_skips_valid_stages_and_flags_corruption() {
    let f = fixture(12);
    run_all(&f.config(), false).unwrap();
    let resumed = run_all(&f.config(), true).unwrap();
    assert!(resumed.iter().all(|s| s.skipped), "all stages should skip");

    // corrupt one intermediate: resume must name the file, not recompute
    std::fs::write(f.work("scored.jsonl"), "{not json\n").unwrap();
    match run_all(&f.config(), true) {
        Err(StageError::Data(msg)) => assert!(msg.contains("scored.jsonl"), "{msg}"),
        other => panic!("expected DataError, got {other:?}"),
    }

    // removing an output re-runs from that stage onward
    std::fs::remove_file(f.work("scored.jsonl")).unwrap();
    let partial = run_all(&f.config(), true).unwrap();
    assert!(partial[0].skipped, "generate output intact");
    assert!(!partial[1].skipped, "score re-runs");
}

#[test]
fn fused_generate_also_scores() {
    let f = fixture(8);
    let mut config = f.config();
    config.fused = true;
    let summary = run_stage(Stage::Generate, &config).unwrap();
    assert!(f.work("scored.jsonl").exists());
    assert_eq!(summary.details["scored"], 8);
    // the fused artifacts equal the two-stage route byte for byte
    let fused_bytes = std::fs::read(f.work("scored.jsonl")).unwrap();
    let plain = f.config();
    run_stage(Stage::Generate, &plain).unwrap();
    run_stage(Stage::Score, &plain).unwrap();
    assert_eq!(std::fs::read(f.work("scored.jsonl")).unwrap(), fused_bytes);

    // run-all with fused generation skips the standalone score stage and
    // still produces identical downstream artifacts
    let summaries = run_all(&config, false).unwrap();
    assert!(!summaries[0].skipped, "fused generate runs");
    assert!(summaries[1].skipped, "score already folded into generate");
    assert_eq!(std::fs::read(f.work("scored.jsonl")).unwrap(), fused_bytes);
    assert!(f.work("checkpoint.json").exists());
}

#[test]
fn policy_sweep_writes_one_row_per_policy() {
    let f = fixture(12);
    let config = f.config();
    run_stage(Stage::Generate, &config).unwrap();
    run_stage(Stage::Score, &config).unwrap();
    let summary = run_sweep(SweepKind::Policy, &config).unwrap();
    let rows = summary.details.as_array().unwrap();
    assert_eq!(rows.len(), 12, "default policy grid");
    let scored: Vec<ScoredTriplet> = corpus::read_jsonl(&f.work("scored.jsonl")).unwrap();
    for row in rows {
        let policy = multicsr_core::corpus::CurationPolicy {
            alpha: row["alpha"].as_f64().unwrap(),
            beta: row["beta"].as_f64().unwrap(),
            gamma: row["gamma"].as_f64().unwrap(),
        };
        let (kept, _) = multicsr_core::curate::curate(&scored, &policy).unwrap();
        assert_eq!(kept.len() as u64, row["kept"].as_u64().unwrap());
    }
}

#[test]
fn sigma_sweep_trains_per_threshold() {
    let f = fixture(10);
    let config = f.config();
    run_stage(Stage::Generate, &config).unwrap();
    run_stage(Stage::Score, &config).unwrap();
    run_stage(Stage::Curate, &config).unwrap();
    let mut config = config;
    config.sweep.sigmas = Some(vec![0.8, 0.9]);
    let summary = run_sweep(SweepKind::Sigma, &config).unwrap();
    let rows = summary.details.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["sigma"], 0.8);
    assert!(rows[0]["dev_spearman"].is_number());
}

#[test]
fn omega_sweep_generates_per_value() {
    let f = fixture(6);
    let mut config = f.config();
    config.sweep.omegas = Some(vec![0.0, 0.3]);
    let summary = run_sweep(SweepKind::Omega, &config).unwrap();
    let rows = summary.details.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(f.work("triplets_omega_0.jsonl").exists());
    assert!(f.work("triplets_omega_0.3.jsonl").exists());
    assert_eq!(rows[0]["generated"], 6);
}

// ------------------------------------------------------------ binary-level

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_multicsr"))
}

#[test]
fn binary_exit_codes_match_error_categories() {
    // 2: config error (missing config file)
    let out = bin()
        .args(["curate", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");

    // 3: missing prerequisite (curate before score)
    let f = fixture(6);
    let out = bin()
        .args(["curate", "--config"])
        .arg(&f.config_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{out:?}");

    // 0: success, machine-readable summary on stdout
    let out = bin()
        .args(["generate", "--config"])
        .arg(&f.config_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let summary: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stdout is one JSON summary");
    assert_eq!(summary["stage"], "generate");
    assert_eq!(summary["details"]["generated"], 6);
    assert_eq!(summary["config"]["policy"]["alpha"], 3.0);

    // 5: data error (corrupted input to score)
    std::fs::write(f.work("triplets.jsonl"), "{broken\n").unwrap();
    let out = bin()
        .args(["score", "--config"])
        .arg(&f.config_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5), "{out:?}");
}

#[test]
fn direct_flag_and_overrides_flow_into_outputs() {
    let f = fixture(6);
    let out = bin()
        .args(["run-all", "--config"])
        .arg(&f.config_path)
        .args(["--seed", "21", "--alpha", "2.0", "--workers", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let effective: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.work("effective_config.json")).unwrap())
            .unwrap();
    assert_eq!(effective["policy"]["alpha"], 2.0);
    assert_eq!(effective["generation"]["seed"], 21);
    assert_eq!(effective["train"]["seed"], 21);
    // direct mode was configured, so triplet meta has no omega
    let triplets: Vec<Triplet> = corpus::read_jsonl(&f.work("triplets.jsonl")).unwrap();
    assert!(triplets.iter().all(|t| t.meta.omega.is_none()));

    // eval prints one JSON result line per metric before the summary
    let stdout = String::from_utf8(out.stdout).unwrap();
    let eval_line = stdout
        .lines()
        .find(|l| l.contains("\"metric\":\"spearman\""))
        .expect("eval result line");
    let value: serde_json::Value = serde_json::from_str(eval_line).unwrap();
    assert!(value["value"].is_number());
    assert_eq!(value["n"], 20);
}

#[test]
fn atomic_writes_leave_no_partial_files() {
    let f = fixture(6);
    run_all(&f.config(), false).unwrap();
    let leftovers: Vec<_> = std::fs::read_dir(f.dir.path().join("out"))
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|name| name.starts_with(".tmp"))
        .collect();
    assert!(
        leftovers.is_empty(),
        "temp files left behind: {leftovers:?}"
    );
}

/// Validation catches missing user inputs up front as config errors.
#[test]
fn missing_premises_is_a_config_error() {
    let f = fixture(6);
    let mut config = f.config();
    config.paths.premises = Path::new("/nonexistent/premises.jsonl").to_path_buf();
    match run_stage(Stage::Generate, &config) {
        Err(StageError::Config(msg)) => assert!(msg.contains("premises"), "{msg}"),
        other => panic!("expected Config error, got {other:?}"),
    }
}
