//! Stage orchestration: each subcommand reads its prerequisite artifacts,
//! runs the corresponding core operation, and writes its outputs atomically.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use multicsr_core::backend::remote::{HttpTransport, RemoteBackend, RemoteEmbedder};
use multicsr_core::backend::{BackendKind, FixtureLm, LmBackend};
use multicsr_core::corpus::{self, CorpusError, ScoredTriplet, Sentence, StsExample, Triplet};
use multicsr_core::curate::{curate, score_corpus, CurateError, CurationReport};
use multicsr_core::encoder::EncoderParams;
use multicsr_core::eval::{eval_retrieval_accuracy, eval_sts, EvalResult};
use multicsr_core::generate::{
    generate_corpus, DemoPoolEntry, GenerateError, GenerationConfig, SkipRecord,
};
use multicsr_core::mask::{ParamsEmbedder, ReferenceEmbed, VectorTable};
use multicsr_core::prompts::{PromptCatalog, PromptKind};
use multicsr_core::train::{
    load_checkpoint, save_checkpoint, train, write_history, TrainConfig, TrainError,
};

use crate::config::{PipelineConfig, ReferenceConfig, SweepConfig};

#[derive(Debug, Error)]
pub enum StageError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("data error: {0}")]
    Data(String),
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::Config(_) => 2,
            StageError::MissingPrerequisite(_) => 3,
            StageError::Backend(_) => 4,
            StageError::Data(_) => 5,
        }
    }
}

impl From<CurateError> for StageError {
    fn from(e: CurateError) -> Self {
        match e {
            CurateError::Backend(b) => StageError::Backend(b.to_string()),
            CurateError::InvalidPolicy(msg) => StageError::Config(msg),
            other => StageError::Data(other.to_string()),
        }
    }
}

impl From<GenerateError> for StageError {
    fn from(e: GenerateError) -> Self {
        match e {
            GenerateError::Backend(ref b) => match b {
                multicsr_core::backend::BackendError::InvalidConfig(msg) => {
                    StageError::Config(msg.clone())
                }
                _ => StageError::Backend(e.to_string()),
            },
            GenerateError::LogitsUnsupported(_) => StageError::Config(e.to_string()),
            other => StageError::Backend(other.to_string()),
        }
    }
}

impl From<TrainError> for StageError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(msg) => StageError::Config(msg),
            other => StageError::Data(other.to_string()),
        }
    }
}

/// Map a corpus read error; `produced_by` names the stage whose output was
/// expected when the file is an intermediate artifact.
fn read_error(e: CorpusError, produced_by: Option<&str>) -> StageError {
    match (&e, produced_by) {
        (CorpusError::FileNotFound(path), Some(stage)) => StageError::MissingPrerequisite(format!(
            "{} not found; run the {stage} stage first",
            path.display()
        )),
        (CorpusError::FileNotFound(path), None) => {
            StageError::MissingPrerequisite(format!("{} not found", path.display()))
        }
        _ => StageError::Data(e.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Score,
    Curate,
    Train,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Score => "score",
            Stage::Curate => "curate",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Policy,
    Omega,
    Sigma,
}

/// Machine-readable stage summary printed to stdout, echoing the effective
/// config.
#[derive(Debug, Serialize)]
pub struct StageSummary {
    pub stage: String,
    pub skipped: bool,
    pub outputs: Vec<PathBuf>,
    pub details: Value,
    pub config: PipelineConfig,
}

fn write_json(path: &Path, value: &Value) -> Result<(), StageError> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    corpus::atomic_write(path, text.as_bytes()).map_err(|e| StageError::Data(e.to_string()))
}

fn write_skips(path: &Path, skips: &[SkipRecord]) -> Result<(), StageError> {
    let mut buf = String::new();
    for s in skips {
        buf.push_str(&serde_json::to_string(s).expect("skip serializes"));
        buf.push('\n');
    }
    corpus::atomic_write(path, buf.as_bytes()).map_err(|e| StageError::Data(e.to_string()))
}

pub fn build_backend(config: &PipelineConfig) -> Result<Box<dyn LmBackend>, StageError> {
    match config.backend.kind {
        BackendKind::Fixture => {
            let path = config.backend.fixture_path.as_ref().ok_or_else(|| {
                StageError::Config("fixture backend requires fixture_path".into())
            })?;
            Ok(Box::new(
                FixtureLm::load(path).map_err(|e| StageError::Data(e.to_string()))?,
            ))
        }
        BackendKind::RemoteLogits | BackendKind::RemoteText => {
            let transport =
                Arc::new(HttpTransport::new().map_err(|e| StageError::Backend(e.to_string()))?);
            Ok(Box::new(
                RemoteBackend::new(config.backend.clone(), transport)
                    .map_err(|e| StageError::Config(e.to_string()))?,
            ))
        }
    }
}

pub fn build_reference(
    config: &Option<ReferenceConfig>,
) -> Result<Option<Box<dyn ReferenceEmbed>>, StageError> {
    let Some(reference) = config else {
        return Ok(None);
    };
    let embedder: Box<dyn ReferenceEmbed> = match reference {
        ReferenceConfig::Vectors { path } => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| StageError::Data(format!("{}: {e}", path.display())))?;
            Box::new(VectorTable::from_jsonl(&text).map_err(|e| StageError::Data(e.to_string()))?)
        }
        ReferenceConfig::Checkpoint { path } => {
            let (params, _) = load_checkpoint(path).map_err(|e| StageError::Data(e.to_string()))?;
            Box::new(ParamsEmbedder::new(params))
        }
        ReferenceConfig::Remote { endpoint, model } => {
            let transport =
                Arc::new(HttpTransport::new().map_err(|e| StageError::Backend(e.to_string()))?);
            Box::new(RemoteEmbedder::new(
                endpoint.clone(),
                model.clone(),
                transport,
            ))
        }
        ReferenceConfig::Hash { seed, buckets, dim } => Box::new(ParamsEmbedder::new(
            EncoderParams::init(*buckets, *dim, *seed),
        )),
    };
    Ok(Some(embedder))
}

fn demo_pool_entries(path: &Path) -> Result<Vec<DemoPoolEntry>, StageError> {
    let triplets: Vec<Triplet> = corpus::read_jsonl(path).map_err(|e| read_error(e, None))?;
    let mut pool = Vec::with_capacity(triplets.len() * 2);
    for t in &triplets {
        pool.push(DemoPoolEntry {
            premise: t.premise.text.clone(),
            hypothesis: t.entailment.clone(),
            kind: PromptKind::Entailment,
        });
        pool.push(DemoPoolEntry {
            premise: t.premise.text.clone(),
            hypothesis: t.contradiction.clone(),
            kind: PromptKind::Contradiction,
        });
    }
    Ok(pool)
}

fn echo_effective_config(config: &PipelineConfig) -> Result<(), StageError> {
    std::fs::create_dir_all(&config.paths.work_dir)
        .map_err(|e| StageError::Data(format!("cannot create work_dir: {e}")))?;
    let value = serde_json::to_value(config).expect("config serializes");
    write_json(&config.paths.effective_config(), &value)
}

fn summary(
    config: &PipelineConfig,
    stage: &str,
    outputs: Vec<PathBuf>,
    details: Value,
) -> StageSummary {
    StageSummary {
        stage: stage.to_string(),
        skipped: false,
        outputs,
        details,
        config: config.clone(),
    }
}

/// Score a triplet list and write the scored artifacts.
fn score_into_files(
    config: &PipelineConfig,
    backend: &dyn LmBackend,
    triplets: &[Triplet],
) -> Result<(usize, usize), StageError> {
    let catalog = PromptCatalog::builtin();
    let (scored, skipped) = score_corpus(
        backend,
        triplets,
        catalog.scoring(),
        config.max_retries,
        config.workers,
    )?;
    corpus::write_jsonl(&scored, &config.paths.scored())
        .map_err(|e| StageError::Data(e.to_string()))?;
    write_skips(&config.paths.score_skipped(), &skipped)?;
    write_json(
        &config.paths.score_report(),
        &json!({
            "input": triplets.len(),
            "scored": scored.len(),
            "unscorable": skipped.len(),
        }),
    )?;
    Ok((scored.len(), skipped.len()))
}

fn stage_generate(config: &PipelineConfig) -> Result<StageSummary, StageError> {
    let premises: Vec<Sentence> =
        corpus::read_jsonl(&config.paths.premises).map_err(|e| read_error(e, None))?;
    let backend = build_backend(config)?;
    let catalog = PromptCatalog::builtin();

    let reference = build_reference(&config.reference)?;
    let pool;
    let demo_ctx = match &config.demo {
        Some(demo_config) => {
            let pool_path = config.paths.demo_pool.as_ref().ok_or_else(|| {
                StageError::Config("demonstrations require paths.demo_pool".into())
            })?;
            let embedder = reference.as_deref().ok_or_else(|| {
                StageError::Config("demonstrations require a reference embedder".into())
            })?;
            pool = demo_pool_entries(pool_path)?;
            Some((embedder, pool.as_slice(), demo_config))
        }
        None => None,
    };

    let (triplets, skipped) = generate_corpus(
        backend.as_ref(),
        &premises,
        &config.generation,
        &catalog,
        demo_ctx,
        config.workers,
        config.max_retries,
    )?;
    corpus::write_jsonl(&triplets, &config.paths.triplets())
        .map_err(|e| StageError::Data(e.to_string()))?;
    write_skips(&config.paths.skipped(), &skipped)?;

    let mut outputs = vec![config.paths.triplets(), config.paths.skipped()];
    let mut details = json!({
        "premises": premises.len(),
        "generated": triplets.len(),
        "skipped": skipped.len(),
    });
    if config.fused {
        let (scored, unscorable) = score_into_files(config, backend.as_ref(), &triplets)?;
        outputs.extend([
            config.paths.scored(),
            config.paths.score_skipped(),
            config.paths.score_report(),
        ]);
        details["scored"] = json!(scored);
        details["unscorable"] = json!(unscorable);
    }
    Ok(summary(config, "generate", outputs, details))
}

fn stage_score(config: &PipelineConfig) -> Result<StageSummary, StageError> {
    let triplets: Vec<Triplet> = corpus::read_jsonl(&config.paths.triplets())
        .map_err(|e| read_error(e, Some("generate")))?;
    let backend = build_backend(config)?;
    let (scored, unscorable) = score_into_files(config, backend.as_ref(), &triplets)?;
    Ok(summary(
        config,
        "score",
        vec![
            config.paths.scored(),
            config.paths.score_skipped(),
            config.paths.score_report(),
        ],
        json!({
            "input": triplets.len(),
            "scored": scored,
            "unscorable": unscorable,
        }),
    ))
}

#[derive(Deserialize)]
struct ScoreReport {
    unscorable: usize,
}

fn stage_curate(config: &PipelineConfig) -> Result<StageSummary, StageError> {
    let scored: Vec<ScoredTriplet> =
        corpus::read_jsonl(&config.paths.scored()).map_err(|e| read_error(e, Some("score")))?;
    let (kept, mut report) = curate(&scored, &config.policy)?;
    // fold the scoring stage's unscorable count into the report, so the
    // counts partition the scoring stage's input
    if let Ok(text) = std::fs::read_to_string(config.paths.score_report()) {
        let parsed: ScoreReport = serde_json::from_str(&text).map_err(|e| {
            StageError::Data(format!("{}: {e}", config.paths.score_report().display()))
        })?;
        report.dropped_unscorable = parsed.unscorable;
        report.input += parsed.unscorable;
    }
    report.check().map_err(StageError::Data)?;
    corpus::write_jsonl(&kept, &config.paths.curated())
        .map_err(|e| StageError::Data(e.to_string()))?;
    let report_value = serde_json::to_value(&report).expect("report serializes");
    write_json(&config.paths.curation_report(), &report_value)?;
    Ok(summary(
        config,
        "curate",
        vec![config.paths.curated(), config.paths.curation_report()],
        report_value,
    ))
}

fn stage_train(config: &PipelineConfig) -> Result<StageSummary, StageError> {
    let mut corpus_triplets: Vec<Triplet> =
        corpus::read_jsonl(&config.paths.curated()).map_err(|e| read_error(e, Some("curate")))?;
    if let Some(supervised) = &config.paths.supervised {
        let extra: Vec<Triplet> =
            corpus::read_jsonl(supervised).map_err(|e| read_error(e, None))?;
        corpus_triplets.extend(extra);
    }
    let dev = corpus::read_sts(&config.paths.dev_sts).map_err(|e| read_error(e, None))?;
    let reference = build_reference(&config.reference)?;
    let outcome = train(&corpus_triplets, &config.train, reference.as_deref(), &dev)?;
    save_checkpoint(&config.paths.checkpoint(), &outcome.params, &config.train)?;
    write_history(&config.paths.history(), &outcome.history)?;
    Ok(summary(
        config,
        "train",
        vec![config.paths.checkpoint(), config.paths.history()],
        json!({
            "corpus": corpus_triplets.len(),
            "best_epoch": outcome.best_epoch,
            "best_dev_spearman": outcome.best_dev_spearman,
            "mask_enabled": config.train.mask_enabled && reference.is_some(),
        }),
    ))
}

fn read_retrieval_pairs(path: &Path) -> Result<Vec<(String, String)>, StageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| StageError::Data(format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(StageError::Data(format!(
                "{}:{}: expected 2 tab-separated fields, got {}",
                path.display(),
                idx + 1,
                fields.len()
            )));
        }
        pairs.push((fields[0].to_string(), fields[1].to_string()));
    }
    Ok(pairs)
}

fn stage_eval(config: &PipelineConfig) -> Result<StageSummary, StageError> {
    let checkpoint_path = config.paths.checkpoint();
    if !checkpoint_path.exists() {
        return Err(StageError::MissingPrerequisite(format!(
            "{} not found; run the train stage first",
            checkpoint_path.display()
        )));
    }
    let (params, _) = load_checkpoint(&checkpoint_path)?;
    let test_path = config
        .paths
        .test_sts
        .as_ref()
        .ok_or_else(|| StageError::Config("eval requires paths.test_sts".into()))?;
    let examples: Vec<StsExample> = corpus::read_sts(test_path).map_err(|e| read_error(e, None))?;
    let mut results: Vec<EvalResult> =
        vec![eval_sts(&params, &examples).map_err(|e| StageError::Data(e.to_string()))?];
    if let Some(pairs_path) = &config.paths.retrieval_pairs {
        let pairs = read_retrieval_pairs(pairs_path)?;
        results.push(
            eval_retrieval_accuracy(&params, &pairs)
                .map_err(|e| StageError::Data(e.to_string()))?,
        );
    }
    for result in &results {
        println!(
            "{}",
            serde_json::to_string(result).expect("result serializes")
        );
    }
    let results_value = serde_json::to_value(&results).expect("results serialize");
    write_json(&config.paths.eval(), &results_value)?;
    Ok(summary(
        config,
        "eval",
        vec![config.paths.eval()],
        results_value,
    ))
}

fn stage_sweep(config: &PipelineConfig, kind: SweepKind) -> Result<StageSummary, StageError> {
    match kind {
        SweepKind::Policy => {
            let scored: Vec<ScoredTriplet> = corpus::read_jsonl(&config.paths.scored())
                .map_err(|e| read_error(e, Some("score")))?;
            let grid = config
                .sweep
                .policies
                .clone()
                .unwrap_or_else(SweepConfig::default_policies);
            let rows = multicsr_core::curate::sweep_policies(&scored, &grid)?;
            let value = Value::Array(
                rows.iter()
                    .map(|(policy, kept)| {
                        json!({
                            "alpha": policy.alpha,
                            "beta": policy.beta,
                            "gamma": policy.gamma,
                            "kept": kept,
                        })
                    })
                    .collect(),
            );
            write_json(&config.paths.policy_sweep(), &value)?;
            Ok(summary(
                config,
                "sweep-policy",
                vec![config.paths.policy_sweep()],
                value,
            ))
        }
        SweepKind::Omega => {
            let premises: Vec<Sentence> =
                corpus::read_jsonl(&config.paths.premises).map_err(|e| read_error(e, None))?;
            let backend = build_backend(config)?;
            let catalog = PromptCatalog::builtin();
            let omegas = config
                .sweep
                .omegas
                .clone()
                .unwrap_or_else(SweepConfig::default_omegas);
            let mut rows = Vec::new();
            let mut outputs = Vec::new();
            for omega in omegas {
                let generation = GenerationConfig {
                    omega,
                    ..config.generation.clone()
                };
                let (triplets, skipped) = generate_corpus(
                    backend.as_ref(),
                    &premises,
                    &generation,
                    &catalog,
                    None,
                    config.workers,
                    config.max_retries,
                )?;
                let path = config
                    .paths
                    .work_dir
                    .join(format!("triplets_omega_{omega}.jsonl"));
                corpus::write_jsonl(&triplets, &path)
                    .map_err(|e| StageError::Data(e.to_string()))?;
                let mean_chars = |select: fn(&Triplet) -> &str| -> f64 {
                    if triplets.is_empty() {
                        0.0
                    } else {
                        triplets
                            .iter()
                            .map(|t| select(t).chars().count())
                            .sum::<usize>() as f64
                            / triplets.len() as f64
                    }
                };
                rows.push(json!({
                    "omega": omega,
                    "generated": triplets.len(),
                    "skipped": skipped.len(),
                    "mean_entailment_chars": mean_chars(|t| &t.entailment),
                    "mean_contradiction_chars": mean_chars(|t| &t.contradiction),
                }));
                outputs.push(path);
            }
            let value = Value::Array(rows);
            write_json(&config.paths.omega_sweep(), &value)?;
            outputs.push(config.paths.omega_sweep());
            Ok(summary(config, "sweep-omega", outputs, value))
        }
        SweepKind::Sigma => {
            let corpus_triplets: Vec<Triplet> = corpus::read_jsonl(&config.paths.curated())
                .map_err(|e| read_error(e, Some("curate")))?;
            let dev = corpus::read_sts(&config.paths.dev_sts).map_err(|e| read_error(e, None))?;
            let reference = build_reference(&config.reference)?.ok_or_else(|| {
                StageError::Config("sigma sweep requires a reference embedder".into())
            })?;
            let sigmas = config
                .sweep
                .sigmas
                .clone()
                .unwrap_or_else(SweepConfig::default_sigmas);
            let mut rows = Vec::new();
            for sigma in sigmas {
                let train_config = TrainConfig {
                    sigma,
                    mask_enabled: true,
                    ..config.train.clone()
                };
                let outcome = train(
                    &corpus_triplets,
                    &train_config,
                    Some(reference.as_ref()),
                    &dev,
                )?;
                rows.push(json!({
                    "sigma": sigma,
                    "dev_spearman": outcome.best_dev_spearman,
                    "best_epoch": outcome.best_epoch,
                }));
            }
            let value = Value::Array(rows);
            write_json(&config.paths.sigma_sweep(), &value)?;
            Ok(summary(
                config,
                "sweep-sigma",
                vec![config.paths.sigma_sweep()],
                value,
            ))
        }
    }
}

pub fn run_stage(stage: Stage, config: &PipelineConfig) -> Result<StageSummary, StageError> {
    config.validate()?;
    echo_effective_config(config)?;
    match stage {
        Stage::Generate => stage_generate(config),
        Stage::Score => stage_score(config),
        Stage::Curate => stage_curate(config),
        Stage::Train => stage_train(config),
        Stage::Eval => stage_eval(config),
    }
}

pub fn run_sweep(kind: SweepKind, config: &PipelineConfig) -> Result<StageSummary, StageError> {
    config.validate()?;
    echo_effective_config(config)?;
    stage_sweep(config, kind)
}

/// Check whether a stage's outputs already exist and parse cleanly. Missing
/// outputs mean "run the stage"; corrupted outputs are a data error naming
/// the file.
fn outputs_valid(stage: Stage, config: &PipelineConfig) -> Result<bool, StageError> {
    let check_jsonl = |path: &Path,
                       parse: &dyn Fn(&Path) -> Result<(), CorpusError>|
     -> Result<bool, StageError> {
        if !path.exists() {
            return Ok(false);
        }
        parse(path).map_err(|e| {
            StageError::Data(format!("corrupted intermediate {}: {e}", path.display()))
        })?;
        Ok(true)
    };
    let triplets_ok = |p: &Path| corpus::read_jsonl::<Triplet>(p).map(|_| ());
    let scored_ok = |p: &Path| corpus::read_jsonl::<ScoredTriplet>(p).map(|_| ());
    match stage {
        Stage::Generate => check_jsonl(&config.paths.triplets(), &triplets_ok),
        Stage::Score => check_jsonl(&config.paths.scored(), &scored_ok),
        Stage::Curate => check_jsonl(&config.paths.curated(), &triplets_ok),
        Stage::Train => {
            let path = config.paths.checkpoint();
            if !path.exists() {
                return Ok(false);
            }
            load_checkpoint(&path).map_err(|e| {
                StageError::Data(format!("corrupted intermediate {}: {e}", path.display()))
            })?;
            Ok(true)
        }
        Stage::Eval => {
            let path = config.paths.eval();
            if !path.exists() {
                return Ok(false);
            }
            let text = std::fs::read_to_string(&path)
                .map_err(|e| StageError::Data(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<Vec<EvalResult>>(&text).map_err(|e| {
                StageError::Data(format!("corrupted intermediate {}: {e}", path.display()))
            })?;
            Ok(true)
        }
    }
}

/// Run generate, score, curate, train, and eval in order. With `resume`,
/// stages whose outputs exist and validate are skipped. Artifacts are
/// byte-identical to running the five stages individually with the same
/// config and seeds.
pub fn run_all(config: &PipelineConfig, resume: bool) -> Result<Vec<StageSummary>, StageError> {
    config.validate()?;
    echo_effective_config(config)?;
    let mut summaries = Vec::new();
    for stage in [
        Stage::Generate,
        Stage::Score,
        Stage::Curate,
        Stage::Train,
        Stage::Eval,
    ] {
        // the fused generate stage already produced the scored artifacts
        let fused_skip = stage == Stage::Score && config.fused;
        if fused_skip || (resume && outputs_valid(stage, config)?) {
            summaries.push(StageSummary {
                stage: stage.name().to_string(),
                skipped: true,
                outputs: Vec::new(),
                details: Value::Null,
                config: config.clone(),
            });
            continue;
        }
        let summary = match stage {
            Stage::Generate => stage_generate(config)?,
            Stage::Score => stage_score(config)?,
            Stage::Curate => stage_curate(config)?,
            Stage::Train => stage_train(config)?,
            Stage::Eval => stage_eval(config)?,
        };
        summaries.push(summary);
    }
    Ok(summaries)
}

/// Re-exported for tests: the merged curation report type.
pub type Report = CurationReport;
